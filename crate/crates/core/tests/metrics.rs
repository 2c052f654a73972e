use gda_core::metrics::{classification_report, frechet_distance, ssim, w1, Features, SSIM_C1};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

#[test]
fn ssim_identity_is_exactly_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (h, w) in [(64, 64), (8, 8), (20, 13), (3, 5)] {
        let x = random_image(&mut rng, h * w);
        assert_eq!(ssim(&x, &x, h, w).unwrap(), 1.0);
    }
}

#[test]
fn ssim_of_black_vs_white() {
    let (a, b) = (vec![0.0; 64 * 64], vec![1.0; 64 * 64]);
    let expected = SSIM_C1 / (1.0 + SSIM_C1);
    let got = ssim(&a, &b, 64, 64).unwrap();
    assert!((got - expected).abs() < 1e-9);
    assert!((got - 9.999e-5).abs() < 1e-8);
}

#[test]
fn ssim_is_symmetric_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (a, b) = (random_image(&mut rng, 4096), random_image(&mut rng, 4096));
        let (ab, ba) = (ssim(&a, &b, 64, 64).unwrap(), ssim(&b, &a, 64, 64).unwrap());
        assert!((ab - ba).abs() < 1e-15);
        assert!((-1.0..=1.0).contains(&ab));
    }
    assert!(ssim(&[0.0; 4], &[0.0; 6], 2, 2).is_err());
}

#[test]
fn ssim_degrades_with_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..4096).map(|i| 0.5 + 0.4 * ((i % 64) as f64 / 10.0).sin()).collect();
    let mean_ssim = |sigma: f64, rng: &mut ChaCha8Rng| {
        (0..50)
            .map(|_| {
                let y: Vec<f64> = x
                    .iter()
                    .map(|v| (v + sigma * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
                    .collect();
                ssim(&x, &y, 64, 64).unwrap()
            })
            .sum::<f64>()
            / 50.0
    };
    let levels = [0.01, 0.05, 0.1, 0.3];
    let means: Vec<f64> = levels.iter().map(|&s| mean_ssim(s, &mut rng)).collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
}

/// W1 as the integral of |F_a − F_b| over the real line.
fn cdf_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut pts: Vec<f64> = a.iter().chain(b).copied().collect();
    pts.sort_by(f64::total_cmp);
    let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    pts.windows(2)
        .map(|w| (w[1] - w[0]) * (cdf(a, w[0]) - cdf(b, w[0])).abs())
        .sum()
}

#[test]
fn w1_identity_and_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_image(&mut rng, 37);
    assert_eq!(w1(&x, &x).unwrap(), 0.0);
    // Dyadic values make the shift exact in floating point.
    let d: Vec<f64> = (0..40).map(|_| rng.random_range(0..1024) as f64 / 1024.0).collect();
    for c in [0.5, -2.0, 0.125] {
        let s: Vec<f64> = d.iter().map(|v| v + c).collect();
        assert_eq!(w1(&d, &s).unwrap(), c.abs());
    }
    let s: Vec<f64> = x.iter().map(|v| v + 0.3).collect();
    assert!((w1(&x, &s).unwrap() - 0.3).abs() < 1e-12);
    assert!(w1(&[], &x).is_err());
}

#[test]
fn w1_matches_cdf_oracle_on_unequal_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (n, m) = (rng.random_range(1..=50), rng.random_range(1..=50));
        let a: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..m).map(|_| 0.5 + 2.0 * rng.random::<f64>()).collect();
        let (got, want) = (w1(&a, &b).unwrap(), cdf_oracle(&a, &b));
        assert!((got - want).abs() < 1e-10, "n={n} m={m}: {got} vs {want}");
    }
}

fn feats(rows: &[&[f64]]) -> Features {
    let dim = rows[0].len();
    Features::new(rows.len(), dim, rows.concat()).unwrap()
}

#[test]
fn frechet_one_dimensional_closed_form() {
    // Sample moments: mean 0, std 1 and mean 1, std 2.
    let a = feats(&[&[-1.0], &[0.0], &[1.0]]);
    let b = feats(&[&[-1.0], &[1.0], &[3.0]]);
    assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-8);
}

fn random_features(rng: &mut ChaCha8Rng, rows: usize, dim: usize, shift: f64) -> Features {
    let data = (0..rows * dim)
        .map(|i| shift * (i % dim) as f64 + rng.sample::<f64, _>(StandardNormal) * (1.0 + (i % 3) as f64))
        .collect();
    Features::new(rows, dim, data).unwrap()
}

#[test]
fn frechet_identity_symmetry_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_features(&mut rng, 80, 6, 0.0);
    let b = random_features(&mut rng, 50, 6, 0.3);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-8);
    let mut rows: Vec<usize> = (0..b.rows).collect();
    rows.reverse();
    rows.swap(3, 17);
    let permuted = Features::new(b.rows, b.dim, rows.iter().flat_map(|&r| b.row(r).to_vec()).collect()).unwrap();
    assert!((frechet_distance(&a, &permuted).unwrap() - ab).abs() < 1e-12);
}

fn moments_2d(f: &Features) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = f.rows as f64;
    let mu = [0, 1].map(|k| (0..f.rows).map(|r| f.row(r)[k]).sum::<f64>() / n);
    let mut c = [[0.0; 2]; 2];
    for r in 0..f.rows {
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] += (f.row(r)[i] - mu[i]) * (f.row(r)[j] - mu[j]) / (n - 1.0);
            }
        }
    }
    (mu, c)
}

#[test]
fn frechet_two_dimensional_closed_form() {
    // For 2×2 M with non-negative eigenvalues, tr √M = √(tr M + 2√det M).
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let a = random_features(&mut rng, 30, 2, 0.5);
        let b = random_features(&mut rng, 40, 2, -0.2);
        let ((ma, ca), (mb, cb)) = (moments_2d(&a), moments_2d(&b));
        let m = [
            [
                ca[0][0] * cb[0][0] + ca[0][1] * cb[1][0],
                ca[0][0] * cb[0][1] + ca[0][1] * cb[1][1],
            ],
            [
                ca[1][0] * cb[0][0] + ca[1][1] * cb[1][0],
                ca[1][0] * cb[0][1] + ca[1][1] * cb[1][1],
            ],
        ];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let tr_sqrt = (m[0][0] + m[1][1] + 2.0 * det.sqrt()).sqrt();
        let want = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2) + ca[0][0] + ca[1][1] + cb[0][0] + cb[1][1]
            - 2.0 * tr_sqrt;
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn frechet_errors_and_small_sets() {
    let a = Features::new(2, 0, vec![]).unwrap();
    assert!(frechet_distance(&a, &a).is_err());
    let nan = feats(&[&[f64::NAN]]);
    assert!(frechet_distance(&nan, &nan).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let few = random_features(&mut rng, 4, 10, 0.0);
    let d = frechet_distance(&few, &random_features(&mut rng, 5, 10, 1.0)).unwrap();
    assert!(d.is_finite() && d >= 0.0);
}

#[test]
fn perfect_predictions_score_one() {
    let t = vec![0, 1, 2, 2, 1, 0, 3];
    let m = classification_report(&t, &t, 4).unwrap();
    assert_eq!(
        (m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1),
        (1.0, 1.0, 1.0, 1.0)
    );
}

#[test]
fn absent_class_counts_as_zero() {
    let m = classification_report(&[0, 1], &[0, 1], 3).unwrap();
    assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn table_style_formatting() {
    assert_eq!(format!("{:.4},{:.4}", 0.9127, 0.91034), "0.9127,0.9103");
}

proptest! {
    #[test]
    fn w1_triangle_inequality(
        a in prop::collection::vec(-5.0f64..5.0, 1..30),
        b in prop::collection::vec(-5.0f64..5.0, 1..30),
        c in prop::collection::vec(-5.0f64..5.0, 1..30),
    ) {
        let ac = w1(&a, &c).unwrap();
        prop_assert!(ac <= w1(&a, &b).unwrap() + w1(&b, &c).unwrap() + 1e-10);
    }

    #[test]
    fn accuracy_is_trace_over_total(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..100)) {
        let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = classification_report(&p, &t, 5).unwrap();
        let trace: u64 = (0..5).map(|c| m.confusion[c][c]).sum();
        prop_assert_eq!(m.accuracy, trace as f64 / t.len() as f64);
        for c in 0..5 {
            prop_assert_eq!(m.confusion[c].iter().sum::<u64>(), t.iter().filter(|&&x| x == c).count() as u64);
        }
        for v in [m.macro_precision, m.macro_recall, m.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
