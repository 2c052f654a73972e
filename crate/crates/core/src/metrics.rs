//! Generative-quality metrics (SSIM, 1-Wasserstein, Fréchet distance) and
//! classification metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrogram::Spectrogram;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Added to both covariance diagonals when a set has fewer than `D + 1` rows.
pub const FRECHET_RIDGE: f64 = 1e-6;
const EIGEN_FLOOR: f64 = 1e-10;

pub const PAIRING_SCHEME: &str =
    "best-match: each generated sample is paired with the same-gesture real sample of highest SSIM";

fn window_starts(n: usize) -> Vec<usize> {
    if n <= SSIM_WINDOW {
        return vec![0];
    }
    (0..=n - SSIM_WINDOW).step_by(SSIM_STRIDE).collect()
}

/// Mean local SSIM over 8×8 windows at stride 4 (a single whole-image window
/// for images smaller than that), with dynamic range 1.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != height * width || a.is_empty() {
        return Err(Error::invalid(format!(
            "ssim needs two {height}×{width} images, got {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    let (wh, ww) = (SSIM_WINDOW.min(height), SSIM_WINDOW.min(width));
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for &y0 in &window_starts(height) {
        for &x0 in &window_starts(width) {
            let idx = |dy: usize, dx: usize| (y0 + dy) * width + x0 + dx;
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..wh {
                for dx in 0..ww {
                    ma += a[idx(dy, dx)];
                    mb += b[idx(dy, dx)];
                }
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..wh {
                for dx in 0..ww {
                    let (da, db) = (a[idx(dy, dx)] - ma, b[idx(dy, dx)] - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn ssim_spectrograms(a: &Spectrogram, b: &Spectrogram) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    ssim(&a.pixels_f64(), &b.pixels_f64(), a.freq_bins(), a.frames())
}

/// Exact 1-Wasserstein distance between two empirical distributions,
/// integrating |Q_a(u) − Q_b(u)| over the merged quantile breakpoints.
pub fn w1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("w1 sample set"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("w1 samples must be finite"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let sum: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(sum / a.len() as f64);
    }
    // Step through u ∈ [0, 1]; quantile i of a covers [i/n, (i+1)/n). Cross
    // multiplied integer positions keep breakpoints exact.
    let (n, m) = (a.len() as u128, b.len() as u128);
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos = 0u128; // in units of 1/(n·m)
    let mut total = 0.0;
    while (i as u128) < n && (j as u128) < m {
        let next_a = (i as u128 + 1) * m;
        let next_b = (j as u128 + 1) * n;
        let next = next_a.min(next_b);
        total += (next - pos) as f64 * (a[i] - b[j]).abs();
        pos = next;
        if next == next_a {
            i += 1;
        }
        if next == next_b {
            j += 1;
        }
    }
    Ok(total / (n * m) as f64)
}

/// Row-major `rows × dim` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::invalid(format!(
                "feature matrix {rows}×{dim} with {} values",
                data.len()
            )));
        }
        Ok(Features { rows, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim;
        let mut mean = DVector::zeros(d);
        for r in 0..self.rows {
            for (k, v) in self.row(r).iter().enumerate() {
                mean[k] += v;
            }
        }
        mean /= self.rows as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in 0..self.rows {
            let c = DVector::from_iterator(d, self.row(r).iter().zip(mean.iter()).map(|(x, m)| x - m));
            cov += &c * c.transpose();
        }
        if self.rows > 1 {
            cov /= (self.rows - 1) as f64;
        }
        if self.rows < d + 1 {
            for k in 0..d {
                cov[(k, k)] += FRECHET_RIDGE;
            }
        }
        (mean, cov)
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| if l > EIGEN_FLOOR { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between Gaussians fitted to two feature sets
/// (sample covariance with `N − 1` normalization).
pub fn frechet_distance(a: &Features, b: &Features) -> Result<f64> {
    if a.dim == 0 || b.dim == 0 {
        return Err(Error::invalid("Fréchet distance needs feature dimension ≥ 1"));
    }
    if a.dim != b.dim {
        return Err(Error::invalid(format!("feature dims differ: {} vs {}", a.dim, b.dim)));
    }
    if a.rows == 0 || b.rows == 0 {
        return Err(Error::Empty("feature set"));
    }
    if a.data.iter().chain(&b.data).any(|v| !v.is_finite()) {
        return Err(Error::invalid("features must be finite"));
    }
    let (mu_a, cov_a) = a.moments();
    let (mu_b, cov_b) = b.moments();
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_sqrt: f64 = eig
        .eigenvalues
        .iter()
        .map(|&l| if l > EIGEN_FLOOR { l.sqrt() } else { 0.0 })
        .sum();
    let d2 = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(d2.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Accuracy and macro-averaged precision/recall/F1 over all `g` classes.
/// Classes without predictions (or support) score 0 precision (or recall)
/// and still count toward the macro mean.
pub fn classification_report(predictions: &[usize], truth: &[usize], g: usize) -> Result<ClassificationMetrics> {
    if predictions.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Empty("label set"));
    }
    if let Some(&l) = predictions.iter().chain(truth).find(|&&l| l >= g) {
        return Err(Error::invalid(format!("label {l} out of range for {g} classes")));
    }
    let mut confusion = vec![vec![0u64; g]; g];
    for (&p, &t) in predictions.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let correct: u64 = (0..g).map(|c| confusion[c][c]).sum();
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..g {
        let tp = confusion[c][c] as f64;
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = (0..g).map(|t| confusion[t][c]).sum();
        let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let r = if support > 0 { tp / support as f64 } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        sp += p;
        sr += r;
        sf += f;
    }
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / truth.len() as f64,
        macro_precision: sp / g as f64,
        macro_recall: sr / g as f64,
        macro_f1: sf / g as f64,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassQuality {
    pub gesture: u16,
    pub n_generated: usize,
    pub ssim_mean: f64,
    pub w1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub ssim_mean: f64,
    /// Pooled-pixel 1-Wasserstein distance.
    pub w1: f64,
    /// Mean over gestures of the per-gesture pooled-pixel W1.
    pub w1_per_class_mean: f64,
    /// Squared Fréchet distance over classifier features ("FD").
    pub frechet: Option<f64>,
    pub n_pairs: usize,
    pub pairing: String,
    pub per_class: Vec<ClassQuality>,
}

fn pooled(set: &[&Spectrogram]) -> Vec<f64> {
    set.iter().flat_map(|s| s.pixels_f64()).collect()
}

/// Best-match SSIM and pooled-pixel W1 between generated and real sets;
/// `features` supplies (generated, real) classifier features for FD.
pub fn quality_report(
    generated: &[Spectrogram],
    real: &[Spectrogram],
    features: Option<(&Features, &Features)>,
) -> Result<QualityReport> {
    if generated.is_empty() {
        return Err(Error::Empty("generated set"));
    }
    if real.is_empty() {
        return Err(Error::Empty("real set"));
    }
    let mut gestures: Vec<u16> = generated.iter().map(|s| s.condition.gesture).collect();
    gestures.sort_unstable();
    gestures.dedup();
    let mut per_class = Vec::new();
    let mut ssim_total = 0.0;
    for &g in &gestures {
        let gen: Vec<&Spectrogram> = generated.iter().filter(|s| s.condition.gesture == g).collect();
        let reals: Vec<&Spectrogram> = real.iter().filter(|s| s.condition.gesture == g).collect();
        if reals.is_empty() {
            return Err(Error::invalid(format!("no real sample of gesture {g} to pair with")));
        }
        let mut class_total = 0.0;
        for s in &gen {
            let mut best = f64::NEG_INFINITY;
            for r in &reals {
                best = best.max(ssim_spectrograms(s, r)?);
            }
            class_total += best;
        }
        ssim_total += class_total;
        per_class.push(ClassQuality {
            gesture: g,
            n_generated: gen.len(),
            ssim_mean: class_total / gen.len() as f64,
            w1: w1(&pooled(&gen), &pooled(&reals))?,
        });
    }
    let all_gen: Vec<&Spectrogram> = generated.iter().collect();
    let all_real: Vec<&Spectrogram> = real.iter().collect();
    let frechet = match features {
        Some((fg, fr)) => Some(frechet_distance(fg, fr)?),
        None => None,
    };
    Ok(QualityReport {
        ssim_mean: ssim_total / generated.len() as f64,
        w1: w1(&pooled(&all_gen), &pooled(&all_real))?,
        w1_per_class_mean: per_class.iter().map(|c| c.w1).sum::<f64>() / per_class.len() as f64,
        frechet,
        n_pairs: generated.len(),
        pairing: PAIRING_SCHEME.to_string(),
        per_class,
    })
}
