use std::cell::Cell;

use gda_autodiff::rng::stream;
use gda_autodiff::Tensor;
use gda_core::csi::ConditionLabel;
use gda_core::diffusion::toy::{mass_side, run_toy, toy_image, ToyConfig, TOY_SIZE};
use gda_core::diffusion::{
    draw_noised_batch, epsilon_loss, guided_epsilon, make_schedule, to_model_range, CondIds, DataStats, DenoiserConfig,
    DiffusionModel, DiffusionSettings, NoisePredictor, SampleRequest, SamplerConfig, ScheduleKind, TrainConfig,
    TrainingExample,
};
use gda_core::manifest::Vocab;
use gda_core::{Error, Result};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn settings(size: usize, kind: ScheduleKind, steps: usize) -> DiffusionSettings {
    DiffusionSettings {
        schedule: kind,
        steps,
        cond_drop_prob: 0.1,
        model: DenoiserConfig {
            height: size,
            width: size,
            base_channels: 4,
            emb_dim: 16,
        },
        vocab: Vocab::default(),
        f_max_hz: 100.0,
        data: DataStats::default(),
    }
}

fn label(gesture: u16) -> ConditionLabel {
    ConditionLabel {
        gesture,
        location: 1,
        orientation: 2,
        user: 0,
        room: 0,
    }
}

fn example(size: usize, gesture: u16) -> TrainingExample {
    let pixels: Vec<f32> = (0..size * size)
        .map(|i| ((i * 7 + gesture as usize) % 11) as f32 / 10.0)
        .collect();
    TrainingExample {
        x0: to_model_range(&pixels),
        cond: CondIds::from_label(&label(gesture)),
    }
}

fn trained(size: usize, kind: ScheduleKind, steps: usize, train_steps: u64) -> DiffusionModel {
    let mut m = DiffusionModel::new(settings(size, kind, steps), 7).unwrap();
    let data = vec![example(size, 0), example(size, 3)];
    let cfg = TrainConfig {
        steps: train_steps,
        batch_size: 2,
        lr: 1e-3,
        seed: 7,
    };
    m.train(&data, &cfg).unwrap();
    m
}

/// Independent linear-schedule ᾱ_t straight from the interpolation formula.
fn linear_alpha_bar(t: usize, steps: usize) -> f64 {
    (1..=t)
        .map(|s| {
            let beta = if steps == 1 {
                1e-4
            } else {
                1e-4 + (0.02 - 1e-4) * (s - 1) as f64 / (steps - 1) as f64
            };
            1.0 - beta
        })
        .product()
}

#[test]
fn linear_schedule_midpoint_beta() {
    let s = make_schedule(ScheduleKind::Linear, 1000).unwrap();
    let expected = 1e-4 + (0.02 - 1e-4) * (499.0 / 999.0);
    assert!((s.beta(500) - expected).abs() < 1e-15);
    // The formula evaluates to 0.0100400; the commonly quoted 0.010045 is a rounding.
    assert!((s.beta(500) - 0.010045).abs() < 1e-5);
    assert!((s.beta(1) - 1e-4).abs() < 1e-18);
    assert!((s.beta(1000) - 0.02).abs() < 1e-15);
}

#[test]
fn linear_schedule_terminal_alpha_bar_is_tiny() {
    let s = make_schedule(ScheduleKind::Linear, 1000).unwrap();
    assert!(s.alpha_bar(1000) < 1e-4);
    let oracle = linear_alpha_bar(1000, 1000);
    assert!((s.alpha_bar(1000) - oracle).abs() <= 1e-12 * oracle.max(1e-300) + 1e-18);
}

#[test]
fn single_step_schedule() {
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let s = make_schedule(kind, 1).unwrap();
        assert_eq!(s.steps(), 1);
        assert!((s.alpha_bar(1) - (1.0 - s.beta(1))).abs() < 1e-15);
    }
    assert!(make_schedule(ScheduleKind::Linear, 0).is_err());
    assert!(make_schedule(ScheduleKind::Cosine, 0).is_err());
}

#[test]
fn cosine_schedule_matches_squared_cosine_profile() {
    let steps = 50;
    let s = make_schedule(ScheduleKind::Cosine, steps).unwrap();
    let f = |t: f64| {
        (((t / steps as f64) + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2)
    };
    for t in 1..steps {
        let beta = 1.0 - f(t as f64) / f((t - 1) as f64);
        if beta < 0.999 {
            assert!((s.beta(t) - beta).abs() < 1e-12, "t={t}");
        }
    }
    assert!(s.betas().iter().all(|&b| b <= 0.999));
}

proptest! {
    #[test]
    fn alpha_bar_strictly_decreasing(steps in 2usize..1500, cosine in any::<bool>()) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let s = make_schedule(kind, steps).unwrap();
        for t in 1..=steps {
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        prop_assert!(s.alpha_bar(steps) < s.alpha_bar(1));
    }
}

#[test]
fn forward_diffuse_degenerate_cases() {
    let s = make_schedule(ScheduleKind::Linear, 50).unwrap();
    let x0 = vec![0.3, -0.7, 1.0];
    let eps = vec![0.5, 1.5, -2.0];
    let zero = vec![0.0; 3];
    let from_zero = s.forward_diffuse(&zero, 10, &eps).unwrap();
    let k = (1.0 - s.alpha_bar(10)).sqrt();
    for (a, e) in from_zero.iter().zip(&eps) {
        assert!((a - k * e).abs() < 1e-15);
    }
    assert_eq!(gda_core::diffusion::forward_diffuse_with(1.0, &x0, &eps).unwrap(), x0);
    assert!(s.forward_diffuse(&x0, 0, &eps).is_err());
    assert!(s.forward_diffuse(&x0, 51, &eps).is_err());
    assert!(s.forward_diffuse(&x0, 5, &eps[..2]).is_err());
}

#[test]
fn forward_diffuse_monte_carlo_moments() {
    let steps = 50;
    let s = make_schedule(ScheduleKind::Linear, steps).unwrap();
    let draws = 10_000;
    let x0 = vec![0.8; draws];
    let mut rng = stream(42, "test/forward-moments");
    for t in [1, steps / 4, steps / 2, steps] {
        let eps: Vec<f64> = (0..draws).map(|_| rng.sample(StandardNormal)).collect();
        let xt = s.forward_diffuse(&x0, t, &eps).unwrap();
        let mean = xt.iter().sum::<f64>() / draws as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let ab = linear_alpha_bar(t, steps);
        let (m_ref, v_ref) = (ab.sqrt() * 0.8, 1.0 - ab);
        assert!(((mean - m_ref) / m_ref).abs() < 0.05, "t={t} mean {mean} vs {m_ref}");
        assert!(((var - v_ref) / v_ref).abs() < 0.05, "t={t} var {var} vs {v_ref}");
    }
}

#[test]
fn epsilon_loss_oracle_and_zero_predictor() {
    let s = make_schedule(ScheduleKind::Linear, 1000).unwrap();
    let imgs: Vec<Vec<f64>> = (0..4).map(|g| example(64, g).x0).collect();
    let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
    let conds = vec![CondIds::from_label(&label(0)); 4];
    let mut rng = stream(42, "test/loss");
    let nb = draw_noised_batch(&refs, &conds, (64, 64), &s, 0.1, &mut rng).unwrap();
    assert_eq!(epsilon_loss(&nb.eps, &nb.eps).unwrap(), 0.0);
    let zero = Tensor::zeros(nb.eps.shape());
    let loss = epsilon_loss(&nb.eps, &zero).unwrap();
    assert!(nb.eps.numel() >= 10_000);
    assert!((loss - 1.0).abs() < 0.05, "zero predictor loss {loss}");
    assert!(nb.ts.iter().all(|&t| (1..=1000).contains(&t)));
}

#[test]
fn condition_dropout_rate() {
    let s = make_schedule(ScheduleKind::Linear, 10).unwrap();
    let img = vec![0.0; 4];
    let refs: Vec<&[f64]> = vec![img.as_slice(); 4000];
    let conds = vec![CondIds::from_label(&label(1)); 4000];
    let mut rng = stream(42, "test/drop");
    let nb = draw_noised_batch(&refs, &conds, (2, 2), &s, 0.1, &mut rng).unwrap();
    let dropped = nb.cond.iter().filter(|c| c.is_null()).count() as f64 / 4000.0;
    assert!((dropped - 0.1).abs() < 0.02, "dropped {dropped}");
    let none = draw_noised_batch(&refs, &conds, (2, 2), &s, 0.0, &mut rng).unwrap();
    assert!(none.cond.iter().all(|c| !c.is_null()));
    assert!(matches!(
        draw_noised_batch(&[], &[], (2, 2), &s, 0.1, &mut rng),
        Err(Error::Empty(_))
    ));
}

#[test]
fn fresh_model_predicts_the_linear_noise_estimate() {
    // The output convolution starts at zero, so only the skip term remains:
    // ε̂ = √(1−ᾱ)·(x − √ᾱ·μ) / (ᾱσ² + 1 − ᾱ).
    let mut s = settings(16, ScheduleKind::Linear, 100);
    s.data = DataStats { mean: -0.5, std: 0.3 };
    let m = DiffusionModel::new(s, 3).unwrap();
    let mut rng = stream(1, "test/fresh");
    let x = Tensor::randn(&[3, 1, 16, 16], &mut rng);
    let ts = [1, 50, 100];
    let cond = vec![CondIds::from_label(&label(1)); 3];
    let pred = m.predict(&x, &ts, &cond).unwrap();
    for (i, &t) in ts.iter().enumerate() {
        let ab = linear_alpha_bar(t, 100);
        let d = ab * 0.09 + 1.0 - ab;
        for j in i * 256..(i + 1) * 256 {
            let want = (1.0 - ab).sqrt() * (x.data()[j] + 0.5 * ab.sqrt()) / d;
            assert!((pred.data()[j] - want).abs() < 1e-12);
        }
    }
    assert!(m.predict(&x, &[0, 1, 2], &cond).is_err());
    assert!(m.predict(&x, &[1, 2, 101], &cond).is_err());
}

#[test]
fn fresh_model_loss_is_the_gaussian_residual() {
    // For i.i.d. N(μ, σ²) pixels the skip term is the exact MMSE estimate,
    // whose error is ᾱσ² / (ᾱσ² + 1 − ᾱ).
    let (mean, std) = (-0.6, 0.4);
    let mut s = settings(64, ScheduleKind::Linear, 100);
    s.data = DataStats { mean, std };
    let m = DiffusionModel::new(s, 3).unwrap();
    let mut rng = stream(2, "test/residual");
    for t in [10, 60, 100] {
        let ab = linear_alpha_bar(t, 100);
        let n = 4 * 64 * 64;
        let x0: Vec<f64> = (0..n)
            .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let xt: Vec<f64> = x0
            .iter()
            .zip(&eps)
            .map(|(a, e)| ab.sqrt() * a + (1.0 - ab).sqrt() * e)
            .collect();
        let pred = m
            .predict(
                &Tensor::new(vec![4, 1, 64, 64], xt).unwrap(),
                &[t; 4],
                &[CondIds::from_label(&label(0)); 4],
            )
            .unwrap();
        let loss = epsilon_loss(&Tensor::new(vec![4, 1, 64, 64], eps).unwrap(), &pred).unwrap();
        let want = ab * std * std / (ab * std * std + 1.0 - ab);
        assert!(((loss - want) / want).abs() < 0.05, "t={t}: {loss} vs {want}");
    }
}

#[test]
fn data_stats_are_estimated_on_first_training() {
    let data = vec![
        TrainingExample {
            x0: vec![-1.0; 64],
            cond: CondIds::from_label(&label(0)),
        },
        TrainingExample {
            x0: vec![0.0; 64],
            cond: CondIds::from_label(&label(1)),
        },
    ];
    assert_eq!(DataStats::estimate(&data), DataStats { mean: -0.5, std: 0.5 });
    let mut m = DiffusionModel::new(settings(8, ScheduleKind::Linear, 10), 1).unwrap();
    assert_eq!(m.settings.data, DataStats::default());
    let cfg = TrainConfig {
        steps: 1,
        batch_size: 2,
        lr: 1e-3,
        seed: 1,
    };
    m.train(&data, &cfg).unwrap();
    assert_eq!(m.settings.data, DataStats { mean: -0.5, std: 0.5 });
    // Later calls keep the statistics the weights were trained with.
    m.train(&data[..1], &cfg).unwrap();
    assert_eq!(m.settings.data.mean, -0.5);
}

fn fixed_eval_loss(m: &DiffusionModel, data: &TrainingExample) -> f64 {
    let imgs = vec![data.x0.as_slice(); 64];
    let conds = vec![data.cond; 64];
    let mut rng = stream(99, "test/eval");
    let nb = draw_noised_batch(&imgs, &conds, (8, 8), &m.schedule, 0.0, &mut rng).unwrap();
    let pred = m.predict(&nb.x_t, &nb.ts, &nb.cond).unwrap();
    epsilon_loss(&nb.eps, &pred).unwrap()
}

#[test]
fn training_reduces_loss_on_single_image() {
    let mut m = DiffusionModel::new(settings(8, ScheduleKind::Linear, 100), 5).unwrap();
    let data = vec![example(8, 2)];
    let before = fixed_eval_loss(&m, &data[0]);
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 8,
        lr: 1e-3,
        seed: 5,
    };
    let history = m.train(&data, &cfg).unwrap();
    assert_eq!(history.len(), 200);
    assert_eq!(m.trained_steps, 200);
    let after = fixed_eval_loss(&m, &data[0]);
    assert!(after < before, "loss {before} -> {after}");
}

#[test]
fn nan_input_aborts_with_diagnostics() {
    let mut m = DiffusionModel::new(settings(8, ScheduleKind::Linear, 10), 5).unwrap();
    let mut bad = example(8, 0);
    bad.x0[3] = f64::NAN;
    let mut rng = stream(1, "test/nan");
    let err = m.train_step(&[&bad], 1e-3, &mut rng).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 1, .. }), "{err}");
    assert_eq!(m.trained_steps, 0);
}

/// Predicts a constant that depends only on whether the condition is null.
struct TwoLevel {
    calls: Cell<usize>,
}

impl NoisePredictor for TwoLevel {
    fn predict(&self, x_t: &Tensor, _ts: &[usize], cond: &[CondIds]) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        let per = x_t.numel() / cond.len();
        let data = cond
            .iter()
            .flat_map(|c| std::iter::repeat_n(if c.is_null() { -1.0 } else { 3.0 }, per))
            .collect();
        Ok(Tensor::new(x_t.shape().to_vec(), data)?)
    }
}

#[test]
fn guidance_formula_and_unit_weight_identity() {
    let p = TwoLevel { calls: Cell::new(0) };
    let x = Tensor::zeros(&[2, 1, 2, 2]);
    let cond = vec![CondIds::from_label(&label(1)); 2];
    let one = guided_epsilon(&p, &x, &[3, 3], &cond, 1.0).unwrap();
    assert!(one.data().iter().all(|&v| v == 3.0));
    assert_eq!(p.calls.get(), 1);
    let zero = guided_epsilon(&p, &x, &[3, 3], &cond, 0.0).unwrap();
    assert!(zero.data().iter().all(|&v| v == -1.0));
    let two = guided_epsilon(&p, &x, &[3, 3], &cond, 2.0).unwrap();
    assert!(two.data().iter().all(|&v| v == -1.0 + 2.0 * (3.0 + 1.0)));
    assert_eq!(two.shape(), x.shape());
}

#[test]
fn trained_model_unit_guidance_equals_conditional_prediction() {
    let m = trained(8, ScheduleKind::Linear, 20, 3);
    let x = Tensor::new(vec![1, 1, 8, 8], (0..64).map(|i| (i as f64 / 32.0) - 1.0).collect()).unwrap();
    let cond = [CondIds::from_label(&label(3))];
    let direct = m.predict(&x, &[7], &cond).unwrap();
    assert_eq!(guided_epsilon(&m, &x, &[7], &cond, 1.0).unwrap(), direct);
    // The doubled-batch path reproduces w = 1 up to rounding.
    let near = guided_epsilon(&m, &x, &[7], &cond, 1.0 + 1e-12).unwrap();
    for (a, b) in near.data().iter().zip(direct.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn sample_contract_and_determinism() {
    let m = trained(64, ScheduleKind::Cosine, 4, 1);
    let cfg = SamplerConfig {
        guidance_weight: 2.0,
        seed: 42,
        n_samples: 4,
        condition: label(3),
    };
    let a = m.sample(&cfg).unwrap();
    assert_eq!(a.len(), 4);
    for s in &a {
        assert_eq!(s.shape(), (64, 64));
        assert!(s.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(s.condition, label(3));
        assert_eq!(s.origin, gda_core::csi::Origin::Synthetic);
    }
    let b = m.sample(&cfg).unwrap();
    assert_eq!(a, b);
    let c = m
        .sample(&SamplerConfig {
            seed: 43,
            ..cfg.clone()
        })
        .unwrap();
    assert_ne!(a[0].pixels(), c[0].pixels());
}

#[test]
fn samples_do_not_depend_on_batch_companions() {
    let m = trained(8, ScheduleKind::Linear, 10, 2);
    let r = |g: u16, seed: u64| SampleRequest {
        condition: label(g),
        seed,
    };
    let alone = m.sample_requests(&[r(1, 11)], 2.0).unwrap();
    let together = m.sample_requests(&[r(4, 12), r(1, 11), r(0, 13)], 2.0).unwrap();
    assert_eq!(alone[0], together[1]);
}

#[test]
fn single_step_sampling_terminates() {
    let m = trained(8, ScheduleKind::Linear, 1, 2);
    let cfg = SamplerConfig {
        guidance_weight: 2.0,
        seed: 1,
        n_samples: 2,
        condition: label(0),
    };
    let out = m.sample(&cfg).unwrap();
    assert_eq!(out.len(), 2);
    assert!(out.iter().all(|s| s.pixels().iter().all(|p| p.is_finite())));
}

#[test]
fn sampling_rejects_untrained_and_invalid_requests() {
    let fresh = DiffusionModel::new(settings(8, ScheduleKind::Linear, 5), 1).unwrap();
    let cfg = SamplerConfig {
        guidance_weight: 2.0,
        seed: 1,
        n_samples: 1,
        condition: label(0),
    };
    assert!(matches!(fresh.sample(&cfg), Err(Error::UntrainedModel)));
    let m = trained(8, ScheduleKind::Linear, 5, 1);
    let bad = SamplerConfig {
        condition: label(6),
        ..cfg.clone()
    };
    assert!(matches!(
        m.sample(&bad),
        Err(Error::InvalidCondition { field: "gesture", .. })
    ));
    assert!(m
        .sample(&SamplerConfig {
            n_samples: 0,
            ..cfg.clone()
        })
        .is_err());
    assert!(m
        .sample(&SamplerConfig {
            guidance_weight: -1.0,
            ..cfg
        })
        .is_err());
}

#[test]
fn checkpoint_round_trip_and_training_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = trained(8, ScheduleKind::Cosine, 10, 3);
    let b = trained(8, ScheduleKind::Cosine, 10, 3);
    assert_eq!(a.params, b.params);
    let (pa, pb) = (dir.path().join("a.gdam"), dir.path().join("b.gdam"));
    a.save(&pa).unwrap();
    b.save(&pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    let loaded = DiffusionModel::load(&pa).unwrap();
    assert_eq!(loaded.params, a.params);
    assert_eq!(loaded.settings, a.settings);
    assert_eq!(loaded.trained_steps, 3);
    let cfg = SamplerConfig {
        guidance_weight: 2.0,
        seed: 9,
        n_samples: 2,
        condition: label(2),
    };
    assert_eq!(loaded.sample(&cfg).unwrap(), a.sample(&cfg).unwrap());
    let side = std::fs::read_to_string(gda_core::diffusion::sidecar_path(&pa)).unwrap();
    assert!(side.contains("\"cosine\"") && side.contains("cond_drop_prob"));
}

#[test]
fn toy_side_classifier_oracle() {
    assert_eq!(mass_side(&toy_image(0), TOY_SIZE), 0);
    assert_eq!(mass_side(&toy_image(1), TOY_SIZE), 1);
}

#[test]
fn toy_conditional_fidelity() {
    let out = run_toy(&ToyConfig::default()).unwrap();
    assert_eq!(out.total, 200);
    assert!(out.fraction() >= 0.9, "{} / {}", out.consistent, out.total);
}
