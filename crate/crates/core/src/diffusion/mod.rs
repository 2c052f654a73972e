//! Conditional denoising diffusion over DFS spectrograms: noise schedules,
//! the ε-prediction network, training and classifier-free-guided ancestral
//! sampling.

mod model;
mod schedule;
pub mod toy;

use std::fs;
use std::path::{Path, PathBuf};

use gda_autodiff::rng::{derive_seed_indexed, stream, stream_indexed};
use gda_autodiff::{
    read_checkpoint, write_checkpoint, Adam, AdamConfig, AutodiffError, Checkpoint, Graph, ParamStore, Tensor,
};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use self::model::{timestep_embedding, CondIds, Denoiser, DenoiserConfig};
pub use self::schedule::{
    forward_diffuse_with, make_schedule, NoiseSchedule, ScheduleKind, COSINE_OFFSET, LINEAR_BETA_END,
    LINEAR_BETA_START, MAX_BETA,
};

use crate::csi::{ConditionLabel, Origin};
use crate::error::{Error, Result};
use crate::manifest::Vocab;
use crate::spectrogram::Spectrogram;

pub const DEFAULT_COND_DROP: f64 = 0.1;
pub const DEFAULT_GUIDANCE: f64 = 2.0;
/// Samples denoised together per network call.
pub const SAMPLE_BATCH: usize = 16;

/// Map `[0, 1]` pixels to the `[−1, 1]` diffusion range.
pub fn to_model_range(pixels: &[f32]) -> Vec<f64> {
    pixels.iter().map(|&p| 2.0 * p as f64 - 1.0).collect()
}

/// Inverse of [`to_model_range`], clamped to `[0, 1]`.
pub fn from_model_range(x: &[f64]) -> Vec<f32> {
    x.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0) as f32).collect()
}

/// Anything that predicts the noise in a batch `x_t: [B, 1, H, W]`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, ts: &[usize], cond: &[CondIds]) -> Result<Tensor>;
}

/// One training batch after forward noising.
#[derive(Clone, Debug)]
pub struct NoisedBatch {
    pub x_t: Tensor,
    pub ts: Vec<usize>,
    pub eps: Tensor,
    pub cond: Vec<CondIds>,
}

/// Draw `t ~ U{1..T}` and `ε ~ N(0, I)` per item, noise `x0` (already in
/// `[−1, 1]`) and replace each condition by the null token with probability
/// `cond_drop_prob`.
pub fn draw_noised_batch<R: Rng + ?Sized>(
    x0: &[&[f64]],
    cond: &[CondIds],
    (height, width): (usize, usize),
    schedule: &NoiseSchedule,
    cond_drop_prob: f64,
    rng: &mut R,
) -> Result<NoisedBatch> {
    if x0.is_empty() {
        return Err(Error::Empty("diffusion batch"));
    }
    if x0.len() != cond.len() {
        return Err(Error::invalid(format!(
            "{} images with {} conditions",
            x0.len(),
            cond.len()
        )));
    }
    let n = height * width;
    let mut xs = Vec::with_capacity(x0.len() * n);
    let mut eps_all = Vec::with_capacity(x0.len() * n);
    let mut ts = Vec::with_capacity(x0.len());
    let mut conds = Vec::with_capacity(x0.len());
    for (img, c) in x0.iter().zip(cond) {
        if img.len() != n {
            return Err(Error::invalid(format!("image has {} pixels, expected {n}", img.len())));
        }
        let t = rng.random_range(1..=schedule.steps());
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let dropped = rng.random::<f64>() < cond_drop_prob;
        xs.extend(schedule.forward_diffuse(img, t, &eps)?);
        eps_all.extend(eps);
        ts.push(t);
        conds.push(if dropped { CondIds::NULL } else { *c });
    }
    let shape = vec![x0.len(), 1, height, width];
    Ok(NoisedBatch {
        x_t: Tensor::new(shape.clone(), xs)?,
        ts,
        eps: Tensor::new(shape, eps_all)?,
        cond: conds,
    })
}

/// Mean squared error between true and predicted noise.
pub fn epsilon_loss(eps: &Tensor, predicted: &Tensor) -> Result<f64> {
    if eps.shape() != predicted.shape() {
        return Err(AutodiffError::shape("epsilon_loss", eps.shape(), predicted.shape()).into());
    }
    let sum: f64 = eps
        .data()
        .iter()
        .zip(predicted.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(sum / eps.numel() as f64)
}

/// Everything beyond the weights needed to rebuild a trained model; stored
/// as the checkpoint's JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSettings {
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub cond_drop_prob: f64,
    pub model: DenoiserConfig,
    pub vocab: Vocab,
    /// Doppler span of the spectrograms the model was trained on.
    pub f_max_hz: f64,
    /// Training-set pixel statistics; set by the first [`DiffusionModel::train`] call.
    pub data: DataStats,
}

/// Mean and standard deviation of training pixels in model range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for DataStats {
    fn default() -> Self {
        DataStats { mean: 0.0, std: 0.5 }
    }
}

/// Per-step scalings of the preconditioned noise predictor
/// `ε̂ = c_skip·u + c_out·F(c_in·u)` with `u = x_t − √ᾱ_t·mean`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning {
    pub shift: f64,
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
}

impl DataStats {
    pub fn estimate(data: &[TrainingExample]) -> Self {
        let n: usize = data.iter().map(|e| e.x0.len()).sum();
        if n == 0 {
            return DataStats::default();
        }
        let mean = data.iter().flat_map(|e| &e.x0).sum::<f64>() / n as f64;
        let var = data.iter().flat_map(|e| &e.x0).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        DataStats {
            mean,
            std: var.sqrt().max(1e-3),
        }
    }

    /// `c_skip·u` is the best linear estimate of ε from `u` when pixels are
    /// independent with these moments, and `c_out` is the standard deviation
    /// of its error, so `F` always targets a unit-variance residual. The
    /// implied `x_0` error is then `F`'s error times `std`, with no
    /// `1/√ᾱ_t` blow-up at high noise levels.
    pub fn preconditioning(&self, alpha_bar: f64) -> Preconditioning {
        let var = self.std * self.std;
        let d = alpha_bar * var + 1.0 - alpha_bar;
        Preconditioning {
            shift: alpha_bar.sqrt() * self.mean,
            c_in: 1.0 / d.sqrt(),
            c_skip: (1.0 - alpha_bar).sqrt() / d,
            c_out: (alpha_bar * var / d).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            seed: crate::DEFAULT_SEED,
        }
    }
}

/// A training image in `[−1, 1]` with its condition.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub x0: Vec<f64>,
    pub cond: CondIds,
}

impl TrainingExample {
    pub fn from_spectrogram(s: &Spectrogram) -> Self {
        TrainingExample {
            x0: to_model_range(s.pixels()),
            cond: CondIds::from_label(&s.condition),
        }
    }
}

pub struct DiffusionModel {
    pub settings: DiffusionSettings,
    pub denoiser: Denoiser,
    pub params: ParamStore,
    pub schedule: NoiseSchedule,
    pub seed: u64,
    pub trained_steps: u64,
    optimizer: Option<Adam>,
}

impl DiffusionModel {
    pub fn new(settings: DiffusionSettings, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&settings.cond_drop_prob) {
            return Err(Error::invalid(format!(
                "cond_drop_prob {} outside [0, 1]",
                settings.cond_drop_prob
            )));
        }
        let denoiser = Denoiser::new(settings.model, settings.vocab)?;
        let schedule = make_schedule(settings.schedule, settings.steps)?;
        let params = denoiser.init_params(seed);
        Ok(DiffusionModel {
            settings,
            denoiser,
            params,
            schedule,
            seed,
            trained_steps: 0,
            optimizer: None,
        })
    }

    /// Graph node for ε̂ given `x_t: [B, 1, H, W]`; see [`Preconditioning`].
    fn epsilon_graph(&self, g: &mut Graph, x_t: &Tensor, ts: &[usize], cond: &[CondIds]) -> Result<gda_autodiff::Var> {
        let b = ts.len();
        if b == 0 || !x_t.numel().is_multiple_of(b) {
            return Err(Error::invalid(format!("{} steps for input {:?}", b, x_t.shape())));
        }
        if let Some(t) = ts.iter().find(|&&t| t == 0 || t > self.schedule.steps()) {
            return Err(Error::invalid(format!(
                "diffusion step {t} outside [1, {}]",
                self.schedule.steps()
            )));
        }
        let n = x_t.numel() / b;
        let (mut scaled, mut skip, mut out) = (
            Vec::with_capacity(b * n),
            Vec::with_capacity(b * n),
            Vec::with_capacity(b),
        );
        for (i, &t) in ts.iter().enumerate() {
            let p = self.settings.data.preconditioning(self.schedule.alpha_bar(t));
            for &v in &x_t.data()[i * n..(i + 1) * n] {
                let u = v - p.shift;
                scaled.push(p.c_in * u);
                skip.push(p.c_skip * u);
            }
            out.push(p.c_out);
        }
        let x = g.input(Tensor::new(x_t.shape().to_vec(), scaled)?);
        let f = self.denoiser.forward(g, &self.params, x, ts, cond)?;
        let c_out = g.input(Tensor::new(vec![b, 1, 1, 1], out)?);
        let f = g.mul_broadcast(f, c_out)?;
        let skip = g.input(Tensor::new(x_t.shape().to_vec(), skip)?);
        Ok(g.add(f, skip)?)
    }

    fn image_shape(&self) -> (usize, usize) {
        (self.settings.model.height, self.settings.model.width)
    }

    /// One ε-MSE gradient step on `batch` with an Adam update; returns the
    /// batch loss.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[&TrainingExample], lr: f64, rng: &mut R) -> Result<f64> {
        let x0: Vec<&[f64]> = batch.iter().map(|e| e.x0.as_slice()).collect();
        let cond: Vec<CondIds> = batch.iter().map(|e| e.cond).collect();
        let nb = draw_noised_batch(
            &x0,
            &cond,
            self.image_shape(),
            &self.schedule,
            self.settings.cond_drop_prob,
            rng,
        )?;
        let step = self.trained_steps + 1;
        let diagnose = |nb: &NoisedBatch| Error::NonFiniteLoss {
            step,
            mean_abs_input: nb.x_t.data().iter().map(|v| v.abs()).sum::<f64>() / nb.x_t.numel() as f64,
        };
        let mut g = Graph::new();
        let pred = match self.epsilon_graph(&mut g, &nb.x_t, &nb.ts, &nb.cond) {
            Err(Error::Autodiff(AutodiffError::NonFinite { .. })) => return Err(diagnose(&nb)),
            other => other?,
        };
        let loss = g.mse_loss(pred, &nb.eps)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(diagnose(&nb));
        }
        g.backward(loss)?;
        let grads = g.param_grads();
        let opt = self.optimizer.get_or_insert_with(|| {
            Adam::new(AdamConfig {
                lr,
                ..AdamConfig::default()
            })
        });
        opt.step(&mut self.params, &grads)?;
        self.trained_steps = step;
        Ok(value)
    }

    /// Run `cfg.steps` training steps, drawing batch members uniformly (with
    /// replacement) from a per-step RNG stream. Returns the loss per step.
    pub fn train(&mut self, data: &[TrainingExample], cfg: &TrainConfig) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Empty("diffusion training set"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.trained_steps == 0 {
            self.settings.data = DataStats::estimate(data);
        }
        let mut history = Vec::with_capacity(cfg.steps as usize);
        for _ in 0..cfg.steps {
            let mut rng = stream_indexed(cfg.seed, "diffusion/train", &[self.trained_steps]);
            let batch: Vec<&TrainingExample> = (0..cfg.batch_size)
                .map(|_| &data[rng.random_range(0..data.len())])
                .collect();
            history.push(self.train_step(&batch, cfg.lr, &mut rng)?);
        }
        Ok(history)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            seed: self.seed,
            step: self.trained_steps,
            params: self.params.clone(),
        }
    }

    /// Write the `GDAM` weights to `path` and the settings to
    /// [`sidecar_path`]`(path)`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.checkpoint())?;
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&self.settings)?;
        fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let settings: DiffusionSettings = serde_json::from_str(&text)?;
        let ckpt = read_checkpoint(path)?;
        let mut model = DiffusionModel::new(settings, ckpt.seed)?;
        model.denoiser.check_params(&ckpt.params)?;
        model.params = ckpt.params;
        model.trained_steps = ckpt.step;
        Ok(model)
    }

    /// Guided ancestral sampling; see [`SamplerConfig`].
    pub fn sample(&self, cfg: &SamplerConfig) -> Result<Vec<Spectrogram>> {
        if cfg.n_samples == 0 {
            return Err(Error::invalid("n_samples must be at least 1"));
        }
        let requests: Vec<SampleRequest> = (0..cfg.n_samples)
            .map(|i| SampleRequest {
                condition: cfg.condition,
                seed: derive_seed_indexed(cfg.seed, "diffusion/sample", &[i as u64]),
            })
            .collect();
        self.sample_requests(&requests, cfg.guidance_weight)
    }

    /// Sample one spectrogram per request, each driven only by its own seed.
    pub fn sample_requests(&self, requests: &[SampleRequest], guidance_weight: f64) -> Result<Vec<Spectrogram>> {
        if self.trained_steps == 0 {
            return Err(Error::UntrainedModel);
        }
        for r in requests {
            self.settings.vocab.check(&r.condition)?;
        }
        let (h, w) = self.image_shape();
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(SAMPLE_BATCH) {
            let conds: Vec<CondIds> = chunk.iter().map(|r| CondIds::from_label(&r.condition)).collect();
            let seeds: Vec<u64> = chunk.iter().map(|r| r.seed).collect();
            let images = ancestral_sample(self, &self.schedule, (h, w), &conds, &seeds, guidance_weight)?;
            for (img, r) in images.iter().zip(chunk) {
                out.push(Spectrogram::new(
                    h,
                    w,
                    from_model_range(img),
                    self.settings.f_max_hz,
                    r.condition,
                    Origin::Synthetic,
                )?);
            }
        }
        Ok(out)
    }
}

impl NoisePredictor for DiffusionModel {
    fn predict(&self, x_t: &Tensor, ts: &[usize], cond: &[CondIds]) -> Result<Tensor> {
        let mut g = Graph::new();
        let y = self.epsilon_graph(&mut g, x_t, ts, cond)?;
        Ok(g.value(y).clone())
    }
}

/// `<path>.json`, next to the weights file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub guidance_weight: f64,
    pub seed: u64,
    pub n_samples: usize,
    pub condition: ConditionLabel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRequest {
    pub condition: ConditionLabel,
    pub seed: u64,
}

/// Guided noise estimate `ε_null + w·(ε_cond − ε_null)`. With `w = 1` only
/// the conditional branch is evaluated and with `w = 0` only the null one.
pub fn guided_epsilon(
    predictor: &dyn NoisePredictor,
    x_t: &Tensor,
    ts: &[usize],
    cond: &[CondIds],
    w: f64,
) -> Result<Tensor> {
    if w == 1.0 {
        return predictor.predict(x_t, ts, cond);
    }
    let null = vec![CondIds::NULL; cond.len()];
    if w == 0.0 {
        return predictor.predict(x_t, ts, &null);
    }
    // Both branches in one doubled batch: conditional rows first.
    let b = cond.len();
    let mut shape = x_t.shape().to_vec();
    shape[0] = 2 * b;
    let mut data = x_t.data().to_vec();
    data.extend_from_slice(x_t.data());
    let doubled = Tensor::new(shape, data)?;
    let mut ts2 = ts.to_vec();
    ts2.extend_from_slice(ts);
    let mut cond2 = cond.to_vec();
    cond2.extend(null);
    let both = predictor.predict(&doubled, &ts2, &cond2)?;
    let half = x_t.numel();
    let (ec, en) = both.data().split_at(half);
    let guided = en.iter().zip(ec).map(|(n, c)| n + w * (c - n)).collect();
    Ok(Tensor::new(x_t.shape().to_vec(), guided)?)
}

/// DDPM ancestral sampling from `x_T ~ N(0, I)`. Each image draws all its
/// noise from `stream(seed, "diffusion/ancestral")`, so results do not
/// depend on which other images share the batch. The predicted `x_0` is
/// clipped to `[−1, 1]` before forming the posterior mean.
pub fn ancestral_sample(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    (height, width): (usize, usize),
    cond: &[CondIds],
    seeds: &[u64],
    guidance_weight: f64,
) -> Result<Vec<Vec<f64>>> {
    if !(guidance_weight >= 0.0 && guidance_weight.is_finite()) {
        return Err(Error::invalid(format!("guidance weight {guidance_weight} must be ≥ 0")));
    }
    if cond.len() != seeds.len() || cond.is_empty() {
        return Err(Error::invalid("need one seed per condition and at least one sample"));
    }
    let n = height * width;
    let b = cond.len();
    let mut rngs: Vec<_> = seeds.iter().map(|&s| stream(s, "diffusion/ancestral")).collect();
    let mut x: Vec<f64> = Vec::with_capacity(b * n);
    for r in &mut rngs {
        x.extend((0..n).map(|_| r.sample::<f64, _>(StandardNormal)));
    }
    for t in (1..=schedule.steps()).rev() {
        let x_t = Tensor::new(vec![b, 1, height, width], x.clone())?;
        let eps = guided_epsilon(predictor, &x_t, &vec![t; b], cond, guidance_weight)?;
        let ab = schedule.alpha_bar(t);
        let (c0, ct) = schedule.posterior_mean_coefs(t);
        let sigma = schedule.posterior_variance(t).sqrt();
        for (i, r) in rngs.iter_mut().enumerate() {
            for j in i * n..(i + 1) * n {
                let x0 = ((x[j] - (1.0 - ab).sqrt() * eps.data()[j]) / ab.sqrt()).clamp(-1.0, 1.0);
                let mean = c0 * x0 + ct * x[j];
                x[j] = if t > 1 {
                    mean + sigma * r.sample::<f64, _>(StandardNormal)
                } else {
                    mean
                };
            }
        }
    }
    Ok(x.chunks(n).map(<[f64]>::to_vec).collect())
}
