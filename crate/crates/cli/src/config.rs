//! Run configuration: a JSON file whose every key is optional, plus flag
//! overrides. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use gda_core::augment::{check_ratio, Method, ALLOWED_RATIOS};
use gda_core::classifier::{Arch, ClassifierConfig};
use gda_core::csi::{ConditionLabel, CorpusConfig, CsiDims};
use gda_core::diffusion::{
    DataStats, DenoiserConfig, DiffusionSettings, ScheduleKind, TrainConfig, DEFAULT_COND_DROP, DEFAULT_GUIDANCE,
};
use gda_core::dsp::StftParams;
use gda_core::manifest::Vocab;
use gda_core::DEFAULT_SEED;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every seeded stage derives its randomness from it.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub stft: StftParams,
    pub spectrogram: SpectrogramSection,
    pub split: SplitSection,
    pub diffusion: DiffusionSection,
    pub classifier: ClassifierSection,
    pub augment: AugmentSection,
    pub sample: SampleSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            corpus: CorpusSection::default(),
            stft: StftParams::default(),
            spectrogram: SpectrogramSection::default(),
            split: SplitSection::default(),
            diffusion: DiffusionSection::default(),
            classifier: ClassifierSection::default(),
            augment: AugmentSection::default(),
            sample: SampleSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub recordings_per_gesture: usize,
    pub sample_rate_hz: f64,
    pub dims: CsiDims,
    pub vocab: Vocab,
    pub f0_hz: f64,
    pub a_static: f64,
    pub a_dyn: f64,
    pub noise_sigma: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        CorpusSection {
            recordings_per_gesture: c.recordings_per_gesture,
            sample_rate_hz: c.sample_rate_hz,
            dims: c.dims,
            vocab: c.vocab,
            f0_hz: c.f0_hz,
            a_static: c.a_static,
            a_dyn: c.a_dyn,
            noise_sigma: c.noise_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrogramSection {
    pub freq_bins: usize,
    pub frames: usize,
}

impl Default for SpectrogramSection {
    fn default() -> Self {
        SpectrogramSection {
            freq_bins: 64,
            frames: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train_fraction: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub cond_drop_prob: f64,
    pub model: DenoiserConfig,
    pub train_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub guidance_weight: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        DiffusionSection {
            schedule: ScheduleKind::Cosine,
            steps: 50,
            cond_drop_prob: DEFAULT_COND_DROP,
            model: DenoiserConfig::default(),
            train_steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            guidance_weight: DEFAULT_GUIDANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub arch: Arch,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        ClassifierSection {
            arch: c.arch,
            lr: c.lr,
            batch_size: c.batch_size,
            epochs: c.epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub method: Method,
    pub ratio_percent: u32,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            method: Method::Crop,
            ratio_percent: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub n: usize,
    pub condition: ConditionLabel,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            n: 10,
            condition: ConditionLabel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub ratios: Vec<u32>,
    pub methods: Vec<Method>,
    pub models: Vec<Arch>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            ratios: ALLOWED_RATIOS.to_vec(),
            methods: vec![Method::Generative, Method::Crop],
            models: vec![Arch::ResnetLite],
        }
    }
}

/// Flag values that override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ratios: Option<String>,
    pub methods: Option<String>,
    pub model: Option<String>,
    pub n: Option<usize>,
    pub gesture: Option<u16>,
    pub method: Option<String>,
    pub ratio: Option<u32>,
}

impl RunConfig {
    /// Defaults, then the file (if any), then the flags; validated.
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(r) = &o.ratios {
            cfg.sweep.ratios = parse_list(r, |s| s.parse::<u32>().map_err(|e| format!("ratio {s:?}: {e}")))?;
        }
        if let Some(m) = &o.methods {
            cfg.sweep.methods = parse_list(m, |s| s.parse::<Method>().map_err(|e| e.to_string()))?;
        }
        if let Some(m) = &o.model {
            let arch: Arch = m
                .parse()
                .map_err(|e: gda_core::Error| CliError::Config(e.to_string()))?;
            cfg.sweep.models = vec![arch];
            cfg.classifier.arch = arch;
        }
        if let Some(n) = o.n {
            cfg.sample.n = n;
        }
        if let Some(g) = o.gesture {
            cfg.sample.condition.gesture = g;
        }
        if let Some(m) = &o.method {
            cfg.augment.method = m
                .parse()
                .map_err(|e: gda_core::Error| CliError::Config(e.to_string()))?;
        }
        if let Some(r) = o.ratio {
            cfg.augment.ratio_percent = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |e: gda_core::Error| CliError::Config(e.to_string());
        self.corpus_config().validate().map_err(bad)?;
        self.stft.validate().map_err(bad)?;
        self.classifier_config(self.classifier.arch).validate().map_err(bad)?;
        self.diffusion.model.validate().map_err(bad)?;
        let s = &self.spectrogram;
        if s.freq_bins < 2 || s.frames < 2 {
            return Err(CliError::Config("spectrogram needs at least 2×2 pixels".into()));
        }
        if (s.freq_bins, s.frames) != (self.diffusion.model.height, self.diffusion.model.width) {
            return Err(CliError::Config(format!(
                "spectrogram shape {}×{} differs from the denoiser's {}×{}",
                s.freq_bins, s.frames, self.diffusion.model.height, self.diffusion.model.width
            )));
        }
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Config(format!("train_fraction {f} must lie in (0, 1)")));
        }
        let d = &self.diffusion;
        if d.steps == 0 || d.train_steps == 0 || d.batch_size == 0 {
            return Err(CliError::Config(
                "diffusion steps, train_steps and batch_size must be ≥ 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&d.cond_drop_prob) || !(d.lr > 0.0) || !(d.guidance_weight >= 0.0) {
            return Err(CliError::Config(
                "diffusion cond_drop_prob, lr or guidance_weight out of range".into(),
            ));
        }
        check_ratio(self.augment.ratio_percent).map_err(bad)?;
        for &r in &self.sweep.ratios {
            check_ratio(r).map_err(bad)?;
        }
        if self.sweep.ratios.is_empty() || self.sweep.methods.is_empty() || self.sweep.models.is_empty() {
            return Err(CliError::Config(
                "sweep needs at least one ratio, method and model".into(),
            ));
        }
        if self.sample.n == 0 {
            return Err(CliError::Config("sample n must be ≥ 1".into()));
        }
        self.corpus.vocab.check(&self.sample.condition).map_err(bad)?;
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        let c = &self.corpus;
        CorpusConfig {
            recordings_per_gesture: c.recordings_per_gesture,
            sample_rate_hz: c.sample_rate_hz,
            dims: c.dims,
            vocab: c.vocab,
            f0_hz: c.f0_hz,
            a_static: c.a_static,
            a_dyn: c.a_dyn,
            noise_sigma: c.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn classifier_config(&self, arch: Arch) -> ClassifierConfig {
        ClassifierConfig {
            arch,
            lr: self.classifier.lr,
            batch_size: self.classifier.batch_size,
            epochs: self.classifier.epochs,
            seed: self.seed,
            num_classes: self.corpus.vocab.gestures as usize,
        }
    }

    pub fn diffusion_settings(&self, vocab: Vocab, f_max_hz: f64) -> DiffusionSettings {
        let d = &self.diffusion;
        DiffusionSettings {
            schedule: d.schedule,
            steps: d.steps,
            cond_drop_prob: d.cond_drop_prob,
            model: d.model,
            vocab,
            f_max_hz,
            data: DataStats::default(),
        }
    }

    pub fn diffusion_train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.diffusion.train_steps,
            batch_size: self.diffusion.batch_size,
            lr: self.diffusion.lr,
            seed: self.seed,
        }
    }
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T, String>) -> CliResult<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| f(p).map_err(CliError::Config))
        .collect()
}
