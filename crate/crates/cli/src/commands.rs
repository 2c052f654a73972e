//! The `gda` subcommands. Each returns a one-line JSON summary.

use std::fs;
use std::path::{Path, PathBuf};

use gda_autodiff::rng::stream;
use gda_autodiff::{read_checkpoint, write_checkpoint, Checkpoint};
use gda_core::augment::{mix_dataset, AugmentationPlan, CachedSource, DiffusionSource, Method, SyntheticSource};
use gda_core::classifier::{evaluate, param_layout, train_classifier, Arch, ClassifierModel, Evaluation, LabeledImage};
use gda_core::csi::{export_csv, import_csv, read_csid, synth_csi, write_csid, Origin};
use gda_core::diffusion::{sidecar_path, DiffusionModel, SamplerConfig, TrainingExample};
use gda_core::dsp::dfs_spectrogram;
use gda_core::manifest::{split_dataset, DatasetManifest, ManifestEntry};
use gda_core::metrics::{quality_report, Features, QualityReport};
use gda_core::spectrogram::{read_dfss, write_dfss, Spectrogram};
use gda_core::Error;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::report::{
    absolute, encode_features, ensure_dir, hash_dataset, read_json, sha256_file, sweep_csv, sweep_table, unix_time,
    write_json, DatasetHashes, FileHash, SweepRow, TOOL_VERSION,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DIFFUSION_CHECKPOINT: &str = "diffusion.gdam";
pub const CLASSIFIER_CHECKPOINT: &str = "classifier.gdam";

fn load_manifest(path: &Path) -> CliResult<DatasetManifest> {
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "input manifest {} does not exist",
            path.display()
        )));
    }
    Ok(DatasetManifest::load(path)?)
}

fn load_spectrograms(path: &Path, m: &DatasetManifest) -> CliResult<Vec<Spectrogram>> {
    m.entries
        .iter()
        .map(|e| {
            let mut s = read_dfss(&DatasetManifest::resolve(path, e))?;
            // The manifest is authoritative for labels.
            s.condition = e.condition;
            s.origin = e.origin;
            Ok(s)
        })
        .collect()
}

/// Copy of `m` (loaded from `path`) whose entry paths are relative to
/// `out_dir`, so the manifest can be written there.
fn rebased(path: &Path, m: &DatasetManifest, out_dir: &Path) -> CliResult<DatasetManifest> {
    let base = absolute(out_dir)?;
    let mut out = m.clone();
    for e in &mut out.entries {
        let target = absolute(&DatasetManifest::resolve(path, e))?;
        e.path = relative_path(&target, &base).display().to_string();
    }
    Ok(out)
}

/// `target` expressed relative to the directory `base` (both absolute).
fn relative_path(target: &Path, base: &Path) -> PathBuf {
    let t: Vec<_> = target.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    for c in &t[common..] {
        rel.push(c);
    }
    rel
}

fn require_checkpoint(path: Option<&Path>, what: &str) -> CliResult<PathBuf> {
    match path {
        Some(p) if p.is_file() => Ok(p.to_path_buf()),
        Some(p) => Err(CliError::Config(format!(
            "{what} checkpoint {} does not exist",
            p.display()
        ))),
        None => Err(CliError::Config(format!(
            "a {what} checkpoint is required (--checkpoint)"
        ))),
    }
}

fn file_hash(path: &Path) -> CliResult<FileHash> {
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

pub fn synth_dataset(cfg: &RunConfig, out: &Path) -> CliResult<Value> {
    let corpus = cfg.corpus_config();
    ensure_dir(&out.join("csi"))?;
    let mut m = DatasetManifest::new(corpus.sample_rate_hz, corpus.vocab);
    for g in 0..corpus.vocab.gestures {
        for i in 0..corpus.recordings_per_gesture {
            let (sim, seed) = corpus.recording(g, i)?;
            let rec = synth_csi(&sim, corpus.sample_rate_hz, corpus.dims, seed)?;
            let rel = format!("csi/g{g}_r{i:04}.csid");
            write_csid(&rec, &out.join(&rel))?;
            m.entries.push(ManifestEntry {
                path: rel,
                condition: rec.condition,
                origin: rec.origin,
            });
        }
    }
    m.provenance = Some(json!({ "command": "synth-dataset", "tool_version": TOOL_VERSION, "corpus": corpus }));
    let mp = out.join(MANIFEST_FILE);
    m.save(&mp)?;
    Ok(json!({ "command": "synth-dataset", "status": "ok", "recordings": m.entries.len(), "manifest": mp }))
}

/// Convert a manifest of CSV files into CSID files.
pub fn import(cfg: &RunConfig, input: &Path, out: &Path) -> CliResult<Value> {
    let src = load_manifest(input)?;
    ensure_dir(&out.join("csi"))?;
    let mut m = DatasetManifest::new(src.sample_rate_hz, src.vocab);
    for (i, e) in src.entries.iter().enumerate() {
        let rec = import_csv(&DatasetManifest::resolve(input, e), e, src.sample_rate_hz)?;
        let rel = format!("csi/r{i:05}.csid");
        write_csid(&rec, &out.join(&rel))?;
        m.entries.push(ManifestEntry { path: rel, ..e.clone() });
    }
    m.provenance = Some(json!({ "command": "import", "source": hash_dataset(input, &src)?, "seed": cfg.seed }));
    let mp = out.join(MANIFEST_FILE);
    m.save(&mp)?;
    Ok(json!({ "command": "import", "status": "ok", "recordings": m.entries.len(), "manifest": mp }))
}

/// Write every CSID recording of a manifest as CSV, with a manifest that
/// `import` accepts.
pub fn export_csv_cmd(input: &Path, out: &Path) -> CliResult<Value> {
    let src = load_manifest(input)?;
    ensure_dir(&out.join("csv"))?;
    let mut m = DatasetManifest::new(src.sample_rate_hz, src.vocab);
    for (i, e) in src.entries.iter().enumerate() {
        let rec = read_csid(&DatasetManifest::resolve(input, e))?;
        let rel = format!("csv/r{i:05}.csv");
        export_csv(&rec, &out.join(&rel))?;
        m.entries.push(ManifestEntry { path: rel, ..e.clone() });
    }
    let mp = out.join(MANIFEST_FILE);
    m.save(&mp)?;
    Ok(json!({ "command": "export-csv", "status": "ok", "recordings": m.entries.len(), "manifest": mp }))
}

pub fn dfs(cfg: &RunConfig, input: &Path, out: &Path) -> CliResult<Value> {
    let src = load_manifest(input)?;
    ensure_dir(&out.join("dfs"))?;
    let shape = (cfg.spectrogram.freq_bins, cfg.spectrogram.frames);
    let mut m = DatasetManifest::new(src.sample_rate_hz, src.vocab);
    let mut degenerate = 0;
    for (i, e) in src.entries.iter().enumerate() {
        let rec = read_csid(&DatasetManifest::resolve(input, e))?;
        let mut spec = dfs_spectrogram(&rec, cfg.stft, shape)?;
        spec.condition = e.condition;
        spec.origin = e.origin;
        degenerate += usize::from(spec.degenerate);
        let rel = format!("dfs/s{i:05}.dfss");
        write_dfss(&spec, &out.join(&rel))?;
        m.entries.push(ManifestEntry { path: rel, ..e.clone() });
    }
    m.provenance = Some(json!({
        "command": "dfs",
        "tool_version": TOOL_VERSION,
        "stft": cfg.stft,
        "shape": cfg.spectrogram,
        "source_sha256": hash_dataset(input, &src)?.combined_sha256,
    }));
    let mp = out.join(MANIFEST_FILE);
    m.save(&mp)?;
    Ok(json!({
        "command": "dfs", "status": "ok", "spectrograms": m.entries.len(),
        "degenerate": degenerate, "manifest": mp,
    }))
}

pub fn split(cfg: &RunConfig, input: &Path, out: &Path) -> CliResult<Value> {
    ensure_dir(out)?;
    let src = rebased(input, &load_manifest(input)?, out)?;
    let (mut train, mut test) = split_dataset(&src, cfg.split.train_fraction, cfg.seed)?;
    let prov = json!({ "command": "split", "train_fraction": cfg.split.train_fraction, "seed": cfg.seed });
    train.provenance = Some(prov.clone());
    test.provenance = Some(prov);
    let (tp, sp) = (out.join("train.json"), out.join("test.json"));
    train.save(&tp)?;
    test.save(&sp)?;
    Ok(json!({
        "command": "split", "status": "ok", "train": train.entries.len(), "test": test.entries.len(),
        "train_manifest": tp, "test_manifest": sp,
    }))
}

#[derive(Serialize)]
struct TrainDiffReport<'a> {
    tool_version: &'a str,
    config: &'a RunConfig,
    input: DatasetHashes,
    losses: Vec<f64>,
}

pub fn train_diff(cfg: &RunConfig, input: &Path, out: &Path) -> CliResult<Value> {
    let m = load_manifest(input)?;
    let specs = load_spectrograms(input, &m)?;
    let first = specs.first().ok_or(Error::Empty("diffusion training set"))?;
    let data: Vec<TrainingExample> = specs.iter().map(TrainingExample::from_spectrogram).collect();
    let mut model = DiffusionModel::new(cfg.diffusion_settings(m.vocab, first.f_max_hz()), cfg.seed)?;
    let losses = model.train(&data, &cfg.diffusion_train())?;
    ensure_dir(out)?;
    let ckpt = out.join(DIFFUSION_CHECKPOINT);
    model.save(&ckpt)?;
    let tail = &losses[losses.len().saturating_sub(50)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    write_json(
        &out.join("train_diff.json"),
        &TrainDiffReport {
            tool_version: TOOL_VERSION,
            config: cfg,
            input: hash_dataset(input, &m)?,
            losses,
        },
    )?;
    Ok(json!({
        "command": "train-diff", "status": "ok", "steps": model.trained_steps,
        "final_loss": final_loss, "checkpoint": ckpt,
    }))
}

pub fn sample(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> CliResult<Value> {
    let ckpt = require_checkpoint(checkpoint, "diffusion")?;
    let model = DiffusionModel::load(&ckpt)?;
    let sc = SamplerConfig {
        guidance_weight: cfg.diffusion.guidance_weight,
        seed: cfg.seed,
        n_samples: cfg.sample.n,
        condition: cfg.sample.condition,
    };
    let samples = model.sample(&sc)?;
    ensure_dir(&out.join("samples"))?;
    let mut m = DatasetManifest::new(cfg.corpus.sample_rate_hz, model.settings.vocab);
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("samples/g{}_n{i:04}.dfss", s.condition.gesture);
        write_dfss(s, &out.join(&rel))?;
        m.entries.push(ManifestEntry {
            path: rel,
            condition: s.condition,
            origin: s.origin,
        });
    }
    m.provenance = Some(json!({ "command": "sample", "sampler": sc, "checkpoint": file_hash(&ckpt)? }));
    let mp = out.join(MANIFEST_FILE);
    m.save(&mp)?;
    Ok(json!({
        "command": "sample", "status": "ok", "samples": samples.len(),
        "gesture": cfg.sample.condition.gesture, "manifest": mp,
    }))
}

pub fn augment(cfg: &RunConfig, input: &Path, checkpoint: Option<&Path>, out: &Path) -> CliResult<Value> {
    let src = load_manifest(input)?;
    let real = load_spectrograms(input, &src)?;
    let plan = AugmentationPlan {
        method: cfg.augment.method,
        ratio_percent: cfg.augment.ratio_percent,
        seed: cfg.seed,
    };
    let model = if plan.method == Method::Generative && plan.ratio_percent > 0 {
        Some(DiffusionModel::load(&require_checkpoint(checkpoint, "diffusion")?)?)
    } else {
        None
    };
    let mut source = model.as_ref().map(|m| DiffusionSource {
        model: m,
        guidance_weight: cfg.diffusion.guidance_weight,
    });
    let items = mix_dataset(&real, &plan, source.as_mut().map(|s| s as &mut dyn SyntheticSource))?;
    ensure_dir(&out.join("aug"))?;
    let mut m = rebased(input, &src, out)?;
    for it in &items {
        let rel = format!("aug/g{}_s{:04}.dfss", it.gesture, it.slot);
        write_dfss(&it.spec, &out.join(&rel))?;
        m.entries.push(ManifestEntry {
            path: rel,
            condition: it.spec.condition,
            origin: it.spec.origin,
        });
    }
    m.provenance = Some(json!({ "command": "augment", "plan": plan }));
    let mp = out.join(MANIFEST_FILE);
    m.save(&mp)?;
    Ok(json!({
        "command": "augment", "status": "ok", "real": real.len(), "augmented": items.len(),
        "method": plan.method, "ratio_percent": plan.ratio_percent, "manifest": mp,
    }))
}

/// Classifier checkpoint sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierMeta {
    pub arch: Arch,
    pub num_classes: usize,
}

pub fn save_classifier(model: &ClassifierModel, seed: u64, path: &Path) -> CliResult<()> {
    write_checkpoint(
        path,
        &Checkpoint {
            seed,
            step: 0,
            params: model.params.clone(),
        },
    )
    .map_err(Error::from)?;
    write_json(
        &sidecar_path(path),
        &ClassifierMeta {
            arch: model.arch,
            num_classes: model.num_classes,
        },
    )
}

pub fn load_classifier(path: &Path) -> CliResult<ClassifierModel> {
    let meta: ClassifierMeta = read_json(&sidecar_path(path))?;
    let ckpt = read_checkpoint(path).map_err(Error::from)?;
    for (name, shape) in param_layout(meta.arch, meta.num_classes) {
        match ckpt.params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            _ => {
                return Err(Error::invalid(format!(
                    "{} does not hold a {} parameter `{name}` of shape {shape:?}",
                    path.display(),
                    meta.arch
                ))
                .into())
            }
        }
    }
    Ok(ClassifierModel {
        arch: meta.arch,
        num_classes: meta.num_classes,
        params: ckpt.params,
    })
}

pub fn train_clf(cfg: &RunConfig, input: &Path, out: &Path) -> CliResult<Value> {
    let m = load_manifest(input)?;
    let images: Vec<LabeledImage> = load_spectrograms(input, &m)?
        .iter()
        .map(LabeledImage::from_spectrogram)
        .collect();
    let ccfg = cfg.classifier_config(cfg.classifier.arch);
    let (model, history) = train_classifier(&images, &ccfg)?;
    ensure_dir(out)?;
    let ckpt = out.join(CLASSIFIER_CHECKPOINT);
    save_classifier(&model, cfg.seed, &ckpt)?;
    write_json(
        &out.join("train_clf.json"),
        &json!({
            "tool_version": TOOL_VERSION, "config": cfg, "classifier": ccfg,
            "input": hash_dataset(input, &m)?, "history": history,
        }),
    )?;
    let last = history.last().expect("at least one epoch");
    Ok(json!({
        "command": "train-clf", "status": "ok", "arch": ccfg.arch, "epochs": history.len(),
        "final_loss": last.mean_loss, "train_accuracy": last.train_accuracy, "checkpoint": ckpt,
    }))
}

pub fn eval_clf(cfg: &RunConfig, input: &Path, checkpoint: Option<&Path>, out: &Path) -> CliResult<Value> {
    let ckpt = require_checkpoint(checkpoint, "classifier")?;
    let model = load_classifier(&ckpt)?;
    let m = load_manifest(input)?;
    let images: Vec<LabeledImage> = load_spectrograms(input, &m)?
        .iter()
        .map(LabeledImage::from_spectrogram)
        .collect();
    let Evaluation {
        metrics,
        predictions,
        features,
    } = evaluate(&model, &images, model.num_classes)?;
    ensure_dir(out)?;
    let fp = out.join("features.gdft");
    fs::write(&fp, encode_features(&features)).map_err(|e| Error::io(&fp, e))?;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "tool_version": TOOL_VERSION, "config": cfg, "checkpoint": file_hash(&ckpt)?,
            "input": hash_dataset(input, &m)?, "metrics": metrics, "predictions": predictions,
        }),
    )?;
    Ok(json!({
        "command": "eval-clf", "status": "ok", "accuracy": metrics.accuracy, "macro_f1": metrics.macro_f1,
        "n": predictions.len(), "features": fp,
    }))
}

/// Best-match SSIM between two independent uniform-noise sets shaped and
/// labeled like `generated` and `real`: the floor any useful generator must
/// clear.
pub fn noise_baseline_ssim(generated: &[Spectrogram], real: &[Spectrogram], seed: u64) -> CliResult<f64> {
    let mut rng = stream(seed, "quality/noise");
    let mut noise = |set: &[Spectrogram]| -> CliResult<Vec<Spectrogram>> {
        set.iter()
            .map(|s| {
                let (f, k) = s.shape();
                let px = (0..f * k).map(|_| rng.random::<f32>()).collect();
                Ok(Spectrogram::new(
                    f,
                    k,
                    px,
                    s.f_max_hz(),
                    s.condition,
                    Origin::Synthetic,
                )?)
            })
            .collect()
    };
    let (a, b) = (noise(generated)?, noise(real)?);
    Ok(quality_report(&a, &b, None)?.ssim_mean)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QualityFile {
    pub tool_version: String,
    pub n_generated: usize,
    pub n_real: usize,
    pub report: QualityReport,
    pub ssim_noise_baseline: f64,
    pub feature_model: Option<String>,
}

fn features_of(model: &ClassifierModel, set: &[Spectrogram]) -> CliResult<Features> {
    let images: Vec<LabeledImage> = set.iter().map(LabeledImage::from_spectrogram).collect();
    Ok(evaluate(model, &images, model.num_classes)?.features)
}

fn quality_file(
    generated: &[Spectrogram],
    real: &[Spectrogram],
    classifier: Option<(&ClassifierModel, String)>,
    seed: u64,
) -> CliResult<QualityFile> {
    let feats = match &classifier {
        Some((m, _)) => Some((features_of(m, generated)?, features_of(m, real)?)),
        None => None,
    };
    let report = quality_report(generated, real, feats.as_ref().map(|(a, b)| (a, b)))?;
    Ok(QualityFile {
        tool_version: TOOL_VERSION.into(),
        n_generated: generated.len(),
        n_real: real.len(),
        report,
        ssim_noise_baseline: noise_baseline_ssim(generated, real, seed)?,
        feature_model: classifier.map(|(_, name)| name),
    })
}

pub fn quality(
    cfg: &RunConfig,
    input: &Path,
    reference: &Path,
    classifier: Option<&Path>,
    out: &Path,
) -> CliResult<Value> {
    let gm = load_manifest(input)?;
    let rm = load_manifest(reference)?;
    let generated = load_spectrograms(input, &gm)?;
    let real = load_spectrograms(reference, &rm)?;
    let clf = match classifier {
        Some(p) => Some((
            load_classifier(&require_checkpoint(Some(p), "classifier")?)?,
            p.display().to_string(),
        )),
        None => None,
    };
    let q = quality_file(&generated, &real, clf.as_ref().map(|(m, n)| (m, n.clone())), cfg.seed)?;
    ensure_dir(out)?;
    write_json(&out.join("quality.json"), &q)?;
    Ok(json!({
        "command": "quality", "status": "ok", "ssim_mean": q.report.ssim_mean, "w1": q.report.w1,
        "frechet": q.report.frechet, "ssim_noise_baseline": q.ssim_noise_baseline,
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepInputs {
    pub train: DatasetHashes,
    pub test: DatasetHashes,
    pub checkpoint: Option<FileHash>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub tool_version: String,
    pub generated_unix: u64,
    pub config: RunConfig,
    pub inputs: SweepInputs,
    pub rows: Vec<SweepRow>,
}

fn labeled(set: &[Spectrogram]) -> Vec<LabeledImage> {
    set.iter().map(LabeledImage::from_spectrogram).collect()
}

/// Ratio sweep: one freshly trained classifier per (model, method, ratio)
/// cell, evaluated on the untouched test split.
pub fn sweep(
    cfg: &RunConfig,
    train_path: &Path,
    test_path: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
) -> CliResult<Value> {
    let needs_model = cfg.sweep.methods.contains(&Method::Generative) && cfg.sweep.ratios.iter().any(|&r| r > 0);
    let ckpt = if needs_model {
        Some(require_checkpoint(checkpoint, "diffusion")?)
    } else {
        None
    };
    let train_m = load_manifest(train_path)?;
    let test_m = load_manifest(test_path)?;
    let train = load_spectrograms(train_path, &train_m)?;
    let test = labeled(&load_spectrograms(test_path, &test_m)?);
    let inputs = SweepInputs {
        train: hash_dataset(train_path, &train_m)?,
        test: hash_dataset(test_path, &test_m)?,
        checkpoint: ckpt.as_deref().map(file_hash).transpose()?,
    };
    let diffusion = ckpt.as_deref().map(DiffusionModel::load).transpose()?;
    let mut cache = diffusion.as_ref().map(|m| {
        CachedSource::new(DiffusionSource {
            model: m,
            guidance_weight: cfg.diffusion.guidance_weight,
        })
    });

    let real_images = labeled(&train);
    let mut rows = Vec::new();
    let mut baselines: Vec<(Arch, ClassifierModel, SweepRow)> = Vec::new();
    for &arch in &cfg.sweep.models {
        let ccfg = cfg.classifier_config(arch);
        for &method in &cfg.sweep.methods {
            for &ratio in &cfg.sweep.ratios {
                let plan = AugmentationPlan {
                    method,
                    ratio_percent: ratio,
                    seed: cfg.seed,
                };
                let source = match (method, cache.as_mut()) {
                    (Method::Generative, Some(c)) => Some(c as &mut dyn SyntheticSource),
                    _ => None,
                };
                let items = mix_dataset(&train, &plan, source)?;
                // Without augmentation every method trains on the same set, so
                // the (deterministic) baseline is computed once per model.
                if items.is_empty() {
                    if let Some((_, _, row)) = baselines.iter().find(|(a, _, _)| *a == arch) {
                        rows.push(SweepRow {
                            method,
                            ratio_percent: ratio,
                            ..row.clone()
                        });
                        continue;
                    }
                }
                let mut set = real_images.clone();
                set.extend(items.iter().map(|it| LabeledImage::from_spectrogram(&it.spec)));
                let (model, _) = train_classifier(&set, &ccfg)?;
                let ev = evaluate(&model, &test, ccfg.num_classes)?;
                let row = SweepRow {
                    model: arch,
                    method,
                    ratio_percent: ratio,
                    train_size: set.len(),
                    metrics: ev.metrics,
                };
                if items.is_empty() {
                    baselines.push((arch, model, row.clone()));
                }
                rows.push(row);
            }
        }
    }

    ensure_dir(out)?;
    let generated_unix = unix_time();
    let config_line = serde_json::to_string(cfg)?;
    let mut header = vec![
        "gda sweep report".to_string(),
        format!("tool_version: {TOOL_VERSION}"),
        format!("generated_unix: {generated_unix}"),
        format!("config: {config_line}"),
        format!("train_sha256: {}", inputs.train.combined_sha256),
        format!("test_sha256: {}", inputs.test.combined_sha256),
    ];
    if let Some(c) = &inputs.checkpoint {
        header.push(format!("checkpoint_sha256: {}", c.sha256));
    }
    let csv_path = out.join("sweep.csv");
    fs::write(&csv_path, sweep_csv(&header, &rows)).map_err(|e| Error::io(&csv_path, e))?;
    let table_path = out.join("sweep_table.csv");
    fs::write(&table_path, sweep_table(&cfg.sweep.ratios, &rows)).map_err(|e| Error::io(&table_path, e))?;
    write_json(
        &out.join("sweep.json"),
        &SweepReport {
            tool_version: TOOL_VERSION.into(),
            generated_unix,
            config: cfg.clone(),
            inputs,
            rows: rows.clone(),
        },
    )?;

    let mut summary = json!({ "command": "sweep", "status": "ok", "rows": rows.len(), "csv": csv_path });
    if let Some(c) = &cache {
        let pool: Vec<Spectrogram> = c.pool().into_iter().cloned().collect();
        if !pool.is_empty() {
            let test_specs = load_spectrograms(test_path, &test_m)?;
            let feature_model = baselines
                .first()
                .map(|(a, m, _)| (m, format!("{a} baseline (ratio 0)")));
            let q = quality_file(&pool, &test_specs, feature_model, cfg.seed)?;
            write_json(&out.join("quality.json"), &q)?;
            ensure_dir(&out.join("generated"))?;
            for (i, s) in pool.iter().enumerate() {
                write_dfss(s, &out.join(format!("generated/g{}_n{i:04}.dfss", s.condition.gesture)))?;
            }
            summary["ssim_generated"] = json!(q.report.ssim_mean);
            summary["ssim_noise_baseline"] = json!(q.ssim_noise_baseline);
        }
    }
    Ok(summary)
}
