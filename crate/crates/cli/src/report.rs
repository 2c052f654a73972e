//! Report files: input hashes, JSON writing, the sweep CSVs and the feature
//! matrix binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gda_core::augment::Method;
use gda_core::classifier::Arch;
use gda_core::manifest::DatasetManifest;
use gda_core::metrics::{ClassificationMetrics, Features};
use gda_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub const TOOL_VERSION: &str = concat!("gda ", env!("CARGO_PKG_VERSION"));
pub const SWEEP_COLUMNS: &str = "model,method,ratio_percent,accuracy,macro_precision,macro_recall,macro_f1";
pub const FEATURES_MAGIC: &[u8; 4] = b"GDFT";
pub const FEATURES_HEADER_LEN: usize = 16;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Hashes of a manifest file and of every file it lists, plus one digest
/// over all of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHashes {
    pub manifest: FileHash,
    pub combined_sha256: String,
    pub files: Vec<FileHash>,
}

pub fn hash_dataset(manifest_path: &Path, manifest: &DatasetManifest) -> CliResult<DatasetHashes> {
    let manifest_hash = FileHash {
        path: manifest_path.display().to_string(),
        sha256: sha256_file(manifest_path)?,
    };
    let mut files = Vec::with_capacity(manifest.entries.len());
    let mut all = Sha256::new();
    all.update(manifest_hash.sha256.as_bytes());
    for e in &manifest.entries {
        let p = DatasetManifest::resolve(manifest_path, e);
        let h = sha256_file(&p)?;
        all.update(h.as_bytes());
        files.push(FileHash {
            path: e.path.clone(),
            sha256: h,
        });
    }
    Ok(DatasetHashes {
        manifest: manifest_hash,
        combined_sha256: all.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        files,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Absolute form of `p` (the file must exist).
pub fn absolute(p: &Path) -> CliResult<PathBuf> {
    Ok(fs::canonicalize(p).map_err(|e| Error::io(p, e))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: Arch,
    pub method: Method,
    pub ratio_percent: u32,
    pub train_size: usize,
    pub metrics: ClassificationMetrics,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}",
            self.model, self.method, self.ratio_percent, m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
        )
    }
}

/// `sweep.csv`: `#` header lines (provenance, may differ between runs),
/// then the column line and one row per cell.
pub fn sweep_csv(header: &[String], rows: &[SweepRow]) -> String {
    let mut out = String::new();
    for h in header {
        out.push_str("# ");
        out.push_str(h);
        out.push('\n');
    }
    out.push_str(SWEEP_COLUMNS);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Lines of a sweep CSV that are not `#` header lines.
pub fn csv_body(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

/// Table layout: per (model, method) one row per metric, one column per
/// ratio.
pub fn sweep_table(ratios: &[u32], rows: &[SweepRow]) -> String {
    let mut out = String::from("model,method,metric");
    for r in ratios {
        out.push_str(&format!(",{r}%"));
    }
    out.push('\n');
    let mut groups: Vec<(Arch, Method)> = Vec::new();
    for r in rows {
        if !groups.contains(&(r.model, r.method)) {
            groups.push((r.model, r.method));
        }
    }
    type Getter = fn(&ClassificationMetrics) -> f64;
    let metrics: [(&str, Getter); 4] = [
        ("accuracy", |m| m.accuracy),
        ("precision", |m| m.macro_precision),
        ("recall", |m| m.macro_recall),
        ("f1", |m| m.macro_f1),
    ];
    for (model, method) in groups {
        for (name, get) in metrics {
            out.push_str(&format!("{model},{method},{name}"));
            for &ratio in ratios {
                match rows
                    .iter()
                    .find(|r| r.model == model && r.method == method && r.ratio_percent == ratio)
                {
                    Some(r) => out.push_str(&format!(",{:.4}", get(&r.metrics))),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// `GDFT` binary: magic, version u32, rows u32, dim u32, then `rows × dim`
/// little-endian f64 values row-major.
pub fn encode_features(f: &Features) -> Vec<u8> {
    let mut buf = Vec::with_capacity(FEATURES_HEADER_LEN + 8 * f.data.len());
    buf.extend_from_slice(FEATURES_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(f.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(f.dim as u32).to_le_bytes());
    for v in &f.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_features(buf: &[u8], path: &Path) -> CliResult<Features> {
    if buf.len() < FEATURES_HEADER_LEN || &buf[..4] != FEATURES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "GDFT",
        }
        .into());
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4-byte slice"));
    if word(4) != 1 {
        return Err(Error::Version {
            path: path.to_path_buf(),
            version: word(4),
        }
        .into());
    }
    let (rows, dim) = (word(8) as usize, word(12) as usize);
    let expected = FEATURES_HEADER_LEN + 8 * rows * dim;
    if buf.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            len: buf.len(),
            expected,
        }
        .into());
    }
    let data = buf[FEATURES_HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Features::new(rows, dim, data)?)
}
