//! Dataset manifests (JSON) and stratified train/test splits.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::csi::{ConditionLabel, Origin};
use crate::error::{Error, Result};

/// Sizes of the categorical condition vocabularies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub gestures: u16,
    pub locations: u16,
    pub orientations: u16,
    pub users: u16,
    pub rooms: u16,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            gestures: 6,
            locations: 5,
            orientations: 5,
            users: 4,
            rooms: 1,
        }
    }
}

impl Vocab {
    pub fn check(&self, c: &ConditionLabel) -> Result<()> {
        let fields = [
            ("gesture", c.gesture, self.gestures),
            ("location", c.location, self.locations),
            ("orientation", c.orientation, self.orientations),
            ("user", c.user, self.users),
            ("room", c.room, self.rooms),
        ];
        for (field, id, size) in fields {
            if id >= size {
                return Err(Error::InvalidCondition { field, id, size });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory (or absolute).
    pub path: String,
    pub condition: ConditionLabel,
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub sample_rate_hz: f64,
    pub vocab: Vocab,
    pub entries: Vec<ManifestEntry>,
    /// Free-form record of how the dataset was produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn new(sample_rate_hz: f64, vocab: Vocab) -> Self {
        DatasetManifest {
            sample_rate_hz,
            vocab,
            entries: Vec::new(),
            provenance: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::invalid(format!("duplicate manifest path `{}`", e.path)));
            }
            self.vocab.check(&e.condition)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Resolve an entry path against the directory holding the manifest.
    pub fn resolve(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    fn with_entries(&self, entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest {
            sample_rate_hz: self.sample_rate_hz,
            vocab: self.vocab,
            entries,
            provenance: self.provenance.clone(),
        }
    }
}

/// Stratified split by gesture: each class contributes
/// `round(train_fraction · n)` entries to train (kept within `[1, n − 1]`)
/// and the rest to test. Entries keep their original relative order.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if manifest.entries.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut by_class: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        by_class.entry(e.condition.gesture).or_default().push(i);
    }
    let mut in_train = vec![false; manifest.entries.len()];
    for (&gesture, idx) in &by_class {
        let n = idx.len();
        if n < 2 {
            return Err(Error::ClassTooSmall { gesture, count: n });
        }
        let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut order = idx.clone();
        let mut rng = gda_autodiff::rng::stream_indexed(seed, "split", &[gesture as u64]);
        order.shuffle(&mut rng);
        for &i in &order[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (e, t) in manifest.entries.iter().zip(in_train) {
        if t {
            train.push(e.clone());
        } else {
            test.push(e.clone());
        }
    }
    Ok((manifest.with_entries(train), manifest.with_entries(test)))
}
