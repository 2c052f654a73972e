//! Classical augmentation baselines and the real/synthetic dataset mixer.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use gda_autodiff::rng::{derive_seed_indexed, stream_indexed};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csi::{ConditionLabel, Origin};
use crate::diffusion::{DiffusionModel, SampleRequest};
use crate::dsp::resample_window;
use crate::error::{Error, Result};
use crate::spectrogram::Spectrogram;

pub const ALLOWED_RATIOS: [u32; 6] = [0, 20, 40, 60, 80, 100];
pub const CROP_FRAC_RANGE: (f64, f64) = (0.7, 0.95);
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Generative,
    Crop,
    FlipTime,
    ScaleAmplitude,
    None,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Generative => "generative",
            Method::Crop => "crop",
            Method::FlipTime => "flip_time",
            Method::ScaleAmplitude => "scale_amplitude",
            Method::None => "none",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::Generative,
            Method::Crop,
            Method::FlipTime,
            Method::ScaleAmplitude,
            Method::None,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown augmentation method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPlan {
    pub method: Method,
    pub ratio_percent: u32,
    pub seed: u64,
}

pub fn check_ratio(ratio_percent: u32) -> Result<()> {
    if ALLOWED_RATIOS.contains(&ratio_percent) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "ratio {ratio_percent}% is not one of {ALLOWED_RATIOS:?}"
        )))
    }
}

/// Random axis-aligned window covering `frac` of each side, resized back to
/// the full shape with bilinear interpolation.
pub fn crop_resize<R: Rng + ?Sized>(spec: &Spectrogram, frac: f64, rng: &mut R) -> Result<Spectrogram> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::invalid(format!("crop fraction {frac} outside (0, 1]")));
    }
    let (f, k) = spec.shape();
    let (h, w) = (frac * f as f64, frac * k as f64);
    let mut offset = |room: f64| if room > 0.0 { rng.random_range(0.0..=room) } else { 0.0 };
    let y0 = offset(f as f64 - h);
    let x0 = offset(k as f64 - w);
    let out = resample_window(&spec.pixels_f64(), f, k, (y0, x0), (h, w), f, k);
    spec.with_pixels(out.into_iter().map(|v| v as f32).collect())
}

/// Reverse the time axis.
pub fn flip_time(spec: &Spectrogram) -> Result<Spectrogram> {
    let (f, k) = spec.shape();
    let p = spec.pixels();
    let out = (0..f)
        .flat_map(|row| (0..k).rev().map(move |col| p[row * k + col]))
        .collect();
    spec.with_pixels(out)
}

/// Multiply every pixel by `factor` and clamp back into `[0, 1]`.
pub fn scale_amplitude(spec: &Spectrogram, factor: f64) -> Result<Spectrogram> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!("scale factor {factor} must be positive")));
    }
    if factor == 1.0 {
        return Ok(spec.clone());
    }
    spec.with_pixels(spec.pixels().iter().map(|&p| (p as f64 * factor) as f32).collect())
}

/// `round(ratio/100 · n)` with halves rounded up.
pub fn augmented_count(ratio_percent: u32, n: usize) -> usize {
    (ratio_percent as usize * n + 50) / 100
}

/// Split `total` across classes in proportion to `counts` by largest
/// remainder (ties to the lower class id). Exact integer arithmetic.
pub fn allocate(counts: &BTreeMap<u16, usize>, total: usize) -> BTreeMap<u16, usize> {
    let n: usize = counts.values().sum();
    if n == 0 {
        return counts.keys().map(|&g| (g, 0)).collect();
    }
    let mut out: BTreeMap<u16, usize> = counts.iter().map(|(&g, &c)| (g, total * c / n)).collect();
    let assigned: usize = out.values().sum();
    let mut rem: Vec<(usize, u16)> = counts.iter().map(|(&g, &c)| (total * c % n, g)).collect();
    // Largest remainder first, lower class id first among equals.
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, g) in rem.iter().take(total - assigned) {
        *out.get_mut(&g).unwrap() += 1;
    }
    out
}

/// A request for one synthetic sample in augmentation slot `slot` of
/// `gesture`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotRequest {
    pub gesture: u16,
    pub slot: usize,
    pub condition: ConditionLabel,
    pub seed: u64,
}

/// Source of labeled synthetic spectrograms.
pub trait SyntheticSource {
    /// One spectrogram per request, tagged with the requested condition.
    fn generate(&mut self, requests: &[SlotRequest]) -> Result<Vec<Spectrogram>>;
}

/// Classifier-free-guided diffusion samples.
pub struct DiffusionSource<'a> {
    pub model: &'a DiffusionModel,
    pub guidance_weight: f64,
}

impl SyntheticSource for DiffusionSource<'_> {
    fn generate(&mut self, requests: &[SlotRequest]) -> Result<Vec<Spectrogram>> {
        for r in requests {
            if let Err(e) = self.model.settings.vocab.check(&r.condition) {
                return Err(Error::Generator {
                    gesture: r.gesture,
                    reason: e.to_string(),
                });
            }
        }
        let reqs: Vec<SampleRequest> = requests
            .iter()
            .map(|r| SampleRequest {
                condition: r.condition,
                seed: r.seed,
            })
            .collect();
        self.model.sample_requests(&reqs, self.guidance_weight)
    }
}

/// Memoizes another source by `(gesture, slot, seed)`, so that sweeps over
/// several ratios generate each slot once.
pub struct CachedSource<S> {
    inner: S,
    cache: HashMap<(u16, usize, u64), Spectrogram>,
}

impl<S: SyntheticSource> CachedSource<S> {
    pub fn new(inner: S) -> Self {
        CachedSource {
            inner,
            cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    /// Cached samples in (gesture, slot) order.
    pub fn pool(&self) -> Vec<&Spectrogram> {
        let mut keys: Vec<_> = self.cache.keys().collect();
        keys.sort();
        keys.into_iter().map(|k| &self.cache[k]).collect()
    }
}

impl<S: SyntheticSource> SyntheticSource for CachedSource<S> {
    fn generate(&mut self, requests: &[SlotRequest]) -> Result<Vec<Spectrogram>> {
        let key = |r: &SlotRequest| (r.gesture, r.slot, r.seed);
        let missing: Vec<SlotRequest> = requests
            .iter()
            .filter(|r| !self.cache.contains_key(&key(r)))
            .copied()
            .collect();
        if !missing.is_empty() {
            let fresh = self.inner.generate(&missing)?;
            if fresh.len() != missing.len() {
                return Err(Error::Generator {
                    gesture: missing[0].gesture,
                    reason: format!("{} samples for {} requests", fresh.len(), missing.len()),
                });
            }
            for (r, s) in missing.iter().zip(fresh) {
                self.cache.insert(key(r), s);
            }
        }
        Ok(requests.iter().map(|r| self.cache[&key(r)].clone()).collect())
    }
}

/// One appended sample and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedItem {
    pub spec: Spectrogram,
    pub gesture: u16,
    pub slot: usize,
    /// Index into the real set of the sample that was transformed or whose
    /// condition was requested.
    pub base_index: usize,
}

/// Plan the augmented samples for `real`: `round(r/100·|real|)` new items,
/// allocated per gesture by largest remainder. Slot `j` of gesture `g`
/// draws its randomness from `(plan.seed, g, j)` alone, so a slot's content
/// does not depend on the ratio. Classical transforms keep the base sample's
/// origin; generated samples are tagged synthetic.
pub fn mix_dataset(
    real: &[Spectrogram],
    plan: &AugmentationPlan,
    source: Option<&mut dyn SyntheticSource>,
) -> Result<Vec<AugmentedItem>> {
    check_ratio(plan.ratio_percent)?;
    if real.is_empty() {
        return Err(Error::Empty("real training set"));
    }
    if plan.method == Method::None || plan.ratio_percent == 0 {
        return Ok(Vec::new());
    }
    let mut members: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, s) in real.iter().enumerate() {
        members.entry(s.condition.gesture).or_default().push(i);
    }
    let counts = members.iter().map(|(&g, m)| (g, m.len())).collect();
    let alloc = allocate(&counts, augmented_count(plan.ratio_percent, real.len()));

    let mut items = Vec::new();
    let mut requests = Vec::new();
    for (&g, &n) in &alloc {
        let class = &members[&g];
        for j in 0..n {
            let mut rng = stream_indexed(plan.seed, "augment/slot", &[g as u64, j as u64]);
            let base_index = class[rng.random_range(0..class.len())];
            let base = &real[base_index];
            let spec = match plan.method {
                Method::Crop => {
                    let frac = rng.random_range(CROP_FRAC_RANGE.0..=CROP_FRAC_RANGE.1);
                    Some(crop_resize(base, frac, &mut rng)?)
                }
                Method::FlipTime => Some(flip_time(base)?),
                Method::ScaleAmplitude => Some(scale_amplitude(base, rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1))?),
                Method::Generative => {
                    requests.push(SlotRequest {
                        gesture: g,
                        slot: j,
                        condition: base.condition,
                        seed: derive_seed_indexed(plan.seed, "augment/generate", &[g as u64, j as u64]),
                    });
                    None
                }
                Method::None => unreachable!(),
            };
            items.push((g, j, base_index, spec));
        }
    }
    if plan.method == Method::Generative {
        let source = source.ok_or_else(|| Error::Generator {
            gesture: requests[0].gesture,
            reason: "no synthetic source supplied".into(),
        })?;
        let generated = source.generate(&requests)?;
        if generated.len() != requests.len() {
            return Err(Error::Generator {
                gesture: requests[0].gesture,
                reason: format!("{} samples for {} requests", generated.len(), requests.len()),
            });
        }
        for (item, (s, r)) in items.iter_mut().zip(generated.into_iter().zip(&requests)) {
            if s.condition != r.condition {
                return Err(Error::Generator {
                    gesture: r.gesture,
                    reason: format!("asked for {:?}, got {:?}", r.condition, s.condition),
                });
            }
            let mut s = s;
            s.origin = Origin::Synthetic;
            item.3 = Some(s);
        }
    }
    Ok(items
        .into_iter()
        .map(|(gesture, slot, base_index, spec)| AugmentedItem {
            spec: spec.expect("every slot filled"),
            gesture,
            slot,
            base_index,
        })
        .collect())
}
