//! Parameters of the desk-scale synthetic gesture corpus.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ConditionLabel, CsiDims, GestureSim, GestureTemplate};
use crate::error::{Error, Result};
use crate::manifest::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub recordings_per_gesture: usize,
    pub sample_rate_hz: f64,
    pub dims: CsiDims,
    pub vocab: Vocab,
    /// Nominal peak Doppler; orientation and per-recording jitter move it
    /// within ±20%.
    pub f0_hz: f64,
    pub a_static: f64,
    /// Dynamic-path amplitude at location 0, decreasing with location id.
    pub a_dyn: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            recordings_per_gesture: 60,
            sample_rate_hz: 1000.0,
            dims: CsiDims::default(),
            vocab: Vocab::default(),
            f0_hz: 60.0,
            a_static: 1.0,
            a_dyn: 0.5,
            noise_sigma: 0.1,
            seed: crate::DEFAULT_SEED,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.recordings_per_gesture == 0 {
            return Err(Error::invalid("recordings_per_gesture must be ≥ 1"));
        }
        if self.vocab.gestures as usize > GestureTemplate::ALL.len() {
            return Err(Error::invalid(format!(
                "the synthetic corpus has {} gesture templates, vocab asks for {}",
                GestureTemplate::ALL.len(),
                self.vocab.gestures
            )));
        }
        if [
            self.vocab.locations,
            self.vocab.orientations,
            self.vocab.users,
            self.vocab.rooms,
        ]
        .contains(&0)
        {
            return Err(Error::invalid("every vocabulary needs at least one id"));
        }
        Ok(())
    }

    /// Simulation parameters and seed of recording `index` of `gesture`.
    /// Conditions cycle through locations, then orientations, then users.
    pub fn recording(&self, gesture: u16, index: usize) -> Result<(GestureSim, u64)> {
        let template = GestureTemplate::from_gesture_id(gesture)
            .ok_or_else(|| Error::invalid(format!("no template for gesture {gesture}")))?;
        let v = self.vocab;
        let (nl, no, nu) = (v.locations as usize, v.orientations as usize, v.users as usize);
        let condition = ConditionLabel {
            gesture,
            location: (index % nl) as u16,
            orientation: ((index / nl) % no) as u16,
            user: ((index / (nl * no)) % nu) as u16,
            room: 0,
        };
        let seed = gda_autodiff::rng::derive_seed_indexed(self.seed, "corpus", &[gesture as u64, index as u64]);
        let mut rng = gda_autodiff::rng::stream(seed, "corpus/params");
        let centered = |id: u16, n: u16| if n > 1 { id as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
        let f0 =
            self.f0_hz * (1.0 + 0.3 * centered(condition.orientation, v.orientations)) * rng.random_range(0.95..1.05);
        let a_dyn = self.a_dyn
            * (1.0 - 0.4 * (centered(condition.location, v.locations) + 0.5))
            * (1.0 + 0.2 * centered(condition.user, v.users));
        let length_s = self.dims.frames as f64 / self.sample_rate_hz;
        let sim = GestureSim {
            template,
            duration_s: length_s * rng.random_range(0.85..1.0),
            f0_hz: f0,
            a_static: self.a_static,
            a_dyn,
            noise_sigma: self.noise_sigma,
            condition,
        };
        Ok((sim, seed))
    }
}
