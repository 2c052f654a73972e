//! CSI recordings and their on-disk formats.

mod corpus;
mod csv;
pub(crate) mod format;
mod synth;

use serde::{Deserialize, Serialize};

pub use self::corpus::CorpusConfig;
pub use self::csv::{export_csv, import_csv, CSV_HEADER};
pub use self::format::{decode_csid, encode_csid, read_csid, write_csid, CSID_HEADER_LEN, CSID_MAGIC};
pub use self::synth::{synth_csi, GestureSim, GestureTemplate};

use crate::error::{Error, Result};

pub type Complex = rustfft::num_complex::Complex64;

/// Categorical conditions attached to every recording and spectrogram.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionLabel {
    pub gesture: u16,
    pub location: u16,
    pub orientation: u16,
    pub user: u16,
    pub room: u16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

impl Origin {
    pub fn to_byte(self) -> u8 {
        match self {
            Origin::Real => 0,
            Origin::Synthetic => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Origin::Real),
            1 => Some(Origin::Synthetic),
            _ => None,
        }
    }
}

/// Tensor extent: time frames × subcarriers × receive antennas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsiDims {
    pub frames: usize,
    pub subcarriers: usize,
    pub antennas: usize,
}

impl Default for CsiDims {
    fn default() -> Self {
        CsiDims {
            frames: 1024,
            subcarriers: 30,
            antennas: 3,
        }
    }
}

impl CsiDims {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.subcarriers < 1 || self.antennas < 1 {
            return Err(Error::invalid(format!(
                "CSI dims need T ≥ 2, S ≥ 1, A ≥ 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> Option<usize> {
        self.frames.checked_mul(self.subcarriers)?.checked_mul(self.antennas)
    }
}

/// Complex CSI tensor, stored t-major then subcarrier then antenna.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiRecording {
    dims: CsiDims,
    samples: Vec<Complex>,
    sample_rate_hz: f64,
    pub condition: ConditionLabel,
    pub origin: Origin,
}

impl CsiRecording {
    pub fn new(
        dims: CsiDims,
        samples: Vec<Complex>,
        sample_rate_hz: f64,
        condition: ConditionLabel,
        origin: Origin,
    ) -> Result<Self> {
        dims.validate()?;
        if dims.len() != Some(samples.len()) {
            return Err(Error::invalid(format!(
                "{dims:?} needs {:?} samples, got {}",
                dims.len(),
                samples.len()
            )));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::invalid(format!("sample rate {sample_rate_hz} must be positive")));
        }
        if let Some(i) = samples.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::invalid(format!("non-finite CSI entry at flat index {i}")));
        }
        Ok(CsiRecording {
            dims,
            samples,
            sample_rate_hz,
            condition,
            origin,
        })
    }

    pub fn dims(&self) -> CsiDims {
        self.dims
    }

    pub fn samples(&self) -> &[Complex] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn index(&self, t: usize, s: usize, a: usize) -> usize {
        (t * self.dims.subcarriers + s) * self.dims.antennas + a
    }

    pub fn get(&self, t: usize, s: usize, a: usize) -> Complex {
        self.samples[self.index(t, s, a)]
    }

    /// Copy with every sample transformed by `f(t, s, a, z)`.
    pub fn map_samples(&self, f: impl Fn(usize, usize, usize, Complex) -> Complex) -> Result<Self> {
        let d = self.dims;
        let mut out = Vec::with_capacity(self.samples.len());
        for t in 0..d.frames {
            for s in 0..d.subcarriers {
                for a in 0..d.antennas {
                    out.push(f(t, s, a, self.get(t, s, a)));
                }
            }
        }
        CsiRecording::new(d, out, self.sample_rate_hz, self.condition, self.origin)
    }
}
