//! DFS spectrogram images and the `DFSS` file format.
//!
//! `DFSS` layout (little-endian): magic `DFSS`, version `u32` = 1, F `u32`,
//! K `u32`, gesture/location/orientation/user/room `u16`, origin `u8`, flags
//! `u8` (bit 0: degenerate input), the top frequency of the symmetric axis as
//! `f64`, zero padding to 48 bytes, then F·K `f32` pixels, frequency-major.

use std::fs;
use std::path::Path;

use crate::csi::format::{f64_at, read_condition, u32_at, write_condition};
use crate::csi::{ConditionLabel, Origin};
use crate::error::{Error, Result};

pub const DFSS_MAGIC: &[u8; 4] = b"DFSS";
pub const DFSS_HEADER_LEN: usize = 48;
const VERSION: u32 = 1;

/// Doppler-bins × time-frames image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    freq_bins: usize,
    frames: usize,
    pixels: Vec<f32>,
    f_max_hz: f64,
    pub condition: ConditionLabel,
    pub origin: Origin,
    /// Set when the source had no dynamic power and the pixels were zeroed.
    pub degenerate: bool,
}

/// Symmetric, strictly increasing axis of `n` bin centers spanning
/// `[-f_max, f_max]`; `axis[i] == -axis[n-1-i]` exactly.
pub fn symmetric_axis(n: usize, f_max_hz: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    let denom = (n - 1) as f64;
    (0..n).map(|i| f_max_hz * (2.0 * i as f64 - denom) / denom).collect()
}

impl Spectrogram {
    pub fn new(
        freq_bins: usize,
        frames: usize,
        pixels: Vec<f32>,
        f_max_hz: f64,
        condition: ConditionLabel,
        origin: Origin,
    ) -> Result<Self> {
        if freq_bins == 0 || frames == 0 || pixels.len() != freq_bins * frames {
            return Err(Error::invalid(format!(
                "spectrogram {freq_bins}×{frames} with {} pixels",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("pixel {p} outside [0, 1]")));
        }
        if !(f_max_hz.is_finite() && f_max_hz > 0.0) {
            return Err(Error::invalid(format!("frequency span {f_max_hz} must be positive")));
        }
        Ok(Spectrogram {
            freq_bins,
            frames,
            pixels,
            f_max_hz,
            condition,
            origin,
            degenerate: false,
        })
    }

    pub fn freq_bins(&self) -> usize {
        self.freq_bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.freq_bins, self.frames)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, f: usize, k: usize) -> f32 {
        self.pixels[f * self.frames + k]
    }

    pub fn pixels_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    pub fn f_max_hz(&self) -> f64 {
        self.f_max_hz
    }

    pub fn f_axis_hz(&self) -> Vec<f64> {
        symmetric_axis(self.freq_bins, self.f_max_hz)
    }

    /// Same metadata, new pixels (clamped into `[0, 1]`).
    pub fn with_pixels(&self, pixels: Vec<f32>) -> Result<Self> {
        let pixels = pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect();
        let mut s = Spectrogram::new(
            self.freq_bins,
            self.frames,
            pixels,
            self.f_max_hz,
            self.condition,
            self.origin,
        )?;
        s.degenerate = self.degenerate;
        Ok(s)
    }

    /// Index of the brightest Doppler bin in each frame (ties: lowest bin).
    pub fn ridge(&self) -> Vec<usize> {
        (0..self.frames)
            .map(|k| {
                let mut best = 0;
                for f in 1..self.freq_bins {
                    if self.pixel(f, k) > self.pixel(best, k) {
                        best = f;
                    }
                }
                best
            })
            .collect()
    }
}

pub fn encode_dfss(s: &Spectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(DFSS_HEADER_LEN + s.pixels.len() * 4);
    out.extend_from_slice(DFSS_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(s.freq_bins as u32).to_le_bytes());
    out.extend_from_slice(&(s.frames as u32).to_le_bytes());
    write_condition(&mut out, &s.condition);
    out.push(s.origin.to_byte());
    out.push(u8::from(s.degenerate));
    out.extend_from_slice(&s.f_max_hz.to_le_bytes());
    out.resize(DFSS_HEADER_LEN, 0);
    for p in &s.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_dfss(buf: &[u8], path: &Path) -> Result<Spectrogram> {
    if buf.len() < 4 || &buf[..4] != DFSS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "DFSS",
        });
    }
    if buf.len() < DFSS_HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            len: buf.len(),
            expected: DFSS_HEADER_LEN,
        });
    }
    let version = u32_at(buf, 4);
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            version,
        });
    }
    let (f, k) = (u32_at(buf, 8) as usize, u32_at(buf, 12) as usize);
    let expected = f
        .checked_mul(k)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(DFSS_HEADER_LEN))
        .ok_or_else(|| Error::DimensionOverflow {
            path: path.to_path_buf(),
        })?;
    if buf.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            len: buf.len(),
            expected,
        });
    }
    let condition = read_condition(&buf[16..26]);
    let origin = Origin::from_byte(buf[26])
        .ok_or_else(|| Error::invalid(format!("{}: unknown origin byte {}", path.display(), buf[26])))?;
    let degenerate = buf[27] & 1 == 1;
    let f_max = f64_at(buf, 28);
    let pixels = buf[DFSS_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut s = Spectrogram::new(f, k, pixels, f_max, condition, origin)?;
    s.degenerate = degenerate;
    Ok(s)
}

pub fn write_dfss(s: &Spectrogram, path: &Path) -> Result<()> {
    fs::write(path, encode_dfss(s)).map_err(|e| Error::io(path, e))
}

pub fn read_dfss(path: &Path) -> Result<Spectrogram> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dfss(&buf, path)
}
