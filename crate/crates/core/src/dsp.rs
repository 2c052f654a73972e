//! Phase sanitization and Doppler-frequency-shift (DFS) spectrogram extraction.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::csi::{Complex, CsiRecording};
use crate::error::{Error, Result};
use crate::spectrogram::Spectrogram;

/// Log-power spans at or below this are treated as "no dynamic content".
const DEGENERATE_RANGE: f64 = 1e-12;

/// Reference powers below this fraction of the subcarrier's mean reference
/// power are floored before normalization.
const REF_POWER_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowFn {
    Hann,
    Rect,
}

impl WindowFn {
    /// Periodic window coefficients of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowFn::Rect => vec![1.0; n],
            WindowFn::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftParams {
    pub window_len: usize,
    pub hop: usize,
    pub window_fn: WindowFn,
}

impl Default for StftParams {
    fn default() -> Self {
        StftParams {
            window_len: 128,
            hop: 32,
            window_fn: WindowFn::Hann,
        }
    }
}

impl StftParams {
    pub fn validate(&self) -> Result<()> {
        if !self.window_len.is_power_of_two() {
            return Err(Error::invalid(format!(
                "window length {} is not a power of two",
                self.window_len
            )));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return Err(Error::invalid(format!(
                "hop {} must lie in [1, {}]",
                self.hop, self.window_len
            )));
        }
        Ok(())
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }
}

/// STFT output: `frames × window_len`, frequency index `window_len / 2` is
/// zero Doppler and index 0 is the Nyquist bin.
#[derive(Clone, Debug, PartialEq)]
pub struct StftMatrix {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex>,
}

impl StftMatrix {
    pub fn get(&self, k: usize, f: usize) -> Complex {
        self.data[k * self.bins + f]
    }
}

/// Bin-center frequencies of the centered STFT axis.
pub fn centered_frequencies(window_len: usize, sample_rate_hz: f64) -> Vec<f64> {
    let half = (window_len / 2) as f64;
    (0..window_len)
        .map(|i| (i as f64 - half) * sample_rate_hz / window_len as f64)
        .collect()
}

/// Sanitized CSI: `frames × subcarriers × pairs` complex values.
#[derive(Clone, Debug, PartialEq)]
pub struct Sanitized {
    pub frames: usize,
    pub subcarriers: usize,
    pub pairs: usize,
    pub data: Vec<Complex>,
}

impl Sanitized {
    pub fn get(&self, t: usize, s: usize, k: usize) -> Complex {
        self.data[(t * self.subcarriers + s) * self.pairs + k]
    }

    /// Time series for one (subcarrier, pair).
    pub fn series(&self, s: usize, k: usize) -> Vec<Complex> {
        (0..self.frames).map(|t| self.get(t, s, k)).collect()
    }
}

/// Conjugate multiplication against a reference antenna, normalized by the
/// reference power, followed by per-(subcarrier, pair) temporal mean removal:
/// `out[t,s,k] = x[t,s,k']·conj(x[t,s,ref]) / |x[t,s,ref]|² − mean_t(·)`.
///
/// The plain conjugate product carries the moving path at both `+f_d` and
/// `−f_d` with comparable power, so the Doppler sign is lost. Dividing by the
/// reference power turns the product into the antenna ratio `x_k / x_ref`,
/// whose dynamic terms all rotate in the direction of the true Doppler shift.
/// Any phase common to all antennas still cancels exactly.
pub fn sanitize(rec: &CsiRecording, ref_antenna: usize) -> Result<Sanitized> {
    let d = rec.dims();
    if d.antennas < 2 {
        return Err(Error::invalid(format!(
            "sanitize needs at least 2 antennas, got {}",
            d.antennas
        )));
    }
    if ref_antenna >= d.antennas {
        return Err(Error::invalid(format!(
            "reference antenna {ref_antenna} out of range for {} antennas",
            d.antennas
        )));
    }
    let pairs = d.antennas - 1;
    let floor: Vec<f64> = (0..d.subcarriers)
        .map(|s| {
            let sum: f64 = (0..d.frames).map(|t| rec.get(t, s, ref_antenna).norm_sqr()).sum();
            REF_POWER_FLOOR * sum / d.frames as f64
        })
        .collect();
    let mut data = Vec::with_capacity(d.frames * d.subcarriers * pairs);
    for t in 0..d.frames {
        for (s, &fl) in floor.iter().enumerate() {
            let r = rec.get(t, s, ref_antenna);
            let power = r.norm_sqr().max(fl);
            for a in (0..d.antennas).filter(|&a| a != ref_antenna) {
                let z = rec.get(t, s, a) * r.conj();
                data.push(if power > 0.0 { z / power } else { z });
            }
        }
    }
    let width = d.subcarriers * pairs;
    for col in 0..width {
        let mean = (0..d.frames).map(|t| data[t * width + col]).sum::<Complex>() / d.frames as f64;
        for t in 0..d.frames {
            data[t * width + col] -= mean;
        }
    }
    Ok(Sanitized {
        frames: d.frames,
        subcarriers: d.subcarriers,
        pairs,
        data,
    })
}

/// Reusable STFT plan for one parameter set.
pub struct Stft {
    params: StftParams,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(params: StftParams) -> Result<Self> {
        params.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(params.window_len);
        Ok(Stft {
            params,
            window: params.window_fn.coefficients(params.window_len),
            fft,
        })
    }

    pub fn params(&self) -> StftParams {
        self.params
    }

    pub fn run(&self, signal: &[Complex]) -> Result<StftMatrix> {
        let w = self.params.window_len;
        if signal.len() < w {
            return Err(Error::invalid(format!(
                "signal of length {} is shorter than the window ({w})",
                signal.len()
            )));
        }
        let frames = self.params.frames(signal.len());
        let half = w / 2;
        let mut data = vec![Complex::new(0.0, 0.0); frames * w];
        let mut buf = vec![Complex::new(0.0, 0.0); w];
        for k in 0..frames {
            let start = k * self.params.hop;
            for n in 0..w {
                buf[n] = signal[start + n] * self.window[n];
            }
            self.fft.process(&mut buf);
            let row = &mut data[k * w..(k + 1) * w];
            // Centered index i holds unshifted bin (i + W/2) mod W.
            row[..half].copy_from_slice(&buf[half..]);
            row[half..].copy_from_slice(&buf[..half]);
        }
        Ok(StftMatrix { frames, bins: w, data })
    }
}

pub fn stft(signal: &[Complex], params: StftParams) -> Result<StftMatrix> {
    Stft::new(params)?.run(signal)
}

/// Bilinear resampling of the source window with top-left corner `(y0, x0)`
/// and extent `h × w` (in source pixels, possibly fractional) onto an
/// `out_h × out_w` grid, using pixel-center alignment and edge clamping.
/// Resampling a full image to its own size returns it unchanged.
#[allow(clippy::too_many_arguments)]
pub fn resample_window(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    (y0, x0): (f64, f64),
    (h, w): (f64, f64),
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    debug_assert_eq!(src.len(), src_h * src_w);
    let taps = |o: usize, n_out: usize, origin: f64, extent: f64, n_src: usize| {
        let pos = origin + (o as f64 + 0.5) * extent / n_out as f64 - 0.5;
        let pos = pos.clamp(0.0, (n_src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_src - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, out_w, x0, w, src_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y_lo, y_hi, fy) = taps(y, out_h, y0, h, src_h);
        for &(x_lo, x_hi, fx) in &cols {
            let top = lerp(src[y_lo * src_w + x_lo], src[y_lo * src_w + x_hi], fx);
            let bottom = lerp(src[y_hi * src_w + x_lo], src[y_hi * src_w + x_hi], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    out
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

pub fn resize_bilinear(src: &[f64], src_h: usize, src_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    resample_window(
        src,
        src_h,
        src_w,
        (0.0, 0.0),
        (src_h as f64, src_w as f64),
        out_h,
        out_w,
    )
}

/// Sanitize → per-(subcarrier, pair) STFT → mean power → log1p → bilinear
/// resize to `out_shape` (Doppler bins, frames) → min-max to `[0, 1]`.
///
/// The Nyquist bin is dropped so the Doppler axis is symmetric about zero.
/// A recording with no dynamic power yields all-zero pixels and
/// `degenerate = true`.
pub fn dfs_spectrogram(rec: &CsiRecording, params: StftParams, out_shape: (usize, usize)) -> Result<Spectrogram> {
    let (out_f, out_k) = out_shape;
    if out_f == 0 || out_k == 0 {
        return Err(Error::invalid("spectrogram output shape must be non-zero"));
    }
    let engine = Stft::new(params)?;
    let clean = sanitize(rec, 0)?;
    let w = params.window_len;
    if clean.frames < w {
        return Err(Error::invalid(format!(
            "recording has {} frames, fewer than the STFT window ({w})",
            clean.frames
        )));
    }
    let frames = params.frames(clean.frames);
    let mut power = vec![0.0; frames * w];
    for s in 0..clean.subcarriers {
        for k in 0..clean.pairs {
            let x = engine.run(&clean.series(s, k))?;
            for (p, z) in power.iter_mut().zip(&x.data) {
                *p += z.norm_sqr();
            }
        }
    }
    let n_series = (clean.subcarriers * clean.pairs) as f64;
    // Frequency-major, Nyquist bin (centered index 0) dropped.
    let bins = w - 1;
    let mut image = vec![0.0; bins * frames];
    for f in 0..bins {
        for k in 0..frames {
            image[f * frames + k] = (power[k * w + f + 1] / n_series).ln_1p();
        }
    }
    let resized = resize_bilinear(&image, bins, frames, out_f, out_k);
    let (lo, hi) = resized.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let degenerate = !(hi - lo > DEGENERATE_RANGE);
    let pixels = if degenerate {
        vec![0.0f32; out_f * out_k]
    } else {
        resized.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect()
    };
    let fs = rec.sample_rate_hz();
    // Outer resized bin centers sit half a source span inside the band edges.
    let f_max = (out_f as f64 - 1.0) / (2.0 * out_f as f64) * bins as f64 * fs / w as f64;
    let f_max = if out_f == 1 { fs / w as f64 } else { f_max };
    let mut spec = Spectrogram::new(out_f, out_k, pixels, f_max, rec.condition, rec.origin)?;
    spec.degenerate = degenerate;
    Ok(spec)
}
