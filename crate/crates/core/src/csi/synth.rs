use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Complex, ConditionLabel, CsiDims, CsiRecording, Origin};
use crate::error::{Error, Result};

/// Doppler trajectories standing in for the six gestures, in gesture-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GestureTemplate {
    /// ±f0 plateaus alternating every quarter of the gesture.
    PushPull,
    /// Linear chirp from −f0 to +f0.
    Sweep,
    /// Two short bursts of opposite sign.
    Clap,
    /// Constant +f0.
    Slide,
    /// f0·sin(2πτ/D).
    Circle,
    /// Triangle wave, two periods over the gesture.
    Zigzag,
}

impl GestureTemplate {
    pub const ALL: [GestureTemplate; 6] = [
        GestureTemplate::PushPull,
        GestureTemplate::Sweep,
        GestureTemplate::Clap,
        GestureTemplate::Slide,
        GestureTemplate::Circle,
        GestureTemplate::Zigzag,
    ];

    pub fn from_gesture_id(id: u16) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GestureTemplate::PushPull => "push-pull",
            GestureTemplate::Sweep => "sweep",
            GestureTemplate::Clap => "clap",
            GestureTemplate::Slide => "slide",
            GestureTemplate::Circle => "circle",
            GestureTemplate::Zigzag => "zigzag",
        }
    }

    /// Instantaneous Doppler shift at time `tau` into a gesture of length
    /// `duration`; zero outside `[0, duration)`.
    pub fn doppler_hz(self, tau: f64, duration: f64, f0: f64) -> f64 {
        if !(0.0..duration).contains(&tau) {
            return 0.0;
        }
        let u = tau / duration;
        match self {
            GestureTemplate::PushPull => {
                if ((u * 4.0) as usize).is_multiple_of(2) {
                    f0
                } else {
                    -f0
                }
            }
            GestureTemplate::Sweep => f0 * (2.0 * u - 1.0),
            GestureTemplate::Clap => {
                if (0.2..0.35).contains(&u) {
                    f0
                } else if (0.55..0.7).contains(&u) {
                    -f0
                } else {
                    0.0
                }
            }
            GestureTemplate::Slide => f0,
            GestureTemplate::Circle => f0 * (2.0 * PI * u).sin(),
            GestureTemplate::Zigzag => {
                let p = (2.0 * u - 0.25).rem_euclid(1.0);
                f0 * (4.0 * (p - 0.5).abs() - 1.0)
            }
        }
    }
}

/// Parameters of the two-path (static + moving reflector) CSI surrogate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GestureSim {
    pub template: GestureTemplate,
    pub duration_s: f64,
    pub f0_hz: f64,
    pub a_static: f64,
    pub a_dyn: f64,
    pub noise_sigma: f64,
    pub condition: ConditionLabel,
}

impl GestureSim {
    fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        let finite = [
            self.duration_s,
            self.f0_hz,
            self.a_static,
            self.a_dyn,
            self.noise_sigma,
            sample_rate_hz,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("gesture simulation parameters must be finite"));
        }
        if sample_rate_hz <= 0.0 || self.duration_s <= 0.0 {
            return Err(Error::invalid("sample rate and duration must be positive"));
        }
        if self.a_static < 0.0 || self.a_dyn < 0.0 || self.noise_sigma < 0.0 || self.f0_hz < 0.0 {
            return Err(Error::invalid("amplitudes, f0 and noise sigma must be non-negative"));
        }
        if self.f0_hz >= sample_rate_hz / 2.0 {
            return Err(Error::Nyquist {
                f0_hz: self.f0_hz,
                nyquist_hz: sample_rate_hz / 2.0,
            });
        }
        Ok(())
    }
}

/// Cumulative Doppler phase Φ(t_n) = ∫₀^{t_n} f_d(τ) dτ in cycles, integrated
/// per sample interval with 3-point Gauss–Legendre.
fn cumulative_phase(spec: &GestureSim, sample_rate_hz: f64, frames: usize) -> Vec<f64> {
    let dt = 1.0 / sample_rate_hz;
    let nodes = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
    let weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let mut phase = Vec::with_capacity(frames);
    let mut acc = 0.0;
    phase.push(0.0);
    for n in 1..frames {
        let mid = (n as f64 - 0.5) * dt;
        let integral: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(x, w)| {
                w * spec
                    .template
                    .doppler_hz(mid + x * dt / 2.0, spec.duration_s, spec.f0_hz)
            })
            .sum::<f64>()
            * dt
            / 2.0;
        acc += integral;
        phase.push(acc);
    }
    phase
}

/// Synthesize `samples[t,s,a] = a_s·e^{jφ(s,a)} + a_d·e^{j(2πΦ(t)+ψ(s,a))} + n`,
/// with per-(s,a) phases uniform on [0, 2π) and circular Gaussian noise of
/// total standard deviation `noise_sigma`.
pub fn synth_csi(spec: &GestureSim, sample_rate_hz: f64, dims: CsiDims, seed: u64) -> Result<CsiRecording> {
    dims.validate()?;
    spec.validate(sample_rate_hz)?;
    let (s_n, a_n) = (dims.subcarriers, dims.antennas);
    let mut phase_rng = gda_autodiff::rng::stream(seed, "csi/phases");
    let static_phase: Vec<f64> = (0..s_n * a_n).map(|_| phase_rng.random_range(0.0..2.0 * PI)).collect();
    let dyn_phase: Vec<f64> = (0..s_n * a_n).map(|_| phase_rng.random_range(0.0..2.0 * PI)).collect();
    let statics: Vec<Complex> = static_phase
        .iter()
        .map(|&p| Complex::from_polar(spec.a_static, p))
        .collect();
    let doppler = cumulative_phase(spec, sample_rate_hz, dims.frames);
    let mut noise_rng = gda_autodiff::rng::stream(seed, "csi/noise");
    let component_sigma = spec.noise_sigma / 2f64.sqrt();
    let mut samples = Vec::with_capacity(dims.frames * s_n * a_n);
    for phi in &doppler {
        for sa in 0..s_n * a_n {
            let moving = Complex::from_polar(spec.a_dyn, 2.0 * PI * phi + dyn_phase[sa]);
            let mut z = statics[sa] + moving;
            if spec.noise_sigma > 0.0 {
                let re: f64 = noise_rng.sample(StandardNormal);
                let im: f64 = noise_rng.sample(StandardNormal);
                z += Complex::new(re, im) * component_sigma;
            }
            samples.push(z);
        }
    }
    CsiRecording::new(dims, samples, sample_rate_hz, spec.condition, Origin::Synthetic)
}
