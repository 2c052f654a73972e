use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// β_t, α_t = 1 − β_t and ᾱ_t = Π_{s≤t} α_s for t = 1..T (stored 0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("diffusion schedule needs at least one step"));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    LINEAR_BETA_START
                } else {
                    LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * PI / 2.0)
                    .cos()
                    .powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(MAX_BETA))
                .collect()
        }
    };
    NoiseSchedule::from_betas(kind, beta)
}

impl NoiseSchedule {
    fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("β = {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            kind,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "diffusion step {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    /// β_t for 1 ≤ t ≤ T.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t for 0 ≤ t ≤ T, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Variance β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t) of q(x_{t−1} | x_t, x_0).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0·x_0 + ct·x_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let denom = 1.0 - self.alpha_bar(t);
        (
            self.beta(t) * self.alpha_bar(t - 1).sqrt() / denom,
            (1.0 - self.alpha_bar(t - 1)) * self.alpha(t).sqrt() / denom,
        )
    }

    /// Closed-form marginal x_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·ε.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let i = self.check(t)?;
        forward_diffuse_with(self.alpha_bar[i], x0, eps)
    }
}

/// The forward marginal for an explicit ᾱ; also covers the ᾱ = 1 limit.
pub fn forward_diffuse_with(alpha_bar: f64, x0: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::invalid(format!(
            "noise has {} values for a {}-value image",
            eps.len(),
            x0.len()
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoints() {
        let s = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        let t1 = make_schedule(ScheduleKind::Linear, 1).unwrap();
        assert_eq!(t1.alpha_bar(1), 1.0 - t1.beta(1));
        assert!(make_schedule(ScheduleKind::Cosine, 0).is_err());
    }

    #[test]
    fn first_posterior_step_returns_x0() {
        let s = make_schedule(ScheduleKind::Cosine, 10).unwrap();
        let (c0, ct) = s.posterior_mean_coefs(1);
        assert!((c0 - 1.0).abs() < 1e-12);
        assert_eq!(ct, 0.0);
        assert_eq!(s.posterior_variance(1), 0.0);
    }
}
