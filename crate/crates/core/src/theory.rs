//! Closed-form per-token times and speedups of vanilla and parallel
//! speculative decoding.
//!
//! `t` is one draft forward, `c = T_p / t` the speed ratio, so an
//! autoregressive target token costs `c * t`. Every speedup is reported
//! against that baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timing::TimingModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoryError {
    #[error("acceptance rate {0} outside [0, 1]")]
    Tau(f64),
    #[error("window size must be at least 1")]
    Gamma,
    #[error("{name} must be positive and finite, got {value}")]
    Positive { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Every draft accepted.
    Ideal,
    /// Drafts accepted independently at rate tau.
    Practical,
    /// Truncated acceptance with rollback.
    Rollback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub tau: f64,
    pub gamma: usize,
    pub c: f64,
    pub t: f64,
}

impl TheoryInputs {
    pub fn new(tau: f64, gamma: usize, c: f64, t: f64) -> Result<Self, TheoryError> {
        let v = Self { tau, gamma, c, t };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(TheoryError::Tau(self.tau));
        }
        if self.gamma == 0 {
            return Err(TheoryError::Gamma);
        }
        for (name, value) in [("c", self.c), ("t", self.t)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(TheoryError::Positive { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub per_token_time: f64,
    pub speedup_vs_ar: f64,
    pub regime: Regime,
}

impl SpeedupReport {
    fn from_time(per_token_time: f64, ar_time: f64, regime: Regime) -> Self {
        let speedup_vs_ar = if per_token_time.is_finite() {
            ar_time / per_token_time
        } else {
            0.0
        };
        Self {
            per_token_time,
            speedup_vs_ar,
            regime,
        }
    }
}

fn check_tau(tau: f64) -> Result<(), TheoryError> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(TheoryError::Tau(tau))
    }
}

/// Probabilities `P(X = k)`, `k = 0..=gamma`, of the accepted-prefix length
/// under i.i.d. acceptance at rate `tau` truncated at `gamma`.
pub fn trunc_geo_pmf(tau: f64, gamma: usize) -> Result<Vec<f64>, TheoryError> {
    check_tau(tau)?;
    let mut pmf: Vec<f64> = (0..gamma).map(|k| tau.powi(k as i32) * (1.0 - tau)).collect();
    pmf.push(tau.powi(gamma as i32));
    Ok(pmf)
}

/// `E[X] = tau (1 - tau^gamma) / (1 - tau)`, with the limit `gamma` at
/// `tau = 1`.
pub fn trunc_geo_expectation(tau: f64, gamma: usize) -> Result<f64, TheoryError> {
    check_tau(tau)?;
    if tau == 1.0 {
        return Ok(gamma as f64);
    }
    Ok(tau * (1.0 - tau.powi(gamma as i32)) / (1.0 - tau))
}

/// Expected tokens over one retry cycle of two verification rounds, where
/// the second round only counts when the first accepted the whole window:
/// `(1 + tau^gamma) E[X]`.
pub fn expected_tokens_two_round(tau: f64, gamma: usize) -> Result<f64, TheoryError> {
    Ok((1.0 + tau.powi(gamma as i32)) * trunc_geo_expectation(tau, gamma)?)
}

/// Sequential draft-then-verify: `(gamma + c) t / (gamma + 1)` with full
/// acceptance, `(gamma + c) t / (tau gamma + 1)` otherwise.
pub fn vanilla_sd_time(inputs: &TheoryInputs, regime: Regime) -> Result<SpeedupReport, TheoryError> {
    inputs.validate()?;
    let TheoryInputs { tau, gamma, c, t } = *inputs;
    let g = gamma as f64;
    let per_token = match regime {
        Regime::Ideal => (g + c) * t / (g + 1.0),
        Regime::Practical => (g + c) * t / (tau * g + 1.0),
        Regime::Rollback => (g + c) * t / (trunc_geo_expectation(tau, gamma)? + 1.0),
    };
    Ok(SpeedupReport::from_time(per_token, c * t, regime))
}

/// Parallel draft/verify: `max(gamma t, c t) / gamma` with full acceptance,
/// `max(gamma t, c t) / (tau gamma)` otherwise, and the two-round rollback
/// form `2 max(gamma t, c t) / ((1 + tau^gamma) E[X])`.
pub fn parallel_sd_time(inputs: &TheoryInputs, regime: Regime) -> Result<SpeedupReport, TheoryError> {
    inputs.validate()?;
    let TheoryInputs { tau, gamma, c, t } = *inputs;
    let g = gamma as f64;
    let span = (g * t).max(c * t);
    let per_token = match regime {
        Regime::Ideal => span / g,
        Regime::Practical => {
            if tau == 0.0 {
                f64::INFINITY
            } else {
                span / (tau * g)
            }
        }
        Regime::Rollback => {
            let e = expected_tokens_two_round(tau, gamma)?;
            if e == 0.0 {
                f64::INFINITY
            } else {
                2.0 * span / e
            }
        }
    };
    Ok(SpeedupReport::from_time(per_token, c * t, regime))
}

pub fn parallel_rollback_time(inputs: &TheoryInputs) -> Result<SpeedupReport, TheoryError> {
    parallel_sd_time(inputs, Regime::Rollback)
}

/// `(1/2) sum_{k=1}^{2c} tau^k`, the rollback speedup when `gamma = c`.
pub fn rollback_speedup_series(tau: f64, c: usize) -> Result<f64, TheoryError> {
    check_tau(tau)?;
    Ok(0.5 * (1..=2 * c).map(|k| tau.powi(k as i32)).sum::<f64>())
}

/// Combined speedup `tau_hat * c*(alpha)`.
pub fn parallelvlm_speedup(tau_hat: f64, alpha: f64, timing: &TimingModel) -> Result<SpeedupReport, TheoryError> {
    check_tau(tau_hat)?;
    let t = timing.t_draft_at(alpha);
    if !(t > 0.0 && t.is_finite()) {
        return Err(TheoryError::Positive { name: "t_draft", value: t });
    }
    let per_token = if tau_hat == 0.0 { f64::INFINITY } else { t / tau_hat };
    Ok(SpeedupReport::from_time(per_token, timing.t_target, Regime::Practical))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(tau: f64, gamma: usize, c: f64) -> TheoryInputs {
        TheoryInputs::new(tau, gamma, c, 1.0).unwrap()
    }

    #[test]
    fn expectation_examples() {
        assert!((trunc_geo_expectation(0.5, 3).unwrap() - 0.875).abs() < 1e-15);
        assert_eq!(trunc_geo_expectation(0.0, 4).unwrap(), 0.0);
        assert_eq!(trunc_geo_expectation(1.0, 7).unwrap(), 7.0);
        assert!(trunc_geo_expectation(1.1, 7).is_err());
        assert!((expected_tokens_two_round(0.5, 3).unwrap() - 0.984375).abs() < 1e-15);
        assert_eq!(expected_tokens_two_round(1.0, 4).unwrap(), 8.0);
    }

    #[test]
    fn vanilla_examples() {
        let r = vanilla_sd_time(&inputs(1.0, 5, 5.0), Regime::Ideal).unwrap();
        assert!((r.speedup_vs_ar - 3.0).abs() < 1e-12);
        let r = vanilla_sd_time(&inputs(0.0, 5, 5.0), Regime::Practical).unwrap();
        assert!((r.speedup_vs_ar - 0.5).abs() < 1e-12);
        let r = vanilla_sd_time(&inputs(1.0, 1, 1.0), Regime::Ideal).unwrap();
        assert!((r.speedup_vs_ar - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parallel_examples() {
        let ideal = parallel_sd_time(&inputs(1.0, 5, 5.0), Regime::Ideal).unwrap();
        assert!((ideal.per_token_time - 1.0).abs() < 1e-12);
        assert!((ideal.speedup_vs_ar - 5.0).abs() < 1e-12);
        let van = vanilla_sd_time(&inputs(1.0, 5, 5.0), Regime::Ideal).unwrap();
        assert!((ideal.speedup_vs_ar / van.speedup_vs_ar - 10.0 / 6.0).abs() < 1e-12);
        let p = parallel_sd_time(&inputs(0.8, 9, 9.0), Regime::Practical).unwrap();
        assert!((p.speedup_vs_ar - 7.2).abs() < 1e-12);
        let r = parallel_rollback_time(&inputs(0.5, 3, 3.0)).unwrap();
        assert!((r.speedup_vs_ar - 0.4921875).abs() < 1e-12);
        assert!((rollback_speedup_series(0.5, 3).unwrap() - 0.4921875).abs() < 1e-15);
        let r = parallel_rollback_time(&inputs(1.0, 4, 4.0)).unwrap();
        assert!((r.speedup_vs_ar - 4.0).abs() < 1e-12);
        let zero = parallel_sd_time(&inputs(0.0, 4, 4.0), Regime::Practical).unwrap();
        assert_eq!(zero.speedup_vs_ar, 0.0);
    }

    #[test]
    fn combined_speedup() {
        let timing = crate::timing::PresetFile::builtin().get("llava-ov-7b-72b").unwrap().timing.clone();
        let full = parallelvlm_speedup(1.0, 0.9, &timing).unwrap();
        assert!((full.speedup_vs_ar - 420.0 / 46.6).abs() < 1e-12);
        let base = parallelvlm_speedup(1.0, 0.0, &timing).unwrap();
        assert!((full.speedup_vs_ar / base.speedup_vs_ar - 78.3 / 46.6).abs() < 1e-12);
        assert_eq!(parallelvlm_speedup(0.0, 0.9, &timing).unwrap().speedup_vs_ar, 0.0);
    }
}
