//! Forward-latency model of a draft/target pairing and the named presets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimingError {
    #[error("invalid timing model: {0}")]
    Invalid(String),
    #[error("unknown timing preset '{0}'")]
    UnknownPreset(String),
    #[error("timing model has no prefill latencies")]
    MissingPrefill,
    #[error("presets file: {0}")]
    Presets(String),
}

/// How a non-integer speed ratio becomes an integer window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    Down,
    Up,
}

impl Rounding {
    /// Down for aggressive windows (ratio at least 2), up otherwise.
    pub fn default_for(ratio: f64) -> Self {
        if ratio >= 2.0 {
            Rounding::Down
        } else {
            Rounding::Up
        }
    }
}

/// Latency as a function of the pruning ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatencyCurve {
    Constant(f64),
    /// `(alpha, ms)` knots, sorted by alpha. Linear between knots and
    /// extended linearly past the last two knots.
    Table(Vec<(f64, f64)>),
}

impl LatencyCurve {
    pub fn at(&self, alpha: f64) -> f64 {
        match self {
            LatencyCurve::Constant(ms) => *ms,
            LatencyCurve::Table(knots) => {
                if knots.len() == 1 {
                    return knots[0].1;
                }
                let seg = knots
                    .windows(2)
                    .position(|w| alpha <= w[1].0)
                    .unwrap_or(knots.len() - 2);
                let (a0, y0) = knots[seg];
                let (a1, y1) = knots[seg + 1];
                if alpha <= a0 && seg == 0 {
                    // Hold flat below the first knot.
                    return y0;
                }
                y0 + (y1 - y0) * (alpha - a0) / (a1 - a0)
            }
        }
    }

    fn validate(&self, name: &str) -> Result<(), TimingError> {
        match self {
            LatencyCurve::Constant(ms) if *ms > 0.0 && ms.is_finite() => Ok(()),
            LatencyCurve::Constant(ms) => Err(TimingError::Invalid(format!("{name} = {ms} ms"))),
            LatencyCurve::Table(knots) => {
                if knots.is_empty() {
                    return Err(TimingError::Invalid(format!("{name} table is empty")));
                }
                if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(TimingError::Invalid(format!(
                        "{name} knots must have strictly increasing alpha"
                    )));
                }
                if knots.windows(2).any(|w| w[1].1 > w[0].1) {
                    return Err(TimingError::Invalid(format!(
                        "{name} must be non-increasing in alpha"
                    )));
                }
                if knots.iter().any(|&(_, ms)| !(ms > 0.0 && ms.is_finite())) {
                    return Err(TimingError::Invalid(format!("{name} has a non-positive latency")));
                }
                // The linear extension past the last knot must stay positive.
                if self.at(1.0) <= 0.0 {
                    return Err(TimingError::Invalid(format!(
                        "{name} extrapolates to a non-positive latency at alpha = 1"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Prefill latencies for the parallel prefilling stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillTiming {
    pub target_ms: f64,
    pub draft_ms: LatencyCurve,
    /// Fraction of the target prefill after which the early-layer
    /// representations are broadcast to the draft.
    pub broadcast_fraction: f64,
    /// Cost of transmitting representations and running the pruning.
    #[serde(default = "default_prune_cost")]
    pub prune_cost_ms: f64,
}

fn default_prune_cost() -> f64 {
    10.0
}

/// Draft/target forward latencies in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    /// Target verification forward with full context.
    pub t_target: f64,
    /// Draft decoding forward as a function of the pruning ratio.
    pub t_draft: LatencyCurve,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill: Option<PrefillTiming>,
}

impl TimingModel {
    /// Decode-only model with constant draft latency.
    pub fn constant(t_draft: f64, t_target: f64) -> Self {
        Self {
            t_target,
            t_draft: LatencyCurve::Constant(t_draft),
            prefill: None,
        }
    }

    pub fn validate(&self) -> Result<(), TimingError> {
        if !(self.t_target > 0.0 && self.t_target.is_finite()) {
            return Err(TimingError::Invalid(format!("t_target = {}", self.t_target)));
        }
        self.t_draft.validate("t_draft")?;
        if let Some(p) = &self.prefill {
            if !(p.target_ms > 0.0 && p.target_ms.is_finite()) {
                return Err(TimingError::Invalid(format!("prefill target = {}", p.target_ms)));
            }
            p.draft_ms.validate("prefill draft")?;
            if !(p.broadcast_fraction > 0.0 && p.broadcast_fraction < 1.0) {
                return Err(TimingError::Invalid(format!(
                    "broadcast_fraction {} outside (0, 1)",
                    p.broadcast_fraction
                )));
            }
            if !(p.prune_cost_ms >= 0.0 && p.prune_cost_ms.is_finite()) {
                return Err(TimingError::Invalid(format!("prune cost = {}", p.prune_cost_ms)));
            }
        }
        Ok(())
    }

    pub fn t_draft_full(&self) -> f64 {
        self.t_draft.at(0.0)
    }

    pub fn t_draft_at(&self, alpha: f64) -> f64 {
        self.t_draft.at(alpha)
    }

    /// Unpruned speed ratio `c = T_p / T_q(0)`.
    pub fn speed_ratio(&self) -> f64 {
        self.t_target / self.t_draft_full()
    }

    /// Pruned speed ratio `c*(alpha) = T_p / T_q(alpha)`.
    pub fn pruned_speed_ratio(&self, alpha: f64) -> f64 {
        self.t_target / self.t_draft_at(alpha)
    }

    pub fn prefill(&self) -> Result<&PrefillTiming, TimingError> {
        self.prefill.as_ref().ok_or(TimingError::MissingPrefill)
    }
}

/// One named pairing in the presets file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingPreset {
    pub description: String,
    pub provenance: String,
    /// Window rounding that suits the pairing.
    pub rounding: Rounding,
    pub timing: TimingModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetFile {
    pub version: u32,
    pub presets: BTreeMap<String, TimingPreset>,
}

const BUILTIN_PRESETS: &str = include_str!("../presets/timing_presets.json");

impl PresetFile {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_PRESETS).expect("built-in presets are valid")
    }

    pub fn from_json(text: &str) -> Result<Self, TimingError> {
        let file: Self =
            serde_json::from_str(text).map_err(|e| TimingError::Presets(e.to_string()))?;
        for (name, p) in &file.presets {
            p.timing
                .validate()
                .map_err(|e| TimingError::Presets(format!("{name}: {e}")))?;
        }
        Ok(file)
    }

    pub fn get(&self, name: &str) -> Result<&TimingPreset, TimingError> {
        self.presets
            .get(name)
            .ok_or_else(|| TimingError::UnknownPreset(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_interpolates_and_extends() {
        let c = LatencyCurve::Table(vec![(0.0, 78.3), (0.5, 57.5), (0.9, 46.6)]);
        assert_eq!(c.at(0.0), 78.3);
        assert!((c.at(0.25) - (78.3 + 57.5) / 2.0).abs() < 1e-12);
        assert!((c.at(0.9) - 46.6).abs() < 1e-12);
        let slope = (46.6 - 57.5) / 0.4;
        assert!((c.at(1.0) - (46.6 + 0.1 * slope)).abs() < 1e-9);
    }

    #[test]
    fn builtin_presets_load_and_validate() {
        let presets = PresetFile::builtin();
        for name in [
            "llava-ov-0.5b-7b",
            "llava-ov-7b-72b",
            "qwen2.5-vl-7b-32b",
            "llava-ov-7b-self",
            "qwen2.5-vl-7b-self",
        ] {
            let p = presets.get(name).unwrap();
            assert!(p.timing.pruned_speed_ratio(0.9) >= p.timing.speed_ratio());
        }
        assert!(matches!(presets.get("nope"), Err(TimingError::UnknownPreset(_))));
    }

    #[test]
    fn invalid_models_are_rejected() {
        let increasing = TimingModel {
            t_target: 100.0,
            t_draft: LatencyCurve::Table(vec![(0.0, 10.0), (0.5, 20.0)]),
            prefill: None,
        };
        assert!(increasing.validate().is_err());
        assert!(TimingModel::constant(0.0, 10.0).validate().is_err());
        assert!(TimingModel::constant(1.0, 3.0).validate().is_ok());
    }
}
