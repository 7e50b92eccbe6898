use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use specpipe::models::{make_synthetic_pair, AlignmentSpec, ModelHandle, MultimodalPrefix, ScriptSpec};
use specpipe::pipeline::{AcceptanceSemantics, PipelineConfig, PresetFile, Rounding, TimingModel};
use specpipe::primitives::{SeededRng, Vocab};

pub const DEFAULT_PRESET: &str = "llava-ov-7b-72b";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    #[serde(alias = "simulated")]
    Sim,
    Concurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Two-stage parallel draft/verify pipeline.
    #[default]
    Pipeline,
    /// Sequential speculative decoding on the full prefix.
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Pairing {
    Synthetic {
        #[serde(default = "default_vocab")]
        vocab: usize,
        #[serde(default = "default_base")]
        base_alignment: f64,
        #[serde(default = "default_sensitivity")]
        prune_sensitivity: f64,
        #[serde(default = "default_pair_seed")]
        seed: u64,
    },
    Script {
        path: PathBuf,
    },
}

fn default_vocab() -> usize {
    32
}
fn default_base() -> f64 {
    0.95
}
fn default_sensitivity() -> f64 {
    0.02
}
fn default_pair_seed() -> u64 {
    1
}

impl Default for Pairing {
    fn default() -> Self {
        Pairing::Synthetic {
            vocab: default_vocab(),
            base_alignment: default_base(),
            prune_sensitivity: default_sensitivity(),
            seed: default_pair_seed(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefixSpec {
    #[serde(default = "default_video")]
    pub video_tokens: usize,
    #[serde(default = "default_text")]
    pub text_tokens: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_video() -> usize {
    64
}
fn default_text() -> usize {
    8
}

impl Default for PrefixSpec {
    fn default() -> Self {
        Self {
            video_tokens: default_video(),
            text_tokens: default_text(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepVariable {
    Alpha,
    Tau,
    Gamma,
    C,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Tau => "tau",
            Self::Gamma => "gamma",
            Self::C => "c",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub grid: Vec<f64>,
    /// Seeds per point, counting up from the first configured seed. When
    /// absent the configured seed list is used as is.
    #[serde(default)]
    pub repeats: Option<usize>,
    /// Closed-form rows instead of simulation.
    #[serde(default)]
    pub theory: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.grid.is_empty() {
            bail!("sweep grid is empty");
        }
        if self.repeats == Some(0) {
            bail!("repeats must be at least 1");
        }
        for &v in &self.grid {
            let ok = match self.variable {
                SweepVariable::Alpha | SweepVariable::Tau => (0.0..=1.0).contains(&v),
                SweepVariable::Gamma => v >= 1.0 && v.fract() == 0.0,
                SweepVariable::C => v > 0.0 && v.is_finite(),
            };
            if !ok {
                bail!("{} = {v} is out of range", self.variable.name());
            }
        }
        Ok(())
    }
}

/// Everything a run needs. Every field has a default, so an empty JSON
/// object is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub preset: Option<String>,
    /// Explicit timing; takes precedence over `preset`.
    #[serde(default)]
    pub timing: Option<TimingModel>,
    #[serde(default)]
    pub alpha: f64,
    /// Window size; automatic when absent.
    #[serde(default)]
    pub gamma: Option<usize>,
    #[serde(default)]
    pub rounding: Option<Rounding>,
    #[serde(alias = "K", default = "default_k")]
    pub k: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub semantics: AcceptanceSemantics,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub pairing: Pairing,
    #[serde(default)]
    pub prefix: PrefixSpec,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn default_k() -> usize {
    64
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config parses")
    }
}

pub struct Models {
    pub draft: ModelHandle,
    pub target: ModelHandle,
    pub prefix: MultimodalPrefix,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        self.timing()?;
        self.pipeline_config()?.validate()?;
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(())
    }

    pub fn timing(&self) -> anyhow::Result<TimingModel> {
        let timing = match (&self.timing, &self.preset) {
            (Some(t), _) => t.clone(),
            (None, name) => {
                let presets = PresetFile::builtin();
                let name = name.as_deref().unwrap_or(DEFAULT_PRESET);
                presets.get(name)?.timing.clone()
            }
        };
        timing.validate()?;
        Ok(timing)
    }

    /// Rounding from the preset when the config does not set one.
    pub fn rounding(&self) -> anyhow::Result<Option<Rounding>> {
        if self.rounding.is_some() || self.timing.is_some() {
            return Ok(self.rounding);
        }
        let presets = PresetFile::builtin();
        Ok(Some(presets.get(self.preset.as_deref().unwrap_or(DEFAULT_PRESET))?.rounding))
    }

    pub fn pipeline_config(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = PipelineConfig::new(1, self.alpha, self.k).with_semantics(self.semantics);
        cfg.gamma = self.gamma;
        cfg.rounding = self.rounding()?;
        Ok(cfg)
    }

    pub fn gamma(&self) -> anyhow::Result<usize> {
        Ok(self.pipeline_config()?.resolve_gamma(&self.timing()?)?)
    }

    pub fn base_alignment(&self) -> anyhow::Result<f64> {
        match &self.pairing {
            Pairing::Synthetic { base_alignment, .. } => Ok(*base_alignment),
            Pairing::Script { .. } => Err(anyhow!("scripted pairings have no alignment parameter")),
        }
    }

    pub fn set_base_alignment(&mut self, tau: f64) -> anyhow::Result<()> {
        match &mut self.pairing {
            Pairing::Synthetic { base_alignment, .. } => {
                *base_alignment = tau;
                Ok(())
            }
            Pairing::Script { .. } => bail!("cannot sweep tau over a scripted pairing"),
        }
    }

    pub fn models(&self) -> anyhow::Result<Models> {
        let prefix = MultimodalPrefix::synthetic(self.prefix.video_tokens, self.prefix.text_tokens, self.prefix.seed);
        let (draft, target) = match &self.pairing {
            Pairing::Synthetic {
                vocab,
                base_alignment,
                prune_sensitivity,
                seed,
            } => make_synthetic_pair(
                Vocab::new(*vocab)?,
                AlignmentSpec::new(*base_alignment, *prune_sensitivity),
                &mut SeededRng::new(*seed),
            )?,
            Pairing::Script { path } => ModelHandle::scripted_pair(ScriptSpec::load(path)?),
        };
        Ok(Models { draft, target, prefix })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let c = ExperimentConfig::default();
        assert_eq!(c.k, 64);
        assert_eq!(c.seeds, vec![0]);
        c.validate().unwrap();
        assert_eq!(c.gamma().unwrap(), 5);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"alhpa": 0.9}"#).is_err());
    }

    #[test]
    fn sweep_grid_is_checked() {
        let s = SweepSpec {
            variable: SweepVariable::Gamma,
            grid: vec![2.5],
            repeats: None,
            theory: false,
        };
        assert!(s.validate().is_err());
        let s = SweepSpec { grid: vec![], ..s };
        assert!(s.validate().is_err());
    }
}
