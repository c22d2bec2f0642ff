use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::drift::{DriftConfig, DriftToggle};
use crate::error::{ensure, Error, Result};
use crate::grpo::GRPOConfig;
use crate::mdp::DenoisingMDPSpec;
use crate::metrics::EncoderKind;
use crate::policy::{GaussianChainPolicy, MeanParameterization, PretrainConfig, PromptEmbedding, RewardLandscape};

/// Constant per-step noise used when no schedule is given.
pub const DEFAULT_NOISE_SCALE: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub spec: DenoisingMDPSpec,
    pub noise_scale: f64,
    /// Overrides `noise_scale`; entry `t - 1` is `sigma_t`.
    pub noise_scales: Option<Vec<f64>>,
    pub parameterization: MeanParameterization,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            spec: DenoisingMDPSpec::default(),
            noise_scale: DEFAULT_NOISE_SCALE,
            noise_scales: None,
            parameterization: MeanParameterization::PerStep,
        }
    }
}

impl PolicyConfig {
    /// Zero-initialized policy with the configured schedule.
    pub fn build(&self) -> Result<GaussianChainPolicy> {
        let mut p = GaussianChainPolicy::new(self.spec, self.noise_scale, self.parameterization)?;
        if let Some(s) = &self.noise_scales {
            p.noise_scales = s.clone();
            p.validate()?;
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub num_eval_prompts: usize,
    pub samples_per_prompt: usize,
    pub recall_k: usize,
    /// Encoder for `dreamsim_style` diversity, Vendi and recall.
    pub primary_encoder: EncoderKind,
    /// Encoder for `clip_style` diversity.
    pub secondary_encoder: EncoderKind,
    /// RBF bandwidth for Vendi. When absent it is fixed per run to the
    /// median pairwise distance of the pretrained model's eval samples.
    pub vendi_bandwidth: Option<f64>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            num_eval_prompts: 4,
            samples_per_prompt: 40,
            recall_k: 10,
            primary_encoder: EncoderKind::Identity,
            secondary_encoder: EncoderKind::RandomProjection {
                input_dim: 2,
                output_dim: 2,
                seed: 11,
            },
            vendi_bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run_seed: u64,
    pub policy: PolicyConfig,
    pub landscape: RewardLandscape,
    /// Defaults to one-hot embeddings, one per landscape prompt.
    pub prompts: Option<Vec<PromptEmbedding>>,
    pub pretrain: PretrainConfig,
    pub grpo: GRPOConfig,
    pub drift: DriftConfig,
    pub toggles: DriftToggle,
    /// Encoder for the intra-group diversity potential used in shaping.
    pub shaping_encoder: EncoderKind,
    pub epochs: usize,
    pub eval_every: usize,
    pub eval: EvalProtocol,
    /// Stop after the first checkpoint whose eval reward reaches this value.
    pub target_reward: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_seed: 0,
            policy: PolicyConfig::default(),
            landscape: RewardLandscape::hexagon(),
            prompts: None,
            pretrain: PretrainConfig::default(),
            grpo: GRPOConfig::default(),
            drift: DriftConfig::default(),
            toggles: DriftToggle::BASELINE,
            shaping_encoder: EncoderKind::Identity,
            epochs: 100,
            eval_every: 10,
            eval: EvalProtocol::default(),
            target_reward: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn prompt_set(&self) -> Vec<PromptEmbedding> {
        self.prompts.clone().unwrap_or_else(|| {
            PromptEmbedding::one_hot_set(self.landscape.num_prompts(), self.policy.spec.prompt_dim)
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.build()?;
        self.landscape.validate()?;
        self.grpo.validate()?;
        self.drift.validate()?;
        ensure(self.eval_every >= 1, || "eval_every must be at least 1".into())?;
        let d = self.policy.spec.state_dim;
        ensure(self.landscape.mode_centers[0].len() == d, || {
            format!("landscape dimension differs from state_dim {d}")
        })?;
        let prompts = self.prompt_set();
        ensure(!prompts.is_empty(), || "empty prompt set".into())?;
        ensure(
            prompts.iter().all(|p| p.vector.len() == self.policy.spec.prompt_dim),
            || "prompt vectors must match prompt_dim".into(),
        )?;
        ensure(self.eval.num_eval_prompts >= 1, || "num_eval_prompts must be at least 1".into())?;
        ensure(self.eval.samples_per_prompt > self.eval.recall_k, || {
            "samples_per_prompt must exceed recall_k".into()
        })?;
        if let Some(h) = self.eval.vendi_bandwidth {
            ensure(h > 0.0, || "vendi_bandwidth must be positive".into())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.prompt_set().len(), 4);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::default();
        c.toggles = DriftToggle::FULL;
        c.target_reward = Some(0.9);
        c.drift.noise_scale = 0.3;
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_document_keeps_other_defaults() {
        let c = ExperimentConfig::from_json(r#"{"epochs": 3, "grpo": {"group_size": 4}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.grpo.group_size, 4);
        assert_eq!(c.grpo.clip_epsilon, 1e-4);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_json(r#"{"grpo": {"group_size": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"eval": {"samples_per_prompt": 5}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"epochs": "many"}"#).is_err());
    }
}
