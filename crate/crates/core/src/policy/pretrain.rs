//! Supervised pretraining of the chain toward a mixture over active modes.
//!
//! Training pairs come from a Brownian bridge between an independent noise
//! endpoint `x_T ~ N(0, I)` and a clean sample `x_0` drawn from the
//! prompt's mode mixture, with per-step increments of variance `sigma_t^2`.
//! With cumulative variance `S_t = sum_{k<=t} sigma_k^2`, the bridge gives
//!
//! ```text
//! x_t | x_0, x_T ~ N(x_0 + (S_t / S_T)(x_T - x_0), S_t (S_T - S_t) / S_T)
//! E[x_{t-1} | x_t, x_0] = x_t + (sigma_t^2 / S_t)(x_0 - x_t)
//! ```
//!
//! and the mean map is regressed onto that clean-ward target.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::policy::{sample_trajectory, GaussianChainPolicy, PromptEmbedding, RewardLandscape};
use crate::rng::{derive_seed, normal_vec, rng_from_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Std of each mixture component, as a multiple of `mode_width`.
    pub component_std_ratio: f64,
    pub coverage_samples: usize,
    pub coverage_threshold: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 128,
            learning_rate: 0.02,
            component_std_ratio: 0.5,
            coverage_samples: 1000,
            coverage_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub policy: GaussianChainPolicy,
    /// Per prompt: fraction of samples nearest to each active mode.
    pub coverage: Vec<Vec<f64>>,
    pub covered: bool,
    pub warning: Option<String>,
    pub final_loss: f64,
}

/// Fits the mean maps by clean-ward regression, then measures mode
/// coverage of the resulting sampler. Non-coverage is reported through
/// `warning`, not as an error.
pub fn pretrain(
    policy: &GaussianChainPolicy,
    landscape: &RewardLandscape,
    prompts: &[PromptEmbedding],
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    policy.validate()?;
    landscape.validate()?;
    ensure(!prompts.is_empty(), || "pretraining needs prompts".into())?;
    ensure(config.batch_size > 0, || "batch_size must be positive".into())?;

    let mut trained = policy.clone();
    let t_max = policy.spec.horizon;
    let d = policy.spec.state_dim;
    let cumulative: Vec<f64> = std::iter::once(0.0)
        .chain(policy.noise_scales.iter().scan(0.0, |acc, s| {
            *acc += s * s;
            Some(*acc)
        }))
        .collect();
    let total = cumulative[t_max];
    let comp_std = config.component_std_ratio * landscape.mode_width;

    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        trained.num_params(),
    );
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::PRETRAIN]));
    let mut final_loss = 0.0;
    for step in 0..config.steps {
        let mut grad = vec![0.0; trained.num_params()];
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            let prompt = &prompts[rng.random_range(0..prompts.len())];
            let active = landscape.active(prompt.prompt_id);
            let centre = &landscape.mode_centers[active[rng.random_range(0..active.len())]];
            let x0: Vec<f64> = normal_vec(&mut rng, d)
                .iter()
                .zip(centre)
                .map(|(z, c)| c + comp_std * z)
                .collect();
            let x_end = normal_vec(&mut rng, d);
            let t = rng.random_range(1..=t_max);
            let frac = cumulative[t] / total;
            let bridge_std = (cumulative[t] * (total - cumulative[t]) / total).max(0.0).sqrt();
            let x_t: Vec<f64> = normal_vec(&mut rng, d)
                .iter()
                .enumerate()
                .map(|(i, z)| x0[i] + frac * (x_end[i] - x0[i]) + bridge_std * z)
                .collect();
            let pull = trained.sigma(t).powi(2) / cumulative[t];
            let mu = trained.mean(&x_t, &prompt.vector, t);
            let residual: Vec<f64> = (0..d)
                .map(|i| mu[i] - (x_t[i] + pull * (x0[i] - x_t[i])))
                .collect();
            loss += residual.iter().map(|r| r * r).sum::<f64>() * 0.5;
            let coeff: Vec<f64> = residual
                .iter()
                .map(|r| r / config.batch_size as f64)
                .collect();
            trained.accumulate_mean_vjp(&x_t, &prompt.vector, t, &coeff, &mut grad);
        }
        final_loss = loss / config.batch_size as f64;
        // Cosine decay to zero.
        let progress = step as f64 / config.steps as f64;
        let lr = config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.step_with_lr(&mut trained.params, &grad, lr);
    }

    let coverage = measure_coverage(&trained, landscape, prompts, config.coverage_samples, seed);
    let covered = coverage
        .iter()
        .all(|per_prompt| per_prompt.iter().all(|&f| f >= config.coverage_threshold));
    let warning = (!covered).then(|| {
        format!(
            "pretrained sampler leaves a mode below {:.0}% of samples: {:?}",
            100.0 * config.coverage_threshold,
            coverage
        )
    });
    Ok(PretrainOutcome {
        policy: trained,
        coverage,
        covered,
        warning,
        final_loss,
    })
}

/// Per prompt, the nearest-active-mode occupancy of `samples` rollouts.
pub fn measure_coverage(
    policy: &GaussianChainPolicy,
    landscape: &RewardLandscape,
    prompts: &[PromptEmbedding],
    samples: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    prompts
        .iter()
        .map(|p| {
            let xs: Vec<Vec<f64>> = (0..samples)
                .map(|i| {
                    let s = derive_seed(seed, &[stream::PRETRAIN, 1, p.prompt_id as u64, i as u64]);
                    sample_trajectory(policy, p, s).terminal().to_vec()
                })
                .collect();
            landscape.mode_occupancy(&xs, p.prompt_id)
        })
        .collect()
}
