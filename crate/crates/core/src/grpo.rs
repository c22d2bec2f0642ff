//! Group Relative Policy Optimization on the Gaussian chain.
//!
//! Each epoch snapshots the behaviour policy, rolls out
//! `samples_per_epoch / G` groups (cycling through the prompt set), and
//! takes `gradient_updates_per_epoch` AdamW steps, one per contiguous
//! minibatch of groups. Rollouts run on the rayon pool; every reduction is
//! sequential in group order so results do not depend on thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{
    intrinsic_trajectory_reward, merge_advantages, noisy_step_prompts, select_concentrated,
    select_contrasted, DriftConfig, DriftToggle, PromptStats, SelectionMode,
};
use crate::error::{ensure, Error, Result};
use crate::metrics::Encoder;
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::policy::{
    check_same_family, sample_trajectory_conditioned, step_kl_unchecked, GaussianChainPolicy,
    PromptEmbedding, RewardLandscape, Trajectory,
};
use crate::rng::{derive_seed, stream};

pub const DEFAULT_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GRPOConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    /// Applied only when the `kl` toggle is on.
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub samples_per_epoch: usize,
    pub gradient_updates_per_epoch: usize,
    pub std_floor: f64,
}

impl Default for GRPOConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 1e-4,
            kl_beta: 0.001,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            max_grad_norm: 1.0,
            samples_per_epoch: 256,
            gradient_updates_per_epoch: 4,
            std_floor: DEFAULT_STD_FLOOR,
        }
    }
}

impl GRPOConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.group_size >= 2, || "group_size must be at least 2".into())?;
        ensure(self.clip_epsilon > 0.0, || "clip_epsilon must be positive".into())?;
        ensure(self.kl_beta >= 0.0, || "kl_beta must be non-negative".into())?;
        ensure(self.learning_rate >= 0.0, || "learning_rate must be non-negative".into())?;
        ensure(self.max_grad_norm > 0.0, || "max_grad_norm must be positive".into())?;
        ensure(self.samples_per_epoch >= self.group_size, || {
            "samples_per_epoch must hold at least one group".into()
        })?;
        ensure(self.gradient_updates_per_epoch >= 1, || {
            "gradient_updates_per_epoch must be at least 1".into()
        })?;
        ensure(self.std_floor > 0.0, || "std_floor must be positive".into())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// `G` rollouts sharing one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Keeps the members at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Group {
        Group {
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            rewards: indices.iter().map(|&i| self.rewards[i]).collect(),
            advantages: indices.iter().map(|&i| self.advantages[i]).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.is_empty(), || "empty group".into())?;
        ensure(
            self.rewards.len() == self.len() && self.advantages.len() == self.len(),
            || "group vectors have mismatched lengths".into(),
        )?;
        let first = &self.trajectories[0];
        ensure(
            self.trajectories
                .iter()
                .all(|t| t.prompt.prompt_id == first.prompt.prompt_id && t.horizon() == first.horizon()),
            || "group members differ in prompt or horizon".into(),
        )
    }
}

fn chain_seed(seed: u64, prompt_id: usize, index: usize) -> u64 {
    derive_seed(seed, &[stream::ROLLOUT, prompt_id as u64, index as u64])
}

/// Samples `group_size` trajectories from `policy` and scores them.
pub fn rollout_group(
    policy: &GaussianChainPolicy,
    prompt: &PromptEmbedding,
    landscape: &RewardLandscape,
    config: &GRPOConfig,
    seed: u64,
) -> Group {
    let trajectories: Vec<Trajectory> = (0..config.group_size)
        .map(|i| {
            let clean = vec![prompt.vector.clone(); policy.spec.horizon];
            score(
                sample_trajectory_conditioned(policy, prompt, chain_seed(seed, prompt.prompt_id, i), clean),
                landscape,
            )
        })
        .collect();
    finish_group(trajectories)
}

fn score(mut traj: Trajectory, landscape: &RewardLandscape) -> Trajectory {
    traj.terminal_reward = landscape.reward(traj.terminal(), traj.prompt.prompt_id);
    traj
}

fn finish_group(trajectories: Vec<Trajectory>) -> Group {
    let rewards: Vec<f64> = trajectories.iter().map(|t| t.terminal_reward).collect();
    let n = rewards.len();
    Group {
        trajectories,
        rewards,
        advantages: vec![0.0; n],
    }
}

/// `(r - mean) / std` with population std, or all zeros when the spread is
/// at most `std_floor`.
pub fn compute_advantages_with_floor(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > std_floor) {
        return vec![0.0; n];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    compute_advantages_with_floor(rewards, DEFAULT_STD_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SurrogateDiagnostics {
    /// Fraction of `(i, t)` terms with `|rho - 1| > epsilon`.
    pub clip_fraction: f64,
    /// Mean over trajectories of the summed per-step KL to the reference.
    pub mean_kl: f64,
    pub mean_ratio: f64,
}

/// Loss
/// `-(1/G) sum_i sum_t [min(rho A_i, clip(rho, 1 - eps, 1 + eps) A_i) - beta KL_t]`
/// and its gradient. Terms on the clipped branch contribute no gradient.
pub fn clipped_surrogate(
    policy: &GaussianChainPolicy,
    ref_policy: &GaussianChainPolicy,
    group: &Group,
    config: &GRPOConfig,
) -> Result<(f64, Vec<f64>, SurrogateDiagnostics)> {
    clipped_surrogate_with_beta(policy, ref_policy, group, config.clip_epsilon, config.kl_beta)
}

pub fn clipped_surrogate_with_beta(
    policy: &GaussianChainPolicy,
    ref_policy: &GaussianChainPolicy,
    group: &Group,
    epsilon: f64,
    beta: f64,
) -> Result<(f64, Vec<f64>, SurrogateDiagnostics)> {
    group.validate()?;
    if beta != 0.0 {
        check_same_family(policy, ref_policy)?;
    }
    for traj in &group.trajectories {
        policy.check_trajectory(traj)?;
    }
    let g = group.len() as f64;
    let t_max = policy.spec.horizon;
    let mut grad = vec![0.0; policy.num_params()];
    let mut loss = 0.0;
    let mut clipped = 0usize;
    let mut kl_total = 0.0;
    let mut ratio_total = 0.0;
    for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
        for s in 0..t_max {
            let t = t_max - s;
            let (x, c, x_prev) = (&traj.states[s], &traj.step_prompts[s], &traj.states[s + 1]);
            let logp = policy.step_log_density(x, c, t, x_prev);
            let rho = (logp - traj.step_logps[s]).exp();
            ratio_total += rho;
            let clipped_rho = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
            if clipped_rho != rho {
                clipped += 1;
            }
            let unclipped = rho * adv;
            let term = unclipped.min(clipped_rho * adv);
            loss -= term / g;
            let active = if adv > 0.0 {
                rho <= 1.0 + epsilon
            } else if adv < 0.0 {
                rho >= 1.0 - epsilon
            } else {
                false
            };
            if active {
                policy.accumulate_step_score(x, c, t, x_prev, -adv * rho / g, &mut grad);
            }
            if beta != 0.0 {
                let kl = step_kl_unchecked(policy, ref_policy, x, c, t);
                kl_total += kl;
                loss += beta * kl / g;
                let mu = policy.mean(x, c, t);
                let mu_ref = ref_policy.mean(x, c, t);
                let var = policy.sigma(t).powi(2);
                let coeff: Vec<f64> = mu.iter().zip(&mu_ref).map(|(a, b)| beta * (a - b) / (var * g)).collect();
                policy.accumulate_mean_vjp(x, c, t, &coeff, &mut grad);
            }
        }
    }
    let terms = (group.len() * t_max) as f64;
    Ok((
        loss,
        grad,
        SurrogateDiagnostics {
            clip_fraction: clipped as f64 / terms,
            mean_kl: kl_total / g,
            mean_ratio: ratio_total / terms,
        },
    ))
}

/// Everything `train_epoch` needs beyond plain GRPO.
#[derive(Debug, Clone)]
pub struct Mechanisms {
    pub toggles: DriftToggle,
    pub drift: DriftConfig,
    /// Clean prompt-set statistics for rescaling noisy embeddings.
    pub prompt_stats: PromptStats,
    /// Encoder for the intra-group diversity potential.
    pub encoder: Encoder,
    pub discount_gamma: f64,
}

impl Mechanisms {
    pub fn baseline() -> Self {
        Self {
            toggles: DriftToggle::BASELINE,
            drift: DriftConfig::default(),
            prompt_stats: PromptStats { mean: 0.0, std: 1.0 },
            encoder: Encoder::Identity,
            discount_gamma: 1.0,
        }
    }

    pub fn selection_mode(&self) -> SelectionMode {
        if self.toggles.selection {
            self.drift.selection_mode
        } else {
            SelectionMode::Off
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Over every rolled-out sample, including pool members that were not
    /// selected.
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    /// Mean pre-clipping gradient norm across the epoch's updates.
    pub grad_norm: f64,
    pub mean_intrinsic_reward: f64,
    /// Fraction of intrinsic rewards sitting at the upper bound.
    pub intrinsic_clip_fraction: f64,
    pub selection_mode: String,
    #[serde(skip)]
    pub intrinsic_min: f64,
    #[serde(skip)]
    pub intrinsic_max: f64,
    #[serde(skip)]
    pub rescale_fallbacks: usize,
}

struct BuiltGroup {
    group: Group,
    pool_rewards: Vec<f64>,
    intrinsic: Vec<f64>,
    rescale_skipped: bool,
}

fn build_group(
    behaviour: &GaussianChainPolicy,
    prompt: &PromptEmbedding,
    landscape: &RewardLandscape,
    config: &GRPOConfig,
    mech: &Mechanisms,
    seed: u64,
    group_index: usize,
) -> Result<BuiltGroup> {
    let g = config.group_size;
    let pool = if mech.toggles.selection {
        g * mech.drift.pool_multiplier
    } else {
        g
    };
    let horizon = behaviour.spec.horizon;
    let mut rescale_skipped = false;
    let mut trajectories = Vec::with_capacity(pool);
    for i in 0..pool {
        let step_prompts = if mech.toggles.prompt_noise {
            let noise_seed = derive_seed(seed, &[stream::PROMPT_NOISE, group_index as u64, i as u64]);
            let (sp, skipped) = noisy_step_prompts(prompt, horizon, &mech.drift, mech.prompt_stats, noise_seed)?;
            rescale_skipped |= skipped;
            sp
        } else {
            vec![prompt.vector.clone(); horizon]
        };
        let cs = derive_seed(seed, &[stream::ROLLOUT, group_index as u64, i as u64]);
        trajectories.push(score(
            sample_trajectory_conditioned(behaviour, prompt, cs, step_prompts),
            landscape,
        ));
    }
    let full = finish_group(trajectories);
    let pool_rewards = full.rewards.clone();
    let mut group = match mech.selection_mode() {
        SelectionMode::Off => full,
        SelectionMode::Concentrated => full.subset(&select_concentrated(&full.rewards, g)?.chosen_indices),
        SelectionMode::Contrasted => full.subset(&select_contrasted(&full.rewards, g)?.chosen_indices),
    };
    group.advantages = compute_advantages_with_floor(&group.rewards, config.std_floor);
    let mut intrinsic = Vec::new();
    if mech.toggles.shaping {
        intrinsic = intrinsic_trajectory_reward(&group, mech.discount_gamma, &mech.encoder, &mech.drift)?;
        let a_int = compute_advantages_with_floor(&intrinsic, config.std_floor);
        group.advantages = merge_advantages(&group.advantages, &a_int, mech.drift.shaping_lambda)?;
    }
    Ok(BuiltGroup {
        group,
        pool_rewards,
        intrinsic,
        rescale_skipped,
    })
}

/// One epoch of sampling and `gradient_updates_per_epoch` optimizer steps.
/// `policy` is the behaviour snapshot for the epoch; the updated policy is
/// returned alongside the epoch statistics.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    policy: &GaussianChainPolicy,
    optimizer: &mut AdamW,
    ref_policy: &GaussianChainPolicy,
    prompts: &[PromptEmbedding],
    landscape: &RewardLandscape,
    config: &GRPOConfig,
    seed: u64,
    mechanisms: &Mechanisms,
    epoch: usize,
) -> Result<(GaussianChainPolicy, EpochStats)> {
    config.validate()?;
    ensure(!prompts.is_empty(), || "no prompts".into())?;
    if mechanisms.toggles.selection || mechanisms.toggles.prompt_noise {
        mechanisms.drift.validate()?;
    }
    let beta = if mechanisms.toggles.kl { config.kl_beta } else { 0.0 };
    let n_groups = config.samples_per_epoch / config.group_size;
    let behaviour = policy.clone();

    let built: Vec<BuiltGroup> = (0..n_groups)
        .into_par_iter()
        .map(|j| build_group(&behaviour, &prompts[j % prompts.len()], landscape, config, mechanisms, seed, j))
        .collect::<Result<_>>()?;

    let mut reward_sum = 0.0;
    let mut reward_count = 0usize;
    let mut intrinsic_all = Vec::new();
    let mut rescale_fallbacks = 0;
    for b in &built {
        reward_sum += b.pool_rewards.iter().sum::<f64>();
        reward_count += b.pool_rewards.len();
        intrinsic_all.extend_from_slice(&b.intrinsic);
        rescale_fallbacks += b.rescale_skipped as usize;
    }
    let groups: Vec<Group> = built.into_iter().map(|b| b.group).collect();

    let updates = config.gradient_updates_per_epoch.min(groups.len());
    let mut current = policy.clone();
    let mut grad_norm_sum = 0.0;
    let mut clip_sum = 0.0;
    let mut kl_sum = 0.0;
    for u in 0..updates {
        let lo = u * groups.len() / updates;
        let hi = (u + 1) * groups.len() / updates;
        let batch = &groups[lo..hi];
        let parts: Vec<(f64, Vec<f64>, SurrogateDiagnostics)> = batch
            .par_iter()
            .map(|g| clipped_surrogate_with_beta(&current, ref_policy, g, config.clip_epsilon, beta))
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; current.num_params()];
        let mut loss = 0.0;
        for (l, gr, diag) in &parts {
            loss += l * scale;
            for (a, b) in grad.iter_mut().zip(gr) {
                *a += b * scale;
            }
            clip_sum += diag.clip_fraction * scale;
            kl_sum += diag.mean_kl * scale;
        }
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                epoch,
                update: u,
                detail: format!("loss {loss}, mean reward {:.4}", reward_sum / reward_count as f64),
            });
        }
        grad_norm_sum += clip_global_norm(&mut grad, config.max_grad_norm);
        optimizer.step(&mut current.params, &grad);
        if current.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                epoch,
                update: u,
                detail: "parameters became non-finite".into(),
            });
        }
    }

    let n_int = intrinsic_all.len();
    let sigma = mechanisms.drift.intrinsic_clip_sigma;
    let stats = EpochStats {
        epoch,
        mean_reward: reward_sum / reward_count as f64,
        mean_kl: kl_sum / updates as f64,
        clip_fraction: clip_sum / updates as f64,
        grad_norm: grad_norm_sum / updates as f64,
        mean_intrinsic_reward: if n_int == 0 {
            0.0
        } else {
            intrinsic_all.iter().sum::<f64>() / n_int as f64
        },
        intrinsic_clip_fraction: if n_int == 0 {
            0.0
        } else {
            intrinsic_all.iter().filter(|&&v| v >= sigma).count() as f64 / n_int as f64
        },
        selection_mode: mechanisms.selection_mode().as_str().to_string(),
        intrinsic_min: intrinsic_all.iter().copied().fold(f64::INFINITY, f64::min),
        intrinsic_max: intrinsic_all.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        rescale_fallbacks,
    };
    Ok((current, stats))
}
