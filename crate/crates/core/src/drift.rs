//! The three diversity interventions layered on top of GRPO.
//!
//! - Reward-concentrated (or contrasted) subset selection from a `2G` pool.
//! - Annealed Gaussian noise on the prompt embedding fed to each denoising
//!   step, followed by statistics-preserving rescaling.
//! - Potential-based diversity shaping: the shaped return telescopes to
//!   `gamma^T d(x_0)`, which is clipped to `[0, sigma]` and standardized
//!   separately before merging with the extrinsic advantage.
//!
//! Time convention for the prompt-noise schedule: `t_norm = t / T` where
//! `t` is the timestep of the state being denoised, so the first step out of
//! `x_T` sees `t_norm = 1` (`anneal_gamma = 0`, pure noise) and the last step
//! sees `t_norm = 1 / T`. `invert_time` flips this to `1 - t / T`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grpo::Group;
use crate::metrics::{pairwise_diversity, Encoder};
use crate::policy::PromptEmbedding;
use crate::rng::{normal_vec, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Off,
    #[default]
    Concentrated,
    Contrasted,
}

impl SelectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::Off => "off",
            SelectionMode::Concentrated => "concentrated",
            SelectionMode::Contrasted => "contrasted",
        }
    }
}

/// Which interventions are active. All off is plain GRPO; `kl` alone is
/// GRPO-KL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DriftToggle {
    pub selection: bool,
    pub prompt_noise: bool,
    pub shaping: bool,
    pub kl: bool,
}

impl DriftToggle {
    pub const BASELINE: Self = Self {
        selection: false,
        prompt_noise: false,
        shaping: false,
        kl: false,
    };

    pub const GRPO_KL: Self = Self {
        kl: true,
        ..Self::BASELINE
    };

    pub const FULL: Self = Self {
        selection: true,
        prompt_noise: true,
        shaping: true,
        kl: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub shaping_lambda: f64,
    pub intrinsic_clip_sigma: f64,
    pub noise_scale: f64,
    pub anneal_tau1: f64,
    pub anneal_tau2: f64,
    pub rescale_psi: f64,
    pub selection_mode: SelectionMode,
    pub pool_multiplier: usize,
    pub invert_time: bool,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            shaping_lambda: 0.5,
            intrinsic_clip_sigma: 1.0,
            noise_scale: 0.05,
            anneal_tau1: 0.4,
            anneal_tau2: 1.0,
            rescale_psi: 1.0,
            selection_mode: SelectionMode::Concentrated,
            pool_multiplier: 2,
            invert_time: false,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.anneal_tau1 < self.anneal_tau2, || {
            format!("anneal_tau1 {} must be below anneal_tau2 {}", self.anneal_tau1, self.anneal_tau2)
        })?;
        ensure((0.0..=1.0).contains(&self.anneal_tau1) && self.anneal_tau2 <= 1.0, || {
            "annealing thresholds must lie in [0, 1]".into()
        })?;
        ensure(self.intrinsic_clip_sigma > 0.0, || "intrinsic_clip_sigma must be positive".into())?;
        ensure((0.0..=1.0).contains(&self.rescale_psi), || "rescale_psi must lie in [0, 1]".into())?;
        ensure(self.noise_scale >= 0.0, || "noise_scale must be non-negative".into())?;
        ensure(self.pool_multiplier == 2, || "pool_multiplier is fixed at 2".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Sorted ascending.
    pub chosen_indices: Vec<usize>,
    pub reference_index: usize,
    pub score: f64,
}

/// `D_ij = |r_i - r_j|`.
pub fn reward_distance_matrix(rewards: &[f64]) -> Result<Vec<Vec<f64>>> {
    ensure(rewards.len() >= 4 && rewards.len() % 2 == 0, || {
        format!("pool size must be even and at least 4, got {}", rewards.len())
    })?;
    Ok(distance_matrix(rewards))
}

fn distance_matrix(rewards: &[f64]) -> Vec<Vec<f64>> {
    rewards
        .iter()
        .map(|a| rewards.iter().map(|b| (a - b).abs()).collect())
        .collect()
}

/// Neighbours of `i` ordered by distance, nearest first; equal distances go
/// to the lower index.
fn ranked_neighbours(d: &[Vec<f64>], i: usize, farthest: bool) -> Vec<usize> {
    let mut others: Vec<usize> = (0..d.len()).filter(|&j| j != i).collect();
    others.sort_by(|&a, &b| {
        let ord = if farthest {
            d[i][b].total_cmp(&d[i][a])
        } else {
            d[i][a].total_cmp(&d[i][b])
        };
        ord.then(a.cmp(&b))
    });
    others
}

fn select(rewards: &[f64], g: usize, farthest: bool) -> Result<SelectionResult> {
    ensure(g >= 1 && rewards.len() >= g, || {
        format!("cannot pick {g} of {} candidates", rewards.len())
    })?;
    ensure(rewards.iter().all(|r| r.is_finite()), || "non-finite reward in pool".into())?;
    let d = distance_matrix(rewards);
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for i in 0..rewards.len() {
        let nbrs: Vec<usize> = ranked_neighbours(&d, i, farthest).into_iter().take(g - 1).collect();
        let score: f64 = nbrs.iter().map(|&j| d[i][j]).sum();
        let better = match &best {
            None => true,
            Some((_, s, _)) => {
                if farthest {
                    score > *s
                } else {
                    score < *s
                }
            }
        };
        if better {
            best = Some((i, score, nbrs));
        }
    }
    let (reference_index, score, nbrs) = best.expect("non-empty pool");
    let mut chosen_indices = nbrs;
    chosen_indices.push(reference_index);
    chosen_indices.sort_unstable();
    Ok(SelectionResult {
        chosen_indices,
        reference_index,
        score,
    })
}

/// Reference `i* = argmin_i s_i` with `s_i` the summed distance to the
/// `G - 1` nearest rewards, plus those neighbours.
pub fn select_concentrated(rewards: &[f64], g: usize) -> Result<SelectionResult> {
    select(rewards, g, false)
}

/// Reference `i* = argmax_i t_i` with `t_i` the summed distance to the
/// `G - 1` farthest rewards, plus those neighbours.
pub fn select_contrasted(rewards: &[f64], g: usize) -> Result<SelectionResult> {
    select(rewards, g, true)
}

/// Piecewise-linear schedule: 1 up to `tau1`, linear down to 0 at `tau2`.
pub fn anneal_gamma(t_norm: f64, tau1: f64, tau2: f64) -> Result<f64> {
    ensure(tau1 < tau2, || format!("tau1 {tau1} must be below tau2 {tau2}"))?;
    ensure((0.0..=1.0).contains(&t_norm), || format!("t_norm {t_norm} outside [0, 1]"))?;
    Ok(if t_norm <= tau1 {
        1.0
    } else if t_norm >= tau2 {
        0.0
    } else {
        (tau2 - t_norm) / (tau2 - tau1)
    })
}

/// Scalar mean and population std over every entry of the clean prompt set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptStats {
    pub mean: f64,
    pub std: f64,
}

impl PromptStats {
    pub fn from_prompts(prompts: &[PromptEmbedding]) -> Result<Self> {
        let values: Vec<f64> = prompts.iter().flat_map(|p| p.vector.iter().copied()).collect();
        ensure(!values.is_empty(), || "empty prompt set".into())?;
        let (mean, std) = mean_std(&values);
        Ok(Self { mean, std })
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedPrompt {
    pub vector: Vec<f64>,
    /// Set when rescaling was requested but the noisy embedding had zero
    /// spread.
    pub rescale_skipped: bool,
}

/// `e~ = sqrt(gamma) e + s sqrt(1 - gamma) n`, then
/// `psi * rescale(e~) + (1 - psi) * e~` with rescaling onto `stats`.
pub fn perturb_prompt(
    e: &PromptEmbedding,
    t_norm: f64,
    config: &DriftConfig,
    stats: PromptStats,
    seed: u64,
) -> Result<PerturbedPrompt> {
    let gamma = anneal_gamma(t_norm, config.anneal_tau1, config.anneal_tau2)?;
    let psi = config.rescale_psi;
    ensure(psi == 0.0 || stats.std > 0.0, || {
        "prompt statistics need a positive std when rescaling".into()
    })?;
    let noise_w = config.noise_scale * (1.0 - gamma).sqrt();
    let keep = gamma.sqrt();
    let noisy: Vec<f64> = if noise_w == 0.0 {
        e.vector.iter().map(|v| keep * v).collect()
    } else {
        let mut rng = rng_from_seed(seed);
        let n = normal_vec(&mut rng, e.vector.len());
        e.vector.iter().zip(&n).map(|(v, z)| keep * v + noise_w * z).collect()
    };
    if psi == 0.0 {
        return Ok(PerturbedPrompt {
            vector: noisy,
            rescale_skipped: false,
        });
    }
    let (m, sd) = mean_std(&noisy);
    if !(sd > 0.0) || !sd.is_finite() {
        return Ok(PerturbedPrompt {
            vector: noisy,
            rescale_skipped: true,
        });
    }
    let vector = noisy
        .iter()
        .map(|v| psi * ((v - m) / sd * stats.std + stats.mean) + (1.0 - psi) * v)
        .collect();
    Ok(PerturbedPrompt {
        vector,
        rescale_skipped: false,
    })
}

/// Normalized time seen by the step that denoises `x_t`.
pub fn step_time(t: usize, horizon: usize, invert_time: bool) -> f64 {
    let tau = t as f64 / horizon as f64;
    if invert_time {
        1.0 - tau
    } else {
        tau
    }
}

/// Per-step conditioning vectors for one rollout. Step `s` denoises
/// timestep `T - s` and draws its noise from substream `(seed, s)`. The
/// caller keeps `seed` apart from the chain seed so that rollouts with and
/// without prompt noise share their chain noise.
pub fn noisy_step_prompts(
    e: &PromptEmbedding,
    horizon: usize,
    config: &DriftConfig,
    stats: PromptStats,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, bool)> {
    let mut skipped = false;
    let mut out = Vec::with_capacity(horizon);
    for s in 0..horizon {
        let t_norm = step_time(horizon - s, horizon, config.invert_time);
        let p = perturb_prompt(e, t_norm, config, stats, crate::rng::derive_seed(seed, &[s as u64]))?;
        skipped |= p.rescale_skipped;
        out.push(p.vector);
    }
    Ok((out, skipped))
}

/// `clip(discount^T d(x_0^i), 0, sigma)` from terminal states only; the
/// initial noise is taken to carry zero diversity.
pub fn intrinsic_trajectory_reward(
    group: &Group,
    discount_gamma: f64,
    encoder: &Encoder,
    config: &DriftConfig,
) -> Result<Vec<f64>> {
    ensure(group.trajectories.len() >= 2, || {
        "intrinsic reward needs at least 2 samples per group".into()
    })?;
    let terminals: Vec<Vec<f64>> = group.trajectories.iter().map(|t| t.terminal().to_vec()).collect();
    let horizon = group.trajectories[0].horizon();
    let div = pairwise_diversity(&terminals, encoder)?;
    let discount = discount_gamma.powi(horizon as i32);
    Ok(div
        .per_sample
        .iter()
        .map(|d| (discount * d).clamp(0.0, config.intrinsic_clip_sigma))
        .collect())
}

/// Explicit discounted sum of per-step shaping terms
/// `sum_k gamma^k (gamma d_{k+1} - d_k)` over `potentials = d(x_T), ..., d(x_0)`
/// next to the closed form `gamma^T d(x_0) - d(x_T)`.
pub fn telescoping_check(potentials: &[f64], discount_gamma: f64) -> Result<(f64, f64)> {
    ensure(potentials.len() >= 2, || "need at least d(x_T) and d(x_0)".into())?;
    let horizon = potentials.len() - 1;
    let mut stepwise = 0.0;
    let mut weight = 1.0;
    for k in 0..horizon {
        stepwise += weight * (discount_gamma * potentials[k + 1] - potentials[k]);
        weight *= discount_gamma;
    }
    let closed = discount_gamma.powi(horizon as i32) * potentials[horizon] - potentials[0];
    Ok((stepwise, closed))
}

/// `A + lambda * A_int`.
pub fn merge_advantages(a: &[f64], a_int: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if a.len() != a_int.len() {
        return Err(Error::Dimension(format!(
            "advantage lengths differ: {} vs {}",
            a.len(),
            a_int.len()
        )));
    }
    Ok(a.iter().zip(a_int).map(|(x, y)| x + lambda * y).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::Group;
    use crate::policy::Trajectory;

    #[test]
    fn distance_matrix_cases() {
        let d = reward_distance_matrix(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(d[0][1], 1.0);
        assert_eq!(d[0][3], 3.0);
        assert!((0..4).all(|i| d[i][i] == 0.0));
        let z = reward_distance_matrix(&[0.3; 4]).unwrap();
        assert!(z.iter().flatten().all(|&v| v == 0.0));
        assert!(reward_distance_matrix(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn selection_examples() {
        let r = [0.1, 0.5, 0.52, 0.9];
        let c = select_concentrated(&r, 2).unwrap();
        assert_eq!(c.chosen_indices, vec![1, 2]);
        assert_eq!(c.reference_index, 1);
        assert!((c.score - 0.02).abs() < 1e-12);
        let f = select_contrasted(&r, 2).unwrap();
        assert_eq!(f.chosen_indices, vec![0, 3]);
        assert_eq!(select_concentrated(&[0.4; 6], 3).unwrap().chosen_indices, vec![0, 1, 2]);
        assert_eq!(select_contrasted(&[0.4; 6], 3).unwrap().chosen_indices, vec![0, 1, 2]);
    }

    #[test]
    fn anneal_examples() {
        assert_eq!(anneal_gamma(0.2, 0.4, 1.0).unwrap(), 1.0);
        assert_eq!(anneal_gamma(1.0, 0.4, 1.0).unwrap(), 0.0);
        assert!((anneal_gamma(0.7, 0.4, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(anneal_gamma(0.5, 0.6, 0.6).is_err());
    }

    fn prompt() -> PromptEmbedding {
        PromptEmbedding::new(0, vec![0.3, -1.2, 0.8, 2.0]).unwrap()
    }

    #[test]
    fn zero_noise_scale_only_shrinks() {
        let cfg = DriftConfig {
            noise_scale: 0.0,
            rescale_psi: 0.0,
            ..Default::default()
        };
        let stats = PromptStats { mean: 0.0, std: 1.0 };
        let out = perturb_prompt(&prompt(), 0.7, &cfg, stats, 9).unwrap();
        let k = 0.5f64.sqrt();
        for (a, b) in out.vector.iter().zip(&prompt().vector) {
            assert_eq!(*a, k * b);
        }
    }

    #[test]
    fn clean_schedule_end_is_identity_without_rescale() {
        let cfg = DriftConfig {
            rescale_psi: 0.0,
            ..Default::default()
        };
        let stats = PromptStats { mean: 0.0, std: 1.0 };
        let out = perturb_prompt(&prompt(), 0.1, &cfg, stats, 9).unwrap();
        assert_eq!(out.vector, prompt().vector);
    }

    #[test]
    fn full_rescale_hits_target_moments() {
        let cfg = DriftConfig::default();
        let stats = PromptStats { mean: 0.25, std: 0.4 };
        for t in [0.1, 0.5, 0.8, 1.0] {
            let out = perturb_prompt(&prompt(), t, &cfg, stats, 3).unwrap();
            let (m, s) = mean_std(&out.vector);
            assert!((m - 0.25).abs() < 1e-9 && (s - 0.4).abs() < 1e-9);
        }
    }

    #[test]
    fn pure_noise_has_noise_scale_std() {
        let cfg = DriftConfig {
            rescale_psi: 0.0,
            noise_scale: 0.05,
            ..Default::default()
        };
        let stats = PromptStats { mean: 0.0, std: 1.0 };
        let e = PromptEmbedding::new(0, vec![1.0]).unwrap();
        let draws: Vec<f64> = (0..100_000u64)
            .map(|seed| perturb_prompt(&e, 1.0, &cfg, stats, seed).unwrap().vector[0])
            .collect();
        let (_, s) = mean_std(&draws);
        assert!((s / 0.05 - 1.0).abs() < 0.02, "{s}");
    }

    #[test]
    fn zero_spread_falls_back() {
        let cfg = DriftConfig {
            noise_scale: 0.0,
            ..Default::default()
        };
        let stats = PromptStats { mean: 0.0, std: 1.0 };
        let e = PromptEmbedding::new(0, vec![2.0, 2.0]).unwrap();
        let out = perturb_prompt(&e, 0.0, &cfg, stats, 1).unwrap();
        assert!(out.rescale_skipped);
        assert_eq!(out.vector, vec![2.0, 2.0]);
    }

    #[test]
    fn schedule_orientation() {
        assert_eq!(step_time(10, 10, false), 1.0);
        assert_eq!(step_time(10, 10, true), 0.0);
        assert!((step_time(3, 10, false) - 0.3).abs() < 1e-15);
    }

    fn group_with_terminals(xs: &[Vec<f64>]) -> Group {
        let p = PromptEmbedding::new(0, vec![1.0]).unwrap();
        let trajectories = xs
            .iter()
            .map(|x| Trajectory {
                states: vec![vec![0.0; x.len()], x.clone()],
                step_logps: vec![0.0],
                step_prompts: vec![p.vector.clone()],
                prompt: p.clone(),
                terminal_reward: 0.0,
                rng_seed: 0,
            })
            .collect();
        Group {
            trajectories,
            rewards: vec![0.0; xs.len()],
            advantages: vec![0.0; xs.len()],
        }
    }

    #[test]
    fn intrinsic_examples() {
        let cfg = DriftConfig::default();
        let same = group_with_terminals(&vec![vec![1.0, 1.0]; 3]);
        assert_eq!(
            intrinsic_trajectory_reward(&same, 1.0, &Encoder::Identity, &cfg).unwrap(),
            vec![0.0; 3]
        );
        // d = 0.7 for both samples of a pair at squared distance 0.7.
        let pair = group_with_terminals(&[vec![0.0], vec![0.7f64.sqrt()]]);
        let r = intrinsic_trajectory_reward(&pair, 1.0, &Encoder::Identity, &cfg).unwrap();
        assert!((r[0] - 0.7).abs() < 1e-12);
        let far = group_with_terminals(&[vec![0.0], vec![5.0f64.sqrt()]]);
        assert_eq!(intrinsic_trajectory_reward(&far, 1.0, &Encoder::Identity, &cfg).unwrap(), vec![1.0, 1.0]);
        let lone = group_with_terminals(&[vec![0.0]]);
        assert!(intrinsic_trajectory_reward(&lone, 1.0, &Encoder::Identity, &cfg).is_err());
    }

    #[test]
    fn telescoping_examples() {
        let (a, b) = telescoping_check(&[2.0; 11], 1.0).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
        let (a, b) = telescoping_check(&[0.0, 0.3, -0.2, 1.5], 1.0).unwrap();
        assert!((a - 1.5).abs() < 1e-15 && (b - 1.5).abs() < 1e-15);
    }

    #[test]
    fn merge_examples() {
        assert_eq!(merge_advantages(&[1.0, -1.0], &[-1.0, 1.0], 0.5).unwrap(), vec![0.5, -0.5]);
        assert_eq!(merge_advantages(&[0.2, 0.3], &[9.0, 9.0], 0.0).unwrap(), vec![0.2, 0.3]);
        assert!(merge_advantages(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        DriftConfig::default().validate().unwrap();
        let bad = DriftConfig {
            anneal_tau1: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
