//! The desk-scale generative model: a multi-step Gaussian denoising chain.
//!
//! Sampling starts from `x_T ~ N(0, I)` and applies `T` reverse transitions
//! `x_{t-1} ~ N(mu_theta(x_t, c, t), sigma_t^2 I)`. The mean is affine in a
//! feature vector of the current state and prompt embedding, so log-densities
//! and their parameter gradients are available in closed form.
//!
//! Trajectories are indexed by *step* `s = 0..T`: `states[0]` is `x_T`,
//! `states[T]` is `x_0`, and step `s` performs the transition at timestep
//! `t = T - s`.

mod landscape;
mod pretrain;

pub use landscape::{evaluate_reward, RewardLandscape};
pub use pretrain::{measure_coverage, pretrain, PretrainConfig, PretrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::mdp::DenoisingMDPSpec;
use crate::rng::{normal_vec, rng_from_seed};

pub const POLICY_FORMAT_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// How the per-timestep mean map is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanParameterization {
    /// Independent `(W_t, b_t)` per timestep acting on `[x_t ; c]`.
    #[default]
    PerStep,
    /// One `(W, b)` shared across timesteps acting on
    /// `[x_t ; c ; sin(pi f t/T) ; cos(pi f t/T)]` for `f = 1..=frequencies`.
    SharedSinusoidal { frequencies: usize },
    /// Independent `(W_t, b_t)` per timestep acting on
    /// `[x_t ; c ; tanh(x_t / l_k)]` with widths `l_k = 0.25 * 2^k`,
    /// `k = 0..widths`. The mean stays linear in the parameters but the
    /// chain can split mass between basins, so the sampler can be
    /// multimodal.
    PerStepTanh { widths: usize },
}

/// Smallest tanh width of [`MeanParameterization::PerStepTanh`].
pub const TANH_BASE_WIDTH: f64 = 0.25;

/// A prompt embedding `e` with its integer label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub prompt_id: usize,
    pub vector: Vec<f64>,
}

impl PromptEmbedding {
    pub fn new(prompt_id: usize, vector: Vec<f64>) -> Result<Self> {
        ensure(vector.iter().all(|v| v.is_finite()), || {
            format!("prompt {prompt_id} has non-finite entries")
        })?;
        Ok(Self { prompt_id, vector })
    }

    /// `count` one-hot prompts of dimension `dim` (ids `0..count`).
    pub fn one_hot_set(count: usize, dim: usize) -> Vec<Self> {
        (0..count)
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[i % dim] = 1.0;
                Self {
                    prompt_id: i,
                    vector: v,
                }
            })
            .collect()
    }
}

/// One denoising rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `x_T, x_{T-1}, ..., x_0`
    pub states: Vec<Vec<f64>>,
    /// `log pi(x_{t-1} | x_t, c)` under the policy that sampled the rollout.
    pub step_logps: Vec<f64>,
    /// Conditioning vector fed to the mean map at each step. Equal to the
    /// clean prompt embedding unless prompt noise was applied.
    pub step_prompts: Vec<Vec<f64>>,
    pub prompt: PromptEmbedding,
    pub terminal_reward: f64,
    pub rng_seed: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.step_logps.len()
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least x_T")
    }

    pub fn initial(&self) -> &[f64] {
        &self.states[0]
    }
}

/// `pi_theta(x_{t-1} | x_t, c) = N(W_t f(x_t, c, t) + b_t, sigma_t^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianChainPolicy {
    #[serde(default = "format_version")]
    pub version: u32,
    pub spec: DenoisingMDPSpec,
    /// `sigma_t` for timestep `t` at index `t - 1`.
    pub noise_scales: Vec<f64>,
    #[serde(default)]
    pub parameterization: MeanParameterization,
    pub params: Vec<f64>,
}

fn format_version() -> u32 {
    POLICY_FORMAT_VERSION
}

impl GaussianChainPolicy {
    /// Zero-initialized policy with constant noise `sigma`.
    pub fn new(spec: DenoisingMDPSpec, sigma: f64, parameterization: MeanParameterization) -> Result<Self> {
        spec.validate()?;
        let mut policy = Self {
            version: POLICY_FORMAT_VERSION,
            spec,
            noise_scales: vec![sigma; spec.horizon],
            parameterization,
            params: Vec::new(),
        };
        policy.params = vec![0.0; policy.num_params()];
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.noise_scales.len() != self.spec.horizon {
            return Err(Error::Dimension(format!(
                "{} noise scales for horizon {}",
                self.noise_scales.len(),
                self.spec.horizon
            )));
        }
        ensure(
            self.noise_scales.iter().all(|s| *s > 0.0 && s.is_finite()),
            || "noise scales must be positive".into(),
        )?;
        if self.params.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} params, expected {}",
                self.params.len(),
                self.num_params()
            )));
        }
        ensure(self.params.iter().all(|p| p.is_finite()), || {
            "non-finite parameters".into()
        })
    }

    pub fn feature_dim(&self) -> usize {
        let base = self.spec.state_dim + self.spec.prompt_dim;
        match self.parameterization {
            MeanParameterization::PerStep => base,
            MeanParameterization::SharedSinusoidal { frequencies } => base + 2 * frequencies,
            MeanParameterization::PerStepTanh { widths } => base + widths * self.spec.state_dim,
        }
    }

    fn block_len(&self) -> usize {
        self.spec.state_dim * (self.feature_dim() + 1)
    }

    pub fn num_params(&self) -> usize {
        match self.parameterization {
            MeanParameterization::PerStep | MeanParameterization::PerStepTanh { .. } => {
                self.block_len() * self.spec.horizon
            }
            MeanParameterization::SharedSinusoidal { .. } => self.block_len(),
        }
    }

    fn block_offset(&self, t: usize) -> usize {
        match self.parameterization {
            MeanParameterization::PerStep | MeanParameterization::PerStepTanh { .. } => {
                (t - 1) * self.block_len()
            }
            MeanParameterization::SharedSinusoidal { .. } => 0,
        }
    }

    /// Offset of `W_t[row][col]` in `params` (bias is column `feature_dim`).
    pub fn weight_index(&self, t: usize, row: usize, col: usize) -> usize {
        self.block_offset(t) + row * (self.feature_dim() + 1) + col
    }

    pub fn bias_index(&self, t: usize, row: usize) -> usize {
        self.weight_index(t, row, self.feature_dim())
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.noise_scales[t - 1]
    }

    pub fn features(&self, x: &[f64], c: &[f64], t: usize) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.feature_dim());
        f.extend_from_slice(x);
        f.extend_from_slice(c);
        match self.parameterization {
            MeanParameterization::PerStep => {}
            MeanParameterization::SharedSinusoidal { frequencies } => {
                let tau = t as f64 / self.spec.horizon as f64;
                for k in 1..=frequencies {
                    let w = std::f64::consts::PI * k as f64 * tau;
                    f.push(w.sin());
                    f.push(w.cos());
                }
            }
            MeanParameterization::PerStepTanh { widths } => {
                let mut l = TANH_BASE_WIDTH;
                for _ in 0..widths {
                    f.extend(x.iter().map(|v| (v / l).tanh()));
                    l *= 2.0;
                }
            }
        }
        f
    }

    pub fn mean(&self, x: &[f64], c: &[f64], t: usize) -> Vec<f64> {
        let f = self.features(x, c, t);
        self.mean_from_features(&f, t)
    }

    fn mean_from_features(&self, f: &[f64], t: usize) -> Vec<f64> {
        let stride = self.feature_dim() + 1;
        let base = self.block_offset(t);
        (0..self.spec.state_dim)
            .map(|row| {
                let w = &self.params[base + row * stride..base + (row + 1) * stride];
                w[..stride - 1].iter().zip(f).map(|(a, b)| a * b).sum::<f64>() + w[stride - 1]
            })
            .collect()
    }

    /// `log N(x_prev; mu(x, c, t), sigma_t^2 I)`.
    pub fn step_log_density(&self, x: &[f64], c: &[f64], t: usize, x_prev: &[f64]) -> f64 {
        let mu = self.mean(x, c, t);
        gaussian_log_density(x_prev, &mu, self.sigma(t))
    }

    /// Adds `sum_i coeff_i * d mu_i(x, c, t) / d theta` into `grad`.
    pub fn accumulate_mean_vjp(&self, x: &[f64], c: &[f64], t: usize, coeff: &[f64], grad: &mut [f64]) {
        let f = self.features(x, c, t);
        let stride = f.len() + 1;
        let base = self.block_offset(t);
        for (row, &g) in coeff.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let w = &mut grad[base + row * stride..base + (row + 1) * stride];
            for (slot, fj) in w[..stride - 1].iter_mut().zip(&f) {
                *slot += g * fj;
            }
            w[stride - 1] += g;
        }
    }

    /// Adds `weight * d log pi(x_prev | x, c, t) / d theta` into `grad` and
    /// returns the log-density.
    pub fn accumulate_step_score(
        &self,
        x: &[f64],
        c: &[f64],
        t: usize,
        x_prev: &[f64],
        weight: f64,
        grad: &mut [f64],
    ) -> f64 {
        let f = self.features(x, c, t);
        let mu = self.mean_from_features(&f, t);
        let var = self.sigma(t).powi(2);
        let coeff: Vec<f64> = x_prev
            .iter()
            .zip(&mu)
            .map(|(a, m)| weight * (a - m) / var)
            .collect();
        let stride = f.len() + 1;
        let base = self.block_offset(t);
        for (row, &g) in coeff.iter().enumerate() {
            let w = &mut grad[base + row * stride..base + (row + 1) * stride];
            for (slot, fj) in w[..stride - 1].iter_mut().zip(&f) {
                *slot += g * fj;
            }
            w[stride - 1] += g;
        }
        gaussian_log_density(x_prev, &mu, self.sigma(t))
    }

    /// Log-density of each step of `traj` under this policy.
    pub fn trajectory_step_logps(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        self.check_trajectory(traj)?;
        let t_max = self.spec.horizon;
        Ok((0..t_max)
            .map(|s| {
                self.step_log_density(
                    &traj.states[s],
                    &traj.step_prompts[s],
                    t_max - s,
                    &traj.states[s + 1],
                )
            })
            .collect())
    }

    pub fn check_trajectory(&self, traj: &Trajectory) -> Result<()> {
        let t_max = self.spec.horizon;
        let d = self.spec.state_dim;
        if traj.states.len() != t_max + 1
            || traj.step_logps.len() != t_max
            || traj.step_prompts.len() != t_max
        {
            return Err(Error::Dimension(format!(
                "trajectory horizon {} does not match policy horizon {t_max}",
                traj.step_logps.len()
            )));
        }
        if traj.states.iter().any(|x| x.len() != d)
            || traj
                .step_prompts
                .iter()
                .any(|c| c.len() != self.spec.prompt_dim)
        {
            return Err(Error::Dimension(
                "trajectory state or prompt dimension mismatch".into(),
            ));
        }
        Ok(())
    }

    pub fn same_family(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.noise_scales == other.noise_scales
            && self.parameterization == other.parameterization
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let policy: Self = serde_json::from_str(text)?;
        if policy.version != POLICY_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported policy format version {}",
                policy.version
            )));
        }
        policy.validate()?;
        Ok(policy)
    }
}

pub fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let var = sigma * sigma;
    let sq: f64 = x.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    -0.5 * x.len() as f64 * (LN_2PI + var.ln()) - sq / (2.0 * var)
}

/// Rolls out the chain with the clean prompt at every step.
pub fn sample_trajectory(policy: &GaussianChainPolicy, prompt: &PromptEmbedding, seed: u64) -> Trajectory {
    let clean = vec![prompt.vector.clone(); policy.spec.horizon];
    sample_trajectory_conditioned(policy, prompt, seed, clean)
}

/// Rolls out the chain feeding `step_prompts[s]` to the mean map at step `s`.
pub fn sample_trajectory_conditioned(
    policy: &GaussianChainPolicy,
    prompt: &PromptEmbedding,
    seed: u64,
    step_prompts: Vec<Vec<f64>>,
) -> Trajectory {
    let t_max = policy.spec.horizon;
    let d = policy.spec.state_dim;
    debug_assert_eq!(step_prompts.len(), t_max);
    let mut rng = rng_from_seed(seed);
    let mut states = Vec::with_capacity(t_max + 1);
    let mut step_logps = Vec::with_capacity(t_max);
    states.push(normal_vec(&mut rng, d));
    for (s, c) in step_prompts.iter().enumerate() {
        let t = t_max - s;
        let sigma = policy.sigma(t);
        let mu = policy.mean(&states[s], c, t);
        let noise = normal_vec(&mut rng, d);
        let next: Vec<f64> = mu.iter().zip(&noise).map(|(m, z)| m + sigma * z).collect();
        step_logps.push(gaussian_log_density(&next, &mu, sigma));
        states.push(next);
    }
    Trajectory {
        states,
        step_logps,
        step_prompts,
        prompt: prompt.clone(),
        terminal_reward: 0.0,
        rng_seed: seed,
    }
}

/// `d/dtheta sum_t log pi_theta(x_{t-1} | x_t, c)` along `traj`.
pub fn log_prob_grad(policy: &GaussianChainPolicy, traj: &Trajectory) -> Result<Vec<f64>> {
    policy.check_trajectory(traj)?;
    let t_max = policy.spec.horizon;
    let mut grad = vec![0.0; policy.num_params()];
    for s in 0..t_max {
        policy.accumulate_step_score(
            &traj.states[s],
            &traj.step_prompts[s],
            t_max - s,
            &traj.states[s + 1],
            1.0,
            &mut grad,
        );
    }
    Ok(grad)
}

/// Closed-form KL between the two policies' step-`t` transition kernels at
/// state `x_t`: `||mu_theta - mu_ref||^2 / (2 sigma_t^2)`.
pub fn step_kl(
    policy: &GaussianChainPolicy,
    reference: &GaussianChainPolicy,
    x_t: &[f64],
    prompt: &PromptEmbedding,
    t: usize,
) -> Result<f64> {
    check_same_family(policy, reference)?;
    ensure(t >= 1 && t <= policy.spec.horizon, || {
        format!("timestep {t} outside 1..={}", policy.spec.horizon)
    })?;
    Ok(step_kl_unchecked(policy, reference, x_t, &prompt.vector, t))
}

pub(crate) fn step_kl_unchecked(
    policy: &GaussianChainPolicy,
    reference: &GaussianChainPolicy,
    x_t: &[f64],
    c: &[f64],
    t: usize,
) -> f64 {
    let a = policy.mean(x_t, c, t);
    let b = reference.mean(x_t, c, t);
    let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    sq / (2.0 * policy.sigma(t).powi(2))
}

pub(crate) fn check_same_family(a: &GaussianChainPolicy, b: &GaussianChainPolicy) -> Result<()> {
    if a.same_family(b) {
        Ok(())
    } else {
        Err(Error::Dimension(
            "policies differ in spec, noise scales or parameterization".into(),
        ))
    }
}
