//! KL-regularized reward maximization on a discrete support.
//!
//! For `J(pi) = E_pi[r] - beta KL(pi || pi_ref)` the maximizer is
//! `pi*(x) = pi_ref(x) exp(r(x) / beta) / Z`, which collapses onto the reward
//! maximizer as `beta -> 0`. Everything here is exact enumeration.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Relative reward gap below which two outcomes count as tied maxima.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteBandit {
    pub ref_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub beta: f64,
}

impl DiscreteBandit {
    pub fn new(ref_probs: Vec<f64>, rewards: Vec<f64>, beta: f64) -> Result<Self> {
        let b = Self {
            ref_probs,
            rewards,
            beta,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn uniform(rewards: Vec<f64>, beta: f64) -> Result<Self> {
        let m = rewards.len();
        Self::new(vec![1.0 / m as f64; m], rewards, beta)
    }

    pub fn support(&self) -> usize {
        self.ref_probs.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.ref_probs.is_empty(), || "empty support".into())?;
        if self.rewards.len() != self.ref_probs.len() {
            return Err(Error::Dimension(format!(
                "{} rewards for {} outcomes",
                self.rewards.len(),
                self.ref_probs.len()
            )));
        }
        ensure(self.ref_probs.iter().all(|&p| p > 0.0 && p.is_finite()), || {
            "reference probabilities must be strictly positive".into()
        })?;
        let total: f64 = self.ref_probs.iter().sum();
        ensure((total - 1.0).abs() <= 1e-9, || format!("reference probabilities sum to {total}"))?;
        ensure(self.rewards.iter().all(|r| r.is_finite()), || "non-finite reward".into())?;
        ensure(self.beta > 0.0 && self.beta.is_finite(), || {
            format!("beta must be positive, got {}", self.beta)
        })
    }

    /// `E_pi[r] - beta KL(pi || pi_ref)`
    pub fn objective(&self, probs: &[f64]) -> f64 {
        probs
            .iter()
            .zip(&self.ref_probs)
            .zip(&self.rewards)
            .map(|((&p, &q), &r)| {
                if p == 0.0 {
                    0.0
                } else {
                    p * r - self.beta * p * (p / q).ln()
                }
            })
            .sum()
    }

    fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &r) in self.rewards.iter().enumerate() {
            if r > self.rewards[best] {
                best = i;
            }
        }
        best
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `(pi*, ln Z)` via log-sum-exp over `ln pi_ref + r / beta`.
pub fn optimal_policy_closed_form(bandit: &DiscreteBandit) -> Result<(Vec<f64>, f64)> {
    bandit.validate()?;
    let logits: Vec<f64> = bandit
        .ref_probs
        .iter()
        .zip(&bandit.rewards)
        .map(|(q, r)| q.ln() + r / bandit.beta)
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_partition = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let probs = logits.iter().map(|l| (l - log_partition).exp()).collect();
    Ok((probs, log_partition))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentReport {
    pub probs: Vec<f64>,
    pub closed_form: Vec<f64>,
    pub total_variation: f64,
    pub iterations: usize,
    /// `J(pi*) - J(pi_ascent)`, non-negative up to rounding.
    pub objective_gap: f64,
    pub final_gradient_norm: f64,
}

pub const ASCENT_MAX_ITERATIONS: usize = 2_000_000;

/// Exact gradient of `J(softmax(theta))` with respect to the logits.
pub fn logit_gradient(bandit: &DiscreteBandit, probs: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = probs
        .iter()
        .zip(&bandit.ref_probs)
        .zip(&bandit.rewards)
        .map(|((&p, &q), &r)| r - bandit.beta * (p / q).ln())
        .collect();
    let mean: f64 = probs.iter().zip(&g).map(|(p, v)| p * v).sum();
    probs.iter().zip(&g).map(|(p, v)| p * (v - mean)).collect()
}

/// Gradient ascent on softmax logits from `pi_ref`, stopped when the logit
/// gradient's sup-norm falls below `1e-13` relative to the reward scale.
/// Fails with [`Error::NonConvergence`] if the fixed point is not within
/// `tol` total variation of the closed form.
pub fn verify_optimum_by_ascent(bandit: &DiscreteBandit, tol: f64) -> Result<AscentReport> {
    ensure(tol > 0.0, || "tol must be positive".into())?;
    let (closed_form, _) = optimal_policy_closed_form(bandit)?;
    let spread = bandit.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - bandit.rewards.iter().copied().fold(f64::INFINITY, f64::min);
    // Logit-space curvature is at most of order beta + reward spread.
    let step = 1.0 / (bandit.beta + spread);
    let stop = 1e-13 * (1.0 + spread + bandit.beta);
    let mut logits: Vec<f64> = bandit.ref_probs.iter().map(|q| q.ln()).collect();
    let mut probs = softmax(&logits);
    let mut iterations = 0;
    let mut gnorm = f64::INFINITY;
    while iterations < ASCENT_MAX_ITERATIONS {
        let grad = logit_gradient(bandit, &probs);
        gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gnorm <= stop {
            break;
        }
        for (l, g) in logits.iter_mut().zip(&grad) {
            *l += step * g;
        }
        probs = softmax(&logits);
        iterations += 1;
    }
    let tv = total_variation(&probs, &closed_form);
    if tv > tol {
        return Err(Error::NonConvergence {
            iterations,
            residual: tv,
        });
    }
    Ok(AscentReport {
        objective_gap: bandit.objective(&closed_form) - bandit.objective(&probs),
        probs,
        closed_form,
        total_variation: tv,
        iterations,
        final_gradient_norm: gnorm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiracSweep {
    pub betas: Vec<f64>,
    pub argmax: usize,
    /// `pi*_beta(x*)` for each beta.
    pub mass_at_argmax: Vec<f64>,
    /// `max_{x != x*} pi*_beta(x) / pi*_beta(x*)`; empty support gives 0.
    pub max_relative_mass: Vec<f64>,
}

impl DiracSweep {
    pub fn is_monotone(&self) -> bool {
        self.mass_at_argmax.windows(2).all(|w| w[1] >= w[0])
    }
}

/// `1, 10^-0.5, ..., 10^-3`.
pub fn default_beta_grid() -> Vec<f64> {
    (0..=6).map(|k| 10f64.powf(-0.5 * k as f64)).collect()
}

/// Closed-form mass at the unique reward maximizer along a decreasing
/// sequence of `beta` values.
pub fn dirac_limit_sweep(bandit: &DiscreteBandit, betas: &[f64]) -> Result<DiracSweep> {
    bandit.validate()?;
    ensure(!betas.is_empty(), || "empty beta sequence".into())?;
    ensure(betas.iter().all(|&b| b > 0.0 && b.is_finite()), || "betas must be positive".into())?;
    ensure(betas.windows(2).all(|w| w[1] < w[0]), || "betas must be strictly decreasing".into())?;
    let star = bandit.argmax();
    let top = bandit.rewards[star];
    let scale = 1.0 + top.abs();
    if bandit
        .rewards
        .iter()
        .enumerate()
        .any(|(i, &r)| i != star && top - r <= TIE_TOLERANCE * scale)
    {
        return Err(Error::InvalidArgument(
            "reward maximizer is not unique; the collapse limit splits mass across tied maxima and \
             is not covered by the sweep"
                .into(),
        ));
    }
    let mut mass_at_argmax = Vec::with_capacity(betas.len());
    let mut max_relative_mass = Vec::with_capacity(betas.len());
    for &beta in betas {
        let b = DiscreteBandit { beta, ..bandit.clone() };
        let (probs, _) = optimal_policy_closed_form(&b)?;
        mass_at_argmax.push(probs[star]);
        let rel = probs
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != star)
            .map(|(_, p)| p / probs[star])
            .fold(0.0, f64::max);
        max_relative_mass.push(rel);
    }
    Ok(DiracSweep {
        betas: betas.to_vec(),
        argmax: star,
        mass_at_argmax,
        max_relative_mass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientDecomposition {
    /// `E_pi[grad log pi * r]`
    pub reward_pull: Vec<f64>,
    /// `beta E_pi[grad log pi * log(pi / pi_ref)]`
    pub diversity_pushback: Vec<f64>,
    pub total: Vec<f64>,
}

/// Splits the logit gradient of `J` at `policy_probs` into the reward pull
/// and the KL push-back. The score-function term of the KL's own
/// dependence on `theta` has zero expectation and does not appear.
pub fn gradient_decomposition(bandit: &DiscreteBandit, policy_probs: &[f64]) -> Result<GradientDecomposition> {
    bandit.validate()?;
    if policy_probs.len() != bandit.support() {
        return Err(Error::Dimension(format!(
            "{} probabilities for {} outcomes",
            policy_probs.len(),
            bandit.support()
        )));
    }
    ensure(policy_probs.iter().all(|&p| p > 0.0), || {
        "policy probabilities must be strictly positive".into()
    })?;
    // d log pi_x / d theta_k = [x == k] - pi_k
    let expect = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let m = policy_probs.len();
        (0..m)
            .map(|k| {
                (0..m)
                    .map(|x| {
                        let score = if x == k { 1.0 } else { 0.0 } - policy_probs[k];
                        policy_probs[x] * score * f(x)
                    })
                    .sum()
            })
            .collect()
    };
    let reward_pull = expect(&|x| bandit.rewards[x]);
    let diversity_pushback = expect(&|x| bandit.beta * (policy_probs[x] / bandit.ref_probs[x]).ln());
    let total = reward_pull
        .iter()
        .zip(&diversity_pushback)
        .map(|(a, b)| a - b)
        .collect();
    Ok(GradientDecomposition {
        reward_pull,
        diversity_pushback,
        total,
    })
}
