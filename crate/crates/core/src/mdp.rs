//! Tabular MDPs, exact value iteration and potential-based shaping.
//!
//! The denoising process is an MDP with states `(x_t, c, t)` and actions
//! `x_{t-1}`; that continuous MDP is only described here by
//! [`DenoisingMDPSpec`]. Optimal-policy invariance under diversity shaping
//! is certified on finite MDPs, where `Q*` can be computed exactly.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::{rng_from_seed, Rng};

/// Actions whose optimal Q-value is within this margin of the per-state
/// maximum are reported as optimal.
pub const TIE_EPSILON: f64 = 1e-9;

pub const MAX_ITERATIONS: usize = 100_000;

/// Shape of the denoising MDP: horizon, sample dimension and prompt
/// dimension, plus the discount used by diversity shaping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoisingMDPSpec {
    pub horizon: usize,
    pub state_dim: usize,
    pub prompt_dim: usize,
    #[serde(default = "default_discount")]
    pub discount_gamma: f64,
}

fn default_discount() -> f64 {
    1.0
}

impl DenoisingMDPSpec {
    pub fn new(horizon: usize, state_dim: usize, prompt_dim: usize) -> Result<Self> {
        let spec = Self {
            horizon,
            state_dim,
            prompt_dim,
            discount_gamma: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.horizon >= 1, || "horizon must be >= 1".into())?;
        ensure(self.state_dim >= 1, || "state_dim must be >= 1".into())?;
        ensure(self.prompt_dim >= 1, || "prompt_dim must be >= 1".into())?;
        ensure(
            self.discount_gamma > 0.0 && self.discount_gamma <= 1.0,
            || format!("discount_gamma {} not in (0, 1]", self.discount_gamma),
        )
    }
}

impl Default for DenoisingMDPSpec {
    fn default() -> Self {
        Self {
            horizon: 10,
            state_dim: 2,
            prompt_dim: 4,
            discount_gamma: 1.0,
        }
    }
}

/// A finite MDP `(S, A, P, R, gamma)` with rewards on transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMDP {
    pub num_states: usize,
    pub num_actions: usize,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a][s']`
    pub reward: Vec<Vec<Vec<f64>>>,
    pub discount_gamma: f64,
    #[serde(default)]
    pub terminal_mask: Vec<bool>,
}

impl TabularMDP {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.num_states, self.num_actions);
        ensure(ns >= 1 && na >= 1, || "empty state or action space".into())?;
        ensure(
            self.discount_gamma > 0.0 && self.discount_gamma <= 1.0,
            || format!("discount_gamma {} not in (0, 1]", self.discount_gamma),
        )?;
        if !self.terminal_mask.is_empty() && self.terminal_mask.len() != ns {
            return Err(Error::Dimension(format!(
                "terminal_mask has {} entries for {ns} states",
                self.terminal_mask.len()
            )));
        }
        for (name, tensor) in [("transition", &self.transition), ("reward", &self.reward)] {
            if tensor.len() != ns
                || tensor
                    .iter()
                    .any(|row| row.len() != na || row.iter().any(|r| r.len() != ns))
            {
                return Err(Error::Dimension(format!(
                    "{name} tensor is not {ns}x{na}x{ns}"
                )));
            }
        }
        for (s, rows) in self.transition.iter().enumerate() {
            for (a, row) in rows.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                ensure(
                    row.iter().all(|&p| p >= 0.0 && p.is_finite()) && (sum - 1.0).abs() <= 1e-12,
                    || format!("transition row ({s},{a}) is not a distribution (sum {sum})"),
                )?;
            }
        }
        ensure(
            self.reward.iter().flatten().flatten().all(|r| r.is_finite()),
            || "non-finite reward".into(),
        )
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal_mask.get(s).copied().unwrap_or(false)
    }

    /// Random MDP: flat-Dirichlet transition rows, rewards uniform in
    /// `[-1, 1]`. States flagged in `terminal` self-loop with zero reward.
    pub fn random(
        num_states: usize,
        num_actions: usize,
        discount_gamma: f64,
        terminal: &[usize],
        seed: u64,
    ) -> Result<Self> {
        ensure(num_states >= 1 && num_actions >= 1, || {
            "empty state or action space".into()
        })?;
        let mut rng = rng_from_seed(seed);
        let mut terminal_mask = vec![false; num_states];
        for &s in terminal {
            ensure(s < num_states, || format!("terminal state {s} out of range"))?;
            terminal_mask[s] = true;
        }
        let mut transition = Vec::with_capacity(num_states);
        let mut reward = Vec::with_capacity(num_states);
        for s in 0..num_states {
            let mut p_rows = Vec::with_capacity(num_actions);
            let mut r_rows = Vec::with_capacity(num_actions);
            for _ in 0..num_actions {
                if terminal_mask[s] {
                    let mut row = vec![0.0; num_states];
                    row[s] = 1.0;
                    p_rows.push(row);
                    r_rows.push(vec![0.0; num_states]);
                } else {
                    p_rows.push(flat_dirichlet(&mut rng, num_states));
                    r_rows.push(
                        (0..num_states)
                            .map(|_| rng.random_range(-1.0..=1.0))
                            .collect(),
                    );
                }
            }
            transition.push(p_rows);
            reward.push(r_rows);
        }
        let mdp = Self {
            num_states,
            num_actions,
            transition,
            reward,
            discount_gamma,
            terminal_mask,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// `Q(s,a) = sum_s' P(s'|s,a) [R(s,a,s') + gamma V(s')]`
    pub fn q_from_values(&self, values: &[f64]) -> Vec<Vec<f64>> {
        (0..self.num_states)
            .map(|s| {
                (0..self.num_actions)
                    .map(|a| {
                        let p = &self.transition[s][a];
                        let r = &self.reward[s][a];
                        p.iter()
                            .zip(r)
                            .zip(values)
                            .map(|((p, r), v)| p * (r + self.discount_gamma * v))
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    /// Exact value of a deterministic policy via a linear solve of
    /// `(I - gamma P_pi) V = R_pi`.
    pub fn evaluate_policy(&self, policy: &[usize]) -> Result<Vec<f64>> {
        let n = self.num_states;
        if policy.len() != n || policy.iter().any(|&a| a >= self.num_actions) {
            return Err(Error::Dimension("policy does not match the MDP".into()));
        }
        let mut lhs = nalgebra::DMatrix::<f64>::identity(n, n);
        let mut rhs = nalgebra::DVector::<f64>::zeros(n);
        for s in 0..n {
            let a = policy[s];
            for s2 in 0..n {
                let p = self.transition[s][a][s2];
                lhs[(s, s2)] -= self.discount_gamma * p;
                rhs[s] += p * self.reward[s][a][s2];
            }
        }
        let sol = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidArgument("singular policy-evaluation system".into()))?;
        Ok(sol.iter().copied().collect())
    }
}

fn flat_dirichlet(rng: &mut Rng, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(1.0, 1.0).expect("valid gamma parameters");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            let mut row: Vec<f64> = draws.iter().map(|g| g / total).collect();
            // Push the rounding residue onto the largest entry so the row
            // sums to one as tightly as f64 allows.
            let residue = 1.0 - row.iter().sum::<f64>();
            let imax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            row[imax] += residue;
            return row;
        }
    }
}

/// A state potential `d(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialFunction {
    pub values: Vec<f64>,
}

impl PotentialFunction {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure(values.iter().all(|v| v.is_finite()), || {
            "non-finite potential".into()
        })?;
        Ok(Self { values })
    }

    pub fn random(num_states: usize, scale: f64, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        Self {
            values: (0..num_states)
                .map(|_| rng.random_range(-scale..=scale))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueIterationResult {
    pub values: Vec<f64>,
    pub q_values: Vec<Vec<f64>>,
    pub optimal_action_sets: Vec<Vec<usize>>,
    pub iterations: usize,
    /// Sup-norm change `||V_{k+1} - V_k||` per sweep.
    pub residuals: Vec<f64>,
    /// Bellman optimality residual `||T V - V||` of the returned values.
    pub bellman_residual: f64,
}

/// Exact value iteration.
///
/// Sweeps stop once `gamma / (1 - gamma) * ||V_{k+1} - V_k|| <= tol`, which
/// bounds both the Bellman residual of the returned values and their
/// distance to `V*` by `tol`.
pub fn value_iteration(mdp: &TabularMDP, tol: f64) -> Result<ValueIterationResult> {
    ensure(tol > 0.0, || "tol must be positive".into())?;
    mdp.validate()?;
    let gamma = mdp.discount_gamma;
    ensure(gamma < 1.0, || {
        "value iteration requires discount_gamma < 1".into()
    })?;
    let factor = gamma / (1.0 - gamma);

    let mut values = vec![0.0; mdp.num_states];
    let mut residuals = Vec::new();
    for iteration in 1..=MAX_ITERATIONS {
        let q = mdp.q_from_values(&values);
        let next: Vec<f64> = q.iter().map(|row| max_of(row)).collect();
        let delta = sup_diff(&next, &values);
        residuals.push(delta);
        values = next;
        if factor * delta <= tol || delta == 0.0 {
            let q_values = mdp.q_from_values(&values);
            let improved: Vec<f64> = q_values.iter().map(|row| max_of(row)).collect();
            let bellman_residual = sup_diff(&improved, &values);
            let optimal_action_sets = q_values.iter().map(|row| optimal_set(row)).collect();
            return Ok(ValueIterationResult {
                values,
                q_values,
                optimal_action_sets,
                iterations: iteration,
                residuals,
                bellman_residual,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITERATIONS,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

fn max_of(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn optimal_set(q_row: &[f64]) -> Vec<usize> {
    let best = max_of(q_row);
    q_row
        .iter()
        .enumerate()
        .filter(|(_, &q)| q >= best - TIE_EPSILON)
        .map(|(a, _)| a)
        .collect()
}

/// `R~(s,a,s') = R(s,a,s') + lambda * (gamma d(s') - d(s))`. Terminal states
/// get no special case.
pub fn shape_mdp(mdp: &TabularMDP, potential: &PotentialFunction, lambda: f64) -> Result<TabularMDP> {
    if potential.values.len() != mdp.num_states {
        return Err(Error::Dimension(format!(
            "potential has {} entries for {} states",
            potential.values.len(),
            mdp.num_states
        )));
    }
    let gamma = mdp.discount_gamma;
    let d = &potential.values;
    let reward = mdp
        .reward
        .iter()
        .enumerate()
        .map(|(s, rows)| {
            rows.iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(s2, r)| r + lambda * (gamma * d[s2] - d[s]))
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(TabularMDP {
        reward,
        ..mdp.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub lambda: f64,
    pub original_action_sets: Vec<Vec<usize>>,
    pub shaped_action_sets: Vec<Vec<usize>>,
    pub equal: bool,
    /// `max_{s,a} |Q~*(s,a) - (Q*(s,a) - lambda d(s))|`
    pub q_residual: f64,
    pub original_iterations: usize,
    pub shaped_iterations: usize,
}

/// Solves `M` and the shaped `M~` independently and compares their optimal
/// action sets and Q-functions.
pub fn certify_invariance(
    mdp: &TabularMDP,
    potential: &PotentialFunction,
    lambda: f64,
    tol: f64,
) -> Result<InvarianceReport> {
    let shaped = shape_mdp(mdp, potential, lambda)?;
    let original = value_iteration(mdp, tol)?;
    let transformed = value_iteration(&shaped, tol)?;
    let equal = original.optimal_action_sets == transformed.optimal_action_sets;
    let mut q_residual: f64 = 0.0;
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_actions {
            let predicted = original.q_values[s][a] - lambda * potential.values[s];
            q_residual = q_residual.max((transformed.q_values[s][a] - predicted).abs());
        }
    }
    Ok(InvarianceReport {
        lambda,
        original_action_sets: original.optimal_action_sets,
        shaped_action_sets: transformed.optimal_action_sets,
        equal,
        q_residual,
        original_iterations: original.iterations,
        shaped_iterations: transformed.iterations,
    })
}
