use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::policy::PromptEmbedding;

/// Analytic multimodal terminal reward: equal-height Gaussian bumps, a
/// per-prompt subset of which is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLandscape {
    pub mode_centers: Vec<Vec<f64>>,
    pub mode_width: f64,
    /// Indices into `mode_centers` active for each `prompt_id`.
    pub active_modes: Vec<Vec<usize>>,
}

impl RewardLandscape {
    pub fn validate(&self) -> Result<()> {
        ensure(!self.mode_centers.is_empty(), || "no modes".into())?;
        ensure(self.mode_width > 0.0, || "mode_width must be positive".into())?;
        let d = self.mode_centers[0].len();
        ensure(
            self.mode_centers
                .iter()
                .all(|c| c.len() == d && c.iter().all(|v| v.is_finite())),
            || "mode centers must share a finite dimension".into(),
        )?;
        ensure(!self.active_modes.is_empty(), || "no prompts".into())?;
        for (p, active) in self.active_modes.iter().enumerate() {
            ensure(!active.is_empty(), || format!("prompt {p} has no active mode"))?;
            ensure(
                active.iter().all(|&m| m < self.mode_centers.len()),
                || format!("prompt {p} references an unknown mode"),
            )?;
        }
        Ok(())
    }

    /// Six modes on a hexagon of radius 2.5; four prompts activating 2-4 of
    /// them.
    pub fn hexagon() -> Self {
        let mode_centers = (0..6)
            .map(|i| {
                let a = std::f64::consts::PI * i as f64 / 3.0;
                vec![2.5 * a.cos(), 2.5 * a.sin()]
            })
            .collect();
        Self {
            mode_centers,
            mode_width: 0.6,
            active_modes: vec![vec![0, 3], vec![1, 3, 5], vec![0, 2, 4], vec![0, 1, 3, 4]],
        }
    }

    /// Four equal peaks at `(+-2, +-2)`, all active for every prompt.
    pub fn four_peaks(num_prompts: usize, mode_width: f64) -> Self {
        Self {
            mode_centers: vec![
                vec![2.0, 2.0],
                vec![-2.0, 2.0],
                vec![-2.0, -2.0],
                vec![2.0, -2.0],
            ],
            mode_width,
            active_modes: vec![vec![0, 1, 2, 3]; num_prompts],
        }
    }

    /// Single mode at the origin.
    pub fn single_peak(dim: usize, num_prompts: usize, mode_width: f64) -> Self {
        Self {
            mode_centers: vec![vec![0.0; dim]],
            mode_width,
            active_modes: vec![vec![0]; num_prompts],
        }
    }

    pub fn num_prompts(&self) -> usize {
        self.active_modes.len()
    }

    pub fn active(&self, prompt_id: usize) -> &[usize] {
        &self.active_modes[prompt_id % self.active_modes.len()]
    }

    /// `max_{active m} exp(-||x - center_m||^2 / (2 w^2))`
    pub fn reward(&self, x0: &[f64], prompt_id: usize) -> f64 {
        let two_w2 = 2.0 * self.mode_width * self.mode_width;
        self.active(prompt_id)
            .iter()
            .map(|&m| (-sq_dist(x0, &self.mode_centers[m]) / two_w2).exp())
            .fold(0.0, f64::max)
    }

    /// Index (into `mode_centers`) of the nearest active mode.
    pub fn nearest_active_mode(&self, x: &[f64], prompt_id: usize) -> usize {
        let mut best = (usize::MAX, f64::INFINITY);
        for &m in self.active(prompt_id) {
            let d = sq_dist(x, &self.mode_centers[m]);
            if d < best.1 {
                best = (m, d);
            }
        }
        best.0
    }

    /// Fraction of `samples` nearest to each active mode, in the order of
    /// [`Self::active`].
    pub fn mode_occupancy(&self, samples: &[Vec<f64>], prompt_id: usize) -> Vec<f64> {
        let active = self.active(prompt_id);
        let mut counts = vec![0usize; active.len()];
        for x in samples {
            let m = self.nearest_active_mode(x, prompt_id);
            let slot = active.iter().position(|&a| a == m).expect("active mode");
            counts[slot] += 1;
        }
        let n = samples.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }
}

/// Terminal reward of `x0` for `prompt`.
pub fn evaluate_reward(landscape: &RewardLandscape, x0: &[f64], prompt: &PromptEmbedding) -> f64 {
    landscape.reward(x0, prompt.prompt_id)
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
