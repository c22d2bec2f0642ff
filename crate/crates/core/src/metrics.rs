//! Diversity measures over encoder embeddings.
//!
//! - [`pairwise_diversity`]: the `G x G` squared-distance matrix and the
//!   per-sample mean dissimilarity used as the shaping potential.
//! - [`set_diversity`] / [`clip_style_diversity`]: mean pairwise squared
//!   distance per prompt, averaged over prompts.
//! - [`generalized_recall`]: kNN-hypersphere coverage of a reference set.
//! - [`vendi_score`]: exponentiated entropy of the normalized kernel
//!   spectrum.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::{derive_seed, normal_vec, rng_from_seed, stream};

/// Serializable description of an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Identity,
    /// Fixed Gaussian projection `R^input_dim -> R^output_dim`, entries
    /// `N(0, 1/output_dim)`.
    RandomProjection {
        input_dim: usize,
        output_dim: usize,
        seed: u64,
    },
    /// Precomputed embeddings looked up by exact input vector. Each line of
    /// the file is `x_1 ... x_n | e_1 ... e_m`.
    ExternalTable { path: String },
}

/// A deterministic map from samples to embeddings.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Identity,
    Projection { matrix: Vec<Vec<f64>> },
    Table { entries: Vec<(Vec<f64>, Vec<f64>)> },
}

impl Encoder {
    pub fn build(kind: &EncoderKind) -> Result<Self> {
        match kind {
            EncoderKind::Identity => Ok(Encoder::Identity),
            EncoderKind::RandomProjection {
                input_dim,
                output_dim,
                seed,
            } => Ok(Self::random_projection(*input_dim, *output_dim, *seed)),
            EncoderKind::ExternalTable { path } => Self::load_table(path),
        }
    }

    pub fn random_projection(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, &[stream::ENCODER]));
        let scale = 1.0 / (output_dim.max(1) as f64).sqrt();
        let matrix = (0..output_dim)
            .map(|_| normal_vec(&mut rng, input_dim).into_iter().map(|v| v * scale).collect())
            .collect();
        Encoder::Projection { matrix }
    }

    pub fn load_table(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_table(&text)
    }

    pub fn parse_table(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (input, emb) = line.split_once('|').ok_or_else(|| {
                Error::Parse(format!("line {}: expected `input | embedding`", lineno + 1))
            })?;
            entries.push((parse_row(input, lineno)?, parse_row(emb, lineno)?));
        }
        Ok(Encoder::Table { entries })
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Encoder::Identity => Ok(x.to_vec()),
            Encoder::Projection { matrix } => {
                if matrix.first().is_some_and(|row| row.len() != x.len()) {
                    return Err(Error::Dimension(format!(
                        "projection expects {} inputs, got {}",
                        matrix[0].len(),
                        x.len()
                    )));
                }
                Ok(matrix
                    .iter()
                    .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                    .collect())
            }
            Encoder::Table { entries } => entries
                .iter()
                .find(|(k, _)| k.as_slice() == x)
                .map(|(_, e)| e.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("no table embedding for {x:?}"))),
        }
    }

    pub fn encode_all(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let out: Vec<Vec<f64>> = xs.iter().map(|x| self.encode(x)).collect::<Result<_>>()?;
        ensure(out.iter().flatten().all(|v| v.is_finite()), || {
            "non-finite embedding".into()
        })?;
        Ok(out)
    }
}

fn parse_row(text: &str, lineno: usize) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: {tok:?}: {e}", lineno + 1)))
        })
        .collect()
}

/// Reads one vector per non-empty line, whitespace-separated.
pub fn parse_vectors(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        rows.push(parse_row(line, lineno)?);
    }
    if let Some(first) = rows.first() {
        let d = first.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Parse("vectors have differing lengths".into()));
        }
    }
    Ok(rows)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityMatrix {
    /// Squared Euclidean distances between embeddings.
    pub pairwise: Vec<Vec<f64>>,
    /// Row means excluding the diagonal.
    pub per_sample: Vec<f64>,
}

impl DiversityMatrix {
    pub fn from_embeddings(emb: &[Vec<f64>]) -> Result<Self> {
        let g = emb.len();
        ensure(g >= 2, || format!("diversity needs at least 2 samples, got {g}"))?;
        let mut pairwise = vec![vec![0.0; g]; g];
        for i in 0..g {
            for j in (i + 1)..g {
                let d = sq_dist(&emb[i], &emb[j]);
                pairwise[i][j] = d;
                pairwise[j][i] = d;
            }
        }
        let per_sample = pairwise
            .iter()
            .map(|row| row.iter().sum::<f64>() / (g - 1) as f64)
            .collect();
        Ok(Self {
            pairwise,
            per_sample,
        })
    }

    /// `2 / (G (G-1)) sum_{i<j} pairwise_ij`
    pub fn mean_pairwise(&self) -> f64 {
        let g = self.pairwise.len();
        let mut total = 0.0;
        for i in 0..g {
            for j in (i + 1)..g {
                total += self.pairwise[i][j];
            }
        }
        2.0 * total / (g * (g - 1)) as f64
    }
}

pub fn pairwise_diversity(samples: &[Vec<f64>], encoder: &Encoder) -> Result<DiversityMatrix> {
    DiversityMatrix::from_embeddings(&encoder.encode_all(samples)?)
}

/// Mean over prompts of the mean pairwise squared embedding distance.
pub fn set_diversity(samples_per_prompt: &[Vec<Vec<f64>>], encoder: &Encoder) -> Result<f64> {
    ensure(!samples_per_prompt.is_empty(), || "no prompt buckets".into())?;
    let g = samples_per_prompt[0].len();
    if samples_per_prompt.iter().any(|b| b.len() != g) {
        return Err(Error::Dimension("ragged prompt buckets".into()));
    }
    let mut total = 0.0;
    for bucket in samples_per_prompt {
        total += pairwise_diversity(bucket, encoder)?.mean_pairwise();
    }
    Ok(total / samples_per_prompt.len() as f64)
}

/// The same estimator as [`set_diversity`], evaluated with the secondary
/// encoder slot.
pub fn clip_style_diversity(samples_per_prompt: &[Vec<Vec<f64>>], secondary: &Encoder) -> Result<f64> {
    set_diversity(samples_per_prompt, secondary)
}

/// Fraction of `reference_set` points inside the union of closed balls
/// centred at each generated point with radius equal to that point's
/// distance to its `k`-th nearest generated neighbour.
pub fn generalized_recall(reference_set: &[Vec<f64>], generated_set: &[Vec<f64>], k: usize) -> Result<f64> {
    ensure(k >= 1, || "k must be >= 1".into())?;
    if reference_set.len() <= k || generated_set.len() <= k {
        return Err(Error::InvalidArgument(format!(
            "recall needs more than k={k} points in each set (reference {}, generated {})",
            reference_set.len(),
            generated_set.len()
        )));
    }
    let radii2: Vec<f64> = (0..generated_set.len())
        .map(|i| {
            let mut d: Vec<f64> = generated_set
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, g)| sq_dist(&generated_set[i], g))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect();
    let covered = reference_set
        .iter()
        .filter(|r| {
            generated_set
                .iter()
                .zip(&radii2)
                .any(|(g, &r2)| sq_dist(r, g) <= r2)
        })
        .count();
    Ok(covered as f64 / reference_set.len() as f64)
}

/// Kernel used by [`vendi_score`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VendiKernel {
    /// `exp(-||a - b||^2 / (2 h^2))`
    Rbf { bandwidth: f64 },
    /// `<a, b>`
    Linear,
    /// Kronecker delta on sample index; only useful for testing.
    Identity,
}

/// Median Euclidean distance over distinct pairs, falling back to 1 when
/// every pair coincides.
pub fn median_pairwise_distance(emb: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..emb.len() {
        for j in (i + 1)..emb.len() {
            d.push(sq_dist(&emb[i], &emb[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let m = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// `exp(-sum p_i ln p_i)` over the eigenvalues of `K / n`, clamped at zero
/// and normalized to sum to one.
pub fn vendi_score(samples: &[Vec<f64>], encoder: &Encoder, kernel: VendiKernel) -> Result<f64> {
    ensure(!samples.is_empty(), || "vendi needs at least one sample".into())?;
    let emb = encoder.encode_all(samples)?;
    vendi_from_embeddings(&emb, kernel)
}

pub fn vendi_from_embeddings(emb: &[Vec<f64>], kernel: VendiKernel) -> Result<f64> {
    let n = emb.len();
    ensure(n >= 1, || "vendi needs at least one sample".into())?;
    if let VendiKernel::Rbf { bandwidth } = kernel {
        ensure(bandwidth > 0.0 && bandwidth.is_finite(), || {
            "RBF bandwidth must be positive".into()
        })?;
    }
    let k = nalgebra::DMatrix::<f64>::from_fn(n, n, |i, j| {
        let v = match kernel {
            VendiKernel::Rbf { bandwidth } => {
                (-sq_dist(&emb[i], &emb[j]) / (2.0 * bandwidth * bandwidth)).exp()
            }
            VendiKernel::Linear => emb[i].iter().zip(&emb[j]).map(|(a, b)| a * b).sum(),
            VendiKernel::Identity => {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            }
        };
        v / n as f64
    });
    let eig = nalgebra::SymmetricEigen::new(k);
    let lambdas: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = lambdas.iter().sum();
    ensure(total > 0.0, || "kernel matrix has no positive spectrum".into())?;
    let entropy: f64 = lambdas
        .iter()
        .map(|l| l / total)
        .filter(|&p| p > 1e-10 * 1.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp().clamp(1.0, n as f64))
}
