use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::drift::PromptStats;
use crate::error::{ensure, Error, Result};
use crate::grpo::{train_epoch, EpochStats, Mechanisms};
use crate::harness::config::{EvalProtocol, ExperimentConfig};
use crate::metrics::{
    generalized_recall, median_pairwise_distance, set_diversity, vendi_from_embeddings, Encoder, VendiKernel,
};
use crate::optim::AdamW;
use crate::policy::{pretrain, sample_trajectory, GaussianChainPolicy, PromptEmbedding, RewardLandscape};
use crate::rng::{derive_seed, stream};

/// One evaluation checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRecord {
    pub checkpoint_epoch: usize,
    pub mean_reward: f64,
    pub dreamsim_style_diversity: f64,
    pub clip_style_diversity: f64,
    pub recall: f64,
    pub vendi: f64,
}

/// Per-checkpoint quantities that are not part of the Pareto file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDetail {
    pub checkpoint_epoch: usize,
    /// Per eval prompt: largest fraction of samples nearest to one mode.
    pub max_mode_share: Vec<f64>,
}

/// Fixed-seed evaluation against the pretrained model's samples.
#[derive(Debug, Clone)]
pub struct Evaluator {
    prompts: Vec<PromptEmbedding>,
    seed: u64,
    samples: usize,
    k: usize,
    primary: Encoder,
    secondary: Encoder,
    reference: Vec<Vec<Vec<f64>>>,
    bandwidth: f64,
}

impl Evaluator {
    pub fn new(
        base: &GaussianChainPolicy,
        prompts: &[PromptEmbedding],
        protocol: &EvalProtocol,
        run_seed: u64,
    ) -> Result<Self> {
        ensure(!prompts.is_empty(), || "no prompts to evaluate".into())?;
        let eval_prompts: Vec<PromptEmbedding> = (0..protocol.num_eval_prompts)
            .map(|i| prompts[i % prompts.len()].clone())
            .collect();
        let mut ev = Self {
            prompts: eval_prompts,
            seed: derive_seed(run_seed, &[stream::EVAL]),
            samples: protocol.samples_per_prompt,
            k: protocol.recall_k,
            primary: Encoder::build(&protocol.primary_encoder)?,
            secondary: Encoder::build(&protocol.secondary_encoder)?,
            reference: Vec::new(),
            bandwidth: 1.0,
        };
        let base_samples = ev.sample(base);
        ev.reference = base_samples
            .iter()
            .map(|b| ev.primary.encode_all(b))
            .collect::<Result<_>>()?;
        ev.bandwidth = match protocol.vendi_bandwidth {
            Some(h) => h,
            None => {
                let pooled: Vec<Vec<f64>> = ev.reference.iter().flatten().cloned().collect();
                median_pairwise_distance(&pooled)
            }
        };
        Ok(ev)
    }

    pub fn vendi_bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn eval_prompts(&self) -> &[PromptEmbedding] {
        &self.prompts
    }

    /// Terminal samples per eval prompt. Slot `(j, i)` always uses the same
    /// seed, so a policy is compared with the base model on shared noise.
    pub fn sample(&self, policy: &GaussianChainPolicy) -> Vec<Vec<Vec<f64>>> {
        self.prompts
            .iter()
            .enumerate()
            .map(|(j, p)| {
                (0..self.samples)
                    .map(|i| {
                        let s = derive_seed(self.seed, &[j as u64, i as u64]);
                        sample_trajectory(policy, p, s).terminal().to_vec()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn evaluate(
        &self,
        policy: &GaussianChainPolicy,
        landscape: &RewardLandscape,
        epoch: usize,
    ) -> Result<(ParetoRecord, EvalDetail)> {
        let buckets = self.sample(policy);
        let n_prompts = buckets.len() as f64;
        let mut reward = 0.0;
        let mut recall = 0.0;
        let mut vendi = 0.0;
        let mut shares = Vec::with_capacity(buckets.len());
        for ((bucket, p), reference) in buckets.iter().zip(&self.prompts).zip(&self.reference) {
            reward += bucket.iter().map(|x| landscape.reward(x, p.prompt_id)).sum::<f64>() / bucket.len() as f64;
            let emb = self.primary.encode_all(bucket)?;
            recall += generalized_recall(reference, &emb, self.k)?;
            vendi += vendi_from_embeddings(&emb, VendiKernel::Rbf { bandwidth: self.bandwidth })?;
            let occ = landscape.mode_occupancy(bucket, p.prompt_id);
            shares.push(occ.into_iter().fold(0.0, f64::max));
        }
        let record = ParetoRecord {
            checkpoint_epoch: epoch,
            mean_reward: reward / n_prompts,
            dreamsim_style_diversity: set_diversity(&buckets, &self.primary)?,
            clip_style_diversity: set_diversity(&buckets, &self.secondary)?,
            recall: recall / n_prompts,
            vendi: vendi / n_prompts,
        };
        ensure(
            [
                record.mean_reward,
                record.dreamsim_style_diversity,
                record.clip_style_diversity,
                record.recall,
                record.vendi,
            ]
            .iter()
            .all(|v| v.is_finite()),
            || format!("non-finite eval record at epoch {epoch}"),
        )?;
        Ok((
            record,
            EvalDetail {
                checkpoint_epoch: epoch,
                max_mode_share: shares,
            },
        ))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub pretrained: GaussianChainPolicy,
    pub pretrain_coverage: Vec<Vec<f64>>,
    pub pretrain_warning: Option<String>,
    pub final_policy: GaussianChainPolicy,
    pub epochs: Vec<EpochStats>,
    pub pareto: Vec<ParetoRecord>,
    pub details: Vec<EvalDetail>,
    pub vendi_bandwidth: f64,
    /// Set when training stopped on a non-finite signal; `final_policy` is
    /// then the last finite one.
    pub aborted: Option<String>,
}

/// Pretrains the base model as configured.
pub fn pretrain_base(config: &ExperimentConfig) -> Result<crate::policy::PretrainOutcome> {
    config.validate()?;
    let init = config.policy.build()?;
    pretrain(
        &init,
        &config.landscape,
        &config.prompt_set(),
        &config.pretrain,
        derive_seed(config.run_seed, &[stream::PRETRAIN]),
    )
}

/// Pretrain, fine-tune and evaluate without touching the filesystem.
pub fn run_experiment_in_memory(config: &ExperimentConfig) -> Result<RunOutcome> {
    let base = pretrain_base(config)?;
    let mut outcome = fine_tune(config, &base.policy)?;
    outcome.pretrain_coverage = base.coverage;
    outcome.pretrain_warning = base.warning;
    Ok(outcome)
}

/// Fine-tunes an already-pretrained base model. The base model is both the
/// KL reference and the checkpoint-0 record.
pub fn fine_tune(config: &ExperimentConfig, base: &GaussianChainPolicy) -> Result<RunOutcome> {
    config.validate()?;
    let prompts = config.prompt_set();
    let evaluator = Evaluator::new(base, &prompts, &config.eval, config.run_seed)?;
    let mechanisms = Mechanisms {
        toggles: config.toggles,
        drift: config.drift,
        prompt_stats: PromptStats::from_prompts(&prompts)?,
        encoder: Encoder::build(&config.shaping_encoder)?,
        discount_gamma: config.policy.spec.discount_gamma,
    };
    let mut optimizer = AdamW::new(config.grpo.adamw(), base.num_params());
    let mut policy = base.clone();
    let mut epochs = Vec::new();
    let (first, first_detail) = evaluator.evaluate(base, &config.landscape, 0)?;
    let mut reached = config.target_reward.is_some_and(|t| first.mean_reward >= t);
    let mut pareto = vec![first];
    let mut details = vec![first_detail];
    let mut aborted = None;
    for epoch in 1..=config.epochs {
        if reached {
            break;
        }
        let seed = derive_seed(config.run_seed, &[stream::EPOCH, epoch as u64]);
        match train_epoch(
            &policy,
            &mut optimizer,
            base,
            &prompts,
            &config.landscape,
            &config.grpo,
            seed,
            &mechanisms,
            epoch,
        ) {
            Ok((next, stats)) => {
                policy = next;
                epochs.push(stats);
            }
            Err(e @ Error::NonFinite { .. }) => {
                aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let (rec, det) = evaluator.evaluate(&policy, &config.landscape, epoch)?;
            reached = config.target_reward.is_some_and(|t| rec.mean_reward >= t);
            pareto.push(rec);
            details.push(det);
        }
    }
    Ok(RunOutcome {
        config: config.clone(),
        pretrained: base.clone(),
        pretrain_coverage: Vec::new(),
        pretrain_warning: None,
        final_policy: policy,
        epochs,
        pareto,
        details,
        vendi_bandwidth: evaluator.vendi_bandwidth(),
        aborted,
    })
}

pub const EPOCHS_FILE: &str = "epochs.csv";
pub const PARETO_FILE: &str = "pareto.csv";
pub const FINAL_POLICY_FILE: &str = "final_policy.json";
pub const CONFIG_ECHO_FILE: &str = "config_echo.json";

/// Runs the experiment and writes `epochs.csv`, `pareto.csv`,
/// `final_policy.json` and `config_echo.json` into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<RunOutcome> {
    let outcome = run_experiment_in_memory(config)?;
    write_run(&outcome, out_dir)?;
    Ok(outcome)
}

pub fn write_run(outcome: &RunOutcome, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(dir.join(EPOCHS_FILE), &outcome.epochs, EPOCHS_HEADER)?;
    write_csv(dir.join(PARETO_FILE), &outcome.pareto, PARETO_HEADER)?;
    write_text(dir.join(FINAL_POLICY_FILE), &outcome.final_policy.to_json()?)?;
    write_text(dir.join(CONFIG_ECHO_FILE), &outcome.config.to_json()?)
}

pub const EPOCHS_HEADER: &[&str] = &[
    "epoch",
    "mean_reward",
    "mean_kl",
    "clip_fraction",
    "grad_norm",
    "mean_intrinsic_reward",
    "intrinsic_clip_fraction",
    "selection_mode",
];

pub const PARETO_HEADER: &[&str] = &[
    "checkpoint_epoch",
    "mean_reward",
    "dreamsim_style_diversity",
    "clip_style_diversity",
    "recall",
    "vendi",
];

fn write_csv<T: Serialize>(path: PathBuf, rows: &[T], header: &[&str]) -> Result<()> {
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_pareto(path: impl AsRef<Path>) -> Result<Vec<ParetoRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers()?.clone();
    ensure(headers.iter().eq(PARETO_HEADER.iter().copied()), || {
        format!("{}: unexpected header {:?}", path.display(), headers)
    })?;
    let rows: Vec<ParetoRecord> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    Ok(rows)
}
