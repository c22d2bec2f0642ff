use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use drift_core::harness::{compare_runs, pretrain_base, run_experiment, run_verification, ExperimentConfig, ReferenceAxis};
use drift_core::metrics::{
    generalized_recall, median_pairwise_distance, parse_vectors, set_diversity, vendi_from_embeddings, Encoder,
    EncoderKind, VendiKernel,
};
use serde_json::json;

const EXIT_VERIFY_FAILED: u8 = 2;
const EXIT_ABORTED: u8 = 3;

#[derive(Parser)]
#[command(name = "drift", version, about = "Diversity-preserving GRPO fine-tuning on toy denoising chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base chain and write it with its mode coverage.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain, fine-tune and evaluate; writes the run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numerical checks and print a JSON report.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diversity metrics for a set of generated vectors.
    Metrics {
        /// One vector per line, whitespace-separated.
        #[arg(long)]
        generated: PathBuf,
        /// Reference vectors for recall.
        #[arg(long)]
        reference: PathBuf,
        /// Consecutive samples per prompt bucket; defaults to one bucket.
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// RBF bandwidth for Vendi; defaults to the median pairwise
        /// distance of the reference embeddings.
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long, value_enum, default_value_t = Kernel::Rbf)]
        kernel: Kernel,
        /// Embedding table (`x | e` per line) for the primary encoder.
        #[arg(long)]
        primary_table: Option<PathBuf>,
        /// Embedding table for the secondary encoder. Without it a seeded
        /// random projection is used.
        #[arg(long)]
        secondary_table: Option<PathBuf>,
        #[arg(long, default_value_t = 11)]
        projection_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gains of candidate runs over the first (baseline) run directory.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Axis::Reward)]
        axis: Axis,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kernel {
    Rbf,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Reward,
    Diversity,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.run_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(p) = out {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn read_vectors(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v = parse_vectors(&text).with_context(|| format!("parsing {}", path.display()))?;
    if v.is_empty() {
        bail!("{}: no vectors", path.display());
    }
    Ok(v)
}

fn encoder(table: Option<&Path>, fallback: EncoderKind) -> Result<Encoder> {
    let kind = match table {
        Some(p) => EncoderKind::ExternalTable {
            path: p.display().to_string(),
        },
        None => fallback,
    };
    Ok(Encoder::build(&kind)?)
}

fn pretrain_cmd(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(config, seed)?;
    let res = pretrain_base(&cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("pretrained_policy.json"), res.policy.to_json()?)?;
    fs::write(out.join("config_echo.json"), cfg.to_json()?)?;
    if let Some(w) = &res.warning {
        eprintln!("warning: {w}");
    }
    emit(
        &json!({
            "final_loss": res.final_loss,
            "covered": res.covered,
            "coverage": res.coverage,
        }),
        Some(&out.join("coverage.json")),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(config, seed)?;
    let outcome = run_experiment(&cfg, out)?;
    if let Some(w) = &outcome.pretrain_warning {
        eprintln!("warning: {w}");
    }
    let last = outcome.pareto.last();
    emit(
        &json!({
            "out": out.display().to_string(),
            "epochs": outcome.epochs.len(),
            "vendi_bandwidth": outcome.vendi_bandwidth,
            "final": last,
            "aborted": outcome.aborted,
        }),
        None,
    )?;
    if let Some(reason) = &outcome.aborted {
        eprintln!("training aborted: {reason}");
        return Ok(ExitCode::from(EXIT_ABORTED));
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_cmd(seed: u64, out: Option<&Path>) -> Result<ExitCode> {
    let report = run_verification(seed)?;
    emit(&serde_json::to_value(&report)?, out)?;
    if report.passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_VERIFY_FAILED))
    }
}

struct MetricsArgs<'a> {
    generated: &'a Path,
    reference: &'a Path,
    group_size: Option<usize>,
    k: usize,
    bandwidth: Option<f64>,
    kernel: Kernel,
    primary_table: Option<&'a Path>,
    secondary_table: Option<&'a Path>,
    projection_seed: u64,
}

fn metrics_report(a: &MetricsArgs) -> Result<serde_json::Value> {
    let generated = read_vectors(a.generated)?;
    let reference = read_vectors(a.reference)?;
    let dim = generated[0].len();
    let g = a.group_size.unwrap_or(generated.len());
    if g < 2 || generated.len() % g != 0 {
        bail!("{} samples do not split into buckets of {g}", generated.len());
    }
    let buckets: Vec<Vec<Vec<f64>>> = generated.chunks(g).map(|c| c.to_vec()).collect();
    let primary = encoder(a.primary_table, EncoderKind::Identity)?;
    let secondary = encoder(
        a.secondary_table,
        EncoderKind::RandomProjection {
            input_dim: dim,
            output_dim: dim,
            seed: a.projection_seed,
        },
    )?;
    let ref_emb = primary.encode_all(&reference)?;
    let kernel = match a.kernel {
        Kernel::Linear => VendiKernel::Linear,
        Kernel::Rbf => VendiKernel::Rbf {
            bandwidth: a.bandwidth.unwrap_or_else(|| median_pairwise_distance(&ref_emb)),
        },
    };
    let (mut recall, mut vendi) = (0.0, 0.0);
    for b in &buckets {
        let emb = primary.encode_all(b)?;
        recall += generalized_recall(&ref_emb, &emb, a.k)?;
        vendi += vendi_from_embeddings(&emb, kernel)?;
    }
    let n = buckets.len() as f64;
    Ok(json!({
        "dreamsim_style": set_diversity(&buckets, &primary)?,
        "clip_style": set_diversity(&buckets, &secondary)?,
        "recall": recall / n,
        "vendi": vendi / n,
    }))
}

fn compare_cmd(runs: &[PathBuf], axis: Axis, out: Option<&Path>) -> Result<ExitCode> {
    let axis = match axis {
        Axis::Reward => ReferenceAxis::Reward,
        Axis::Diversity => ReferenceAxis::Diversity,
    };
    let report = compare_runs(runs, axis)?;
    emit(&serde_json::to_value(&report)?, out)?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Pretrain { config, seed, out } => pretrain_cmd(config.as_deref(), seed, &out),
        Command::Train { config, seed, out } => train_cmd(config.as_deref(), seed, &out),
        Command::Verify { seed, out } => verify_cmd(seed, out.as_deref()),
        Command::Metrics {
            generated,
            reference,
            group_size,
            k,
            bandwidth,
            kernel,
            primary_table,
            secondary_table,
            projection_seed,
            out,
        } => {
            let report = metrics_report(&MetricsArgs {
                generated: &generated,
                reference: &reference,
                group_size,
                k,
                bandwidth,
                kernel,
                primary_table: primary_table.as_deref(),
                secondary_table: secondary_table.as_deref(),
                projection_seed,
            })?;
            emit(&report, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { runs, axis, out } => compare_cmd(&runs, axis, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
