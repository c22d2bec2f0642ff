//! Diversity gain at matched reward (DG) and reward gain at matched
//! diversity (RG).
//!
//! Matching is one-sided: a candidate checkpoint matches a baseline
//! checkpoint only if it meets or exceeds it on the matching axis, by at
//! most the tolerance. Among matches the closest one is used. The headline
//! number pairs the hardest baseline checkpoint that still has a match: the
//! highest-reward one for DG, the lowest-diversity one for RG. Epoch-0
//! baseline records are the shared pretrained model and only count when the
//! baseline has nothing else.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::harness::experiment::{read_pareto, ParetoRecord, PARETO_FILE};

/// Absolute reward window for DG matching.
pub const REWARD_TOLERANCE: f64 = 0.02;
/// Relative diversity window for RG matching.
pub const DIVERSITY_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceAxis {
    Reward,
    Diversity,
}

impl std::str::FromStr for ReferenceAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reward" => Ok(Self::Reward),
            "diversity" => Ok(Self::Diversity),
            other => Err(Error::Parse(format!("unknown reference axis {other:?}"))),
        }
    }
}

/// Percentage gains of a candidate over a baseline checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub dreamsim_style: f64,
    pub clip_style: f64,
    pub recall: f64,
    pub vendi: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Comparison {
    Matched {
        baseline: ParetoRecord,
        candidate: ParetoRecord,
        gains: Gains,
    },
    NoOverlap,
}

impl Comparison {
    pub fn gains(&self) -> Option<&Gains> {
        match self {
            Comparison::Matched { gains, .. } => Some(gains),
            Comparison::NoOverlap => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub axis: ReferenceAxis,
    pub baseline: String,
    pub candidates: Vec<(String, Comparison)>,
}

fn pct(new: f64, old: f64) -> f64 {
    if old == 0.0 {
        if new == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(new)
        }
    } else {
        100.0 * (new - old) / old.abs()
    }
}

fn gains(base: &ParetoRecord, cand: &ParetoRecord) -> Gains {
    Gains {
        dreamsim_style: pct(cand.dreamsim_style_diversity, base.dreamsim_style_diversity),
        clip_style: pct(cand.clip_style_diversity, base.clip_style_diversity),
        recall: pct(cand.recall, base.recall),
        vendi: pct(cand.vendi, base.vendi),
        reward: pct(cand.mean_reward, base.mean_reward),
    }
}

fn axis_value(r: &ParetoRecord, axis: ReferenceAxis) -> f64 {
    match axis {
        ReferenceAxis::Reward => r.mean_reward,
        ReferenceAxis::Diversity => r.dreamsim_style_diversity,
    }
}

/// The candidate checkpoint matching `base`, if any.
pub fn match_checkpoint<'a>(
    base: &ParetoRecord,
    candidates: &'a [ParetoRecord],
    axis: ReferenceAxis,
) -> Option<&'a ParetoRecord> {
    let b = axis_value(base, axis);
    let hi = match axis {
        ReferenceAxis::Reward => b + REWARD_TOLERANCE,
        ReferenceAxis::Diversity => b + DIVERSITY_TOLERANCE * b.abs(),
    };
    let mut best: Option<&ParetoRecord> = None;
    for c in candidates {
        let v = axis_value(c, axis);
        if v >= b && v <= hi && best.is_none_or(|cur| v - b < axis_value(cur, axis) - b) {
            best = Some(c);
        }
    }
    best
}

/// Headline comparison of one candidate run against a baseline run.
pub fn compare_records(baseline: &[ParetoRecord], candidate: &[ParetoRecord], axis: ReferenceAxis) -> Result<Comparison> {
    ensure(!baseline.is_empty() && !candidate.is_empty(), || "empty pareto records".into())?;
    let trained_only = baseline.iter().any(|b| b.checkpoint_epoch > 0);
    let mut headline: Option<(&ParetoRecord, &ParetoRecord)> = None;
    for b in baseline.iter().filter(|b| !trained_only || b.checkpoint_epoch > 0) {
        let Some(c) = match_checkpoint(b, candidate, axis) else {
            continue;
        };
        let harder = match (axis, headline) {
            (_, None) => true,
            (ReferenceAxis::Reward, Some((hb, _))) => b.mean_reward > hb.mean_reward,
            (ReferenceAxis::Diversity, Some((hb, _))) => b.dreamsim_style_diversity < hb.dreamsim_style_diversity,
        };
        if harder {
            headline = Some((b, c));
        }
    }
    Ok(match headline {
        None => Comparison::NoOverlap,
        Some((b, c)) => Comparison::Matched {
            baseline: b.clone(),
            candidate: c.clone(),
            gains: gains(b, c),
        },
    })
}

/// Reads `pareto.csv` from each directory; the first run is the baseline.
pub fn compare_runs(run_dirs: &[impl AsRef<Path>], axis: ReferenceAxis) -> Result<GainReport> {
    ensure(run_dirs.len() >= 2, || "need a baseline and at least one candidate run".into())?;
    let load = |d: &Path| -> Result<Vec<ParetoRecord>> {
        let recs = read_pareto(d.join(PARETO_FILE))?;
        ensure(!recs.is_empty(), || format!("{}: empty pareto file", d.display()))?;
        Ok(recs)
    };
    let base_dir = run_dirs[0].as_ref();
    let baseline = load(base_dir)?;
    let mut candidates = Vec::new();
    for d in &run_dirs[1..] {
        let d = d.as_ref();
        let recs = load(d)?;
        candidates.push((d.display().to_string(), compare_records(&baseline, &recs, axis)?));
    }
    Ok(GainReport {
        axis,
        baseline: base_dir.display().to_string(),
        candidates,
    })
}
