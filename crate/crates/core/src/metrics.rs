//! Per-round evaluation and summary statistics: clean/backdoor accuracy,
//! Success Ratio at a threshold, final-round summaries across seeds.

use crate::model::{forward, Example, ModelParams};
use crate::{Error, Result};

/// Metrics recorded after each communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub clean_acc: f64,
    pub backdoor_acc: f64,
    pub adversary_round: bool,
    pub defense_rejections: usize,
}

/// Argmax-prediction accuracy; argmax ties break to the lowest class id.
pub fn accuracy(params: &ModelParams, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0usize;
    for ex in examples {
        let probs = forward(params, &ex.tokens)?;
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        if best == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Fraction of rounds whose backdoor accuracy strictly exceeds the threshold.
pub fn success_ratio(records: &[RoundRecord], threshold: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| r.backdoor_acc > threshold)
        .count();
    hits as f64 / records.len() as f64
}

/// Final-round view of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub final_clean_acc: f64,
    pub final_backdoor_acc: f64,
    /// (threshold, success ratio) pairs.
    pub success_ratios: Vec<(f64, f64)>,
}

pub fn summarize(records: &[RoundRecord], thresholds: &[f64]) -> RunSummary {
    let last = records.last();
    RunSummary {
        final_clean_acc: last.map_or(0.0, |r| r.clean_acc),
        final_backdoor_acc: last.map_or(0.0, |r| r.backdoor_acc),
        success_ratios: thresholds
            .iter()
            .map(|&t| (t, success_ratio(records, t)))
            .collect(),
    }
}

/// Mean and 1-standard-error aggregate across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRunSummary {
    pub runs: usize,
    pub mean_final_clean_acc: f64,
    pub stderr_final_clean_acc: f64,
    pub mean_final_backdoor_acc: f64,
    pub stderr_final_backdoor_acc: f64,
    pub mean_success_ratios: Vec<(f64, f64)>,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

pub fn summarize_runs(summaries: &[RunSummary]) -> MultiRunSummary {
    let clean: Vec<f64> = summaries.iter().map(|s| s.final_clean_acc).collect();
    let backdoor: Vec<f64> = summaries.iter().map(|s| s.final_backdoor_acc).collect();
    let (mc, sc) = mean_stderr(&clean);
    let (mb, sb) = mean_stderr(&backdoor);
    let thresholds: Vec<f64> = summaries
        .first()
        .map(|s| s.success_ratios.iter().map(|&(t, _)| t).collect())
        .unwrap_or_default();
    let mean_success_ratios = thresholds
        .iter()
        .map(|&t| {
            let vals: Vec<f64> = summaries
                .iter()
                .filter_map(|s| {
                    s.success_ratios
                        .iter()
                        .find(|&&(tt, _)| tt == t)
                        .map(|&(_, r)| r)
                })
                .collect();
            (t, mean_stderr(&vals).0)
        })
        .collect();
    MultiRunSummary {
        runs: summaries.len(),
        mean_final_clean_acc: mc,
        stderr_final_clean_acc: sc,
        mean_final_backdoor_acc: mb,
        stderr_final_backdoor_acc: sb,
        mean_success_ratios,
    }
}
