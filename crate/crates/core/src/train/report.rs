//! Report rows, seed aggregation, checkpoint-epoch selection, and the CSV /
//! JSON serializations runs are judged by.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_seeds, SeedSummary};

/// One pretraining epoch: mean train and validation reconstruction losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// `epoch,train_loss,val_loss` CSV for one pretraining run.
pub fn curve_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    out
}

/// Test metrics of one seed's selected checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub best_epoch: usize,
    pub balanced_accuracy: f64,
    pub kappa: f64,
    pub weighted_f1: f64,
}

/// `seed,bal_acc,kappa,weighted_f1` CSV across seeds.
pub fn metrics_csv(rows: &[SeedMetrics]) -> String {
    let mut out = String::from("seed,bal_acc,kappa,weighted_f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.seed, r.balanced_accuracy, r.kappa, r.weighted_f1
        ));
    }
    out
}

/// Mean and std of each reported metric across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub balanced_accuracy: SeedSummary,
    pub kappa: SeedSummary,
    pub weighted_f1: SeedSummary,
}

pub fn summarize(rows: &[SeedMetrics]) -> Result<MetricSummary> {
    let pick = |f: fn(&SeedMetrics) -> f64| -> Result<SeedSummary> {
        aggregate_seeds(&rows.iter().map(f).collect::<Vec<_>>())
    };
    Ok(MetricSummary {
        balanced_accuracy: pick(|r| r.balanced_accuracy)?,
        kappa: pick(|r| r.kappa)?,
        weighted_f1: pick(|r| r.weighted_f1)?,
    })
}

/// One seed's pretraining summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSeedRow {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_val_loss: f64,
    pub final_train_loss: f64,
}

/// JSON report for a multi-seed pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub protocol: String,
    pub pe: String,
    pub rows: Vec<PretrainSeedRow>,
    pub config: RunConfig,
}

/// JSON report for a multi-seed probe or finetune run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub protocol: String,
    pub pe: String,
    pub per_seed: Vec<SeedMetrics>,
    pub summary: MetricSummary,
    pub config: RunConfig,
}

/// Pretty JSON with a trailing newline; field order is fixed by the structs,
/// so equal reports serialize to equal bytes.
pub fn report_json<T: Serialize>(report: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    Ok(text)
}

/// Index of the winning epoch: best value, earliest on ties.
pub fn select_best_epoch(values: &[f64], higher_is_better: bool) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::Contract("cannot select a best epoch from no epochs".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("epoch scores contain a non-finite value".into()));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let wins = if higher_is_better { v > values[best] } else { v < values[best] };
        if wins {
            best = i;
        }
    }
    Ok(best)
}
