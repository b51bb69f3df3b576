//! Optimization, losses, and the three run protocols: masked-reconstruction
//! pretraining, frozen-backbone linear probing, and full fine-tuning.

mod downstream;
mod optim;
mod pretrain;
mod report;
#[cfg(test)]
pub(crate) mod testutil;

pub use downstream::{
    run_finetune, run_probe, transfer_from_checkpoint, DownstreamOutcome, TransferOutcome,
};
pub use optim::{cosine_lr, AdamW, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use pretrain::{run_pretrain, PretrainOutcome};
pub use report::{
    curve_csv, metrics_csv, report_json, select_best_epoch, summarize, ClassificationReport,
    EpochRow, MetricSummary, PretrainReport, PretrainSeedRow, SeedMetrics,
};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// The three run protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Pretrain,
    Probe,
    Finetune,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Pretrain => "pretrain",
            Protocol::Probe => "probe",
            Protocol::Finetune => "finetune",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Protocol::Pretrain),
            "probe" => Ok(Protocol::Probe),
            "finetune" => Ok(Protocol::Finetune),
            other => Err(Error::Parse(format!(
                "unknown protocol '{other}' (expected pretrain, probe, or finetune)"
            ))),
        }
    }
}

fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a run seed with context words (role tag, epoch, step, ...) into an
/// independent stream seed; pure arithmetic, identical on every platform.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(base);
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// Returns `indices` shuffled by a RNG seeded with `seed`.
pub(crate) fn shuffled(indices: &[usize], seed: u64) -> Vec<usize> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

/// Cross-entropy of `logits [B, K]` against smoothed targets
/// `(1 - alpha) * onehot + alpha / K`, averaged over the batch.
pub fn smoothed_ce(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    alpha: f64,
) -> Result<NodeId> {
    if !(alpha.is_finite() && (0.0..1.0).contains(&alpha)) {
        return Err(Error::Config(format!(
            "label smoothing must lie in [0, 1), got {alpha}"
        )));
    }
    let shape = tape.tensor(logits)?.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("logits must be [batch, classes], got {shape:?}")));
    }
    let (b, k) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {b} logits rows",
            labels.len()
        )));
    }
    let mut targets = vec![alpha / k as f64; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Contract(format!("label {y} out of range for {k} classes")));
        }
        targets[i * k + y] += 1.0 - alpha;
    }
    let log_probs = tape.log_softmax(logits, 1)?;
    let t = tape.constant(&Tensor::new(&[b, k], targets)?);
    let weighted = tape.mul(log_probs, t)?;
    let total = tape.sum_all(weighted)?;
    tape.scale(total, -1.0 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, FD_STEP};
    use approx::assert_relative_eq;

    fn ce_value(logits: Vec<f64>, shape: &[usize], labels: &[usize], alpha: f64) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(shape, logits).unwrap());
        let loss = smoothed_ce(&mut tape, x, labels, alpha).unwrap();
        tape.value(loss)[0]
    }

    #[test]
    fn uniform_logits_cost_log_k_for_any_smoothing() {
        for alpha in [0.0, 0.1, 0.5] {
            let loss = ce_value(vec![0.0; 8], &[2, 4], &[1, 3], alpha);
            assert_relative_eq!(loss, (4.0_f64).ln(), max_relative = 1e-12);
        }
    }

    #[test]
    fn two_class_hand_example_matches_closed_form() {
        let loss = ce_value(vec![(9.0_f64).ln(), 0.0], &[1, 2], &[0], 0.1);
        let want = -(0.95 * (0.9_f64).ln() + 0.05 * (0.1_f64).ln());
        assert_relative_eq!(loss, want, max_relative = 1e-12);
    }

    #[test]
    fn confident_correct_prediction_without_smoothing_costs_nothing() {
        let loss = ce_value(vec![30.0, 0.0], &[1, 2], &[0], 0.0);
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn bad_labels_and_smoothing_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        assert!(smoothed_ce(&mut tape, x, &[2], 0.1).is_err());
        assert!(smoothed_ce(&mut tape, x, &[0, 0], 0.1).is_err());
        assert!(smoothed_ce(&mut tape, x, &[0], 1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Tensor::new(
            &[3, 4],
            vec![0.3, -0.7, 1.2, 0.1, -0.4, 0.8, 0.0, -1.1, 0.6, 0.2, -0.9, 0.5],
        )
        .unwrap();
        let report = grad_check("smoothed cross-entropy", &[logits], FD_STEP, None, |tape, ids| {
            smoothed_ce(tape, ids[0], &[2, 0, 3], 0.1)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn derived_seeds_are_stable_and_context_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn protocol_names_roundtrip() {
        for p in [Protocol::Pretrain, Protocol::Probe, Protocol::Finetune] {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
        assert!("pilates".parse::<Protocol>().is_err());
    }
}
