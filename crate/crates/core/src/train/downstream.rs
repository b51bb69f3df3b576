//! Downstream protocols on top of a pretrained checkpoint: weight transfer,
//! frozen-backbone linear probing, and full fine-tuning.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::RunConfig;
use crate::data::{EpochSet, Split};
use crate::error::{Error, Result};
use crate::metrics::{balanced_accuracy, cohens_kappa, weighted_f1, ConfusionMatrix};
use crate::model::{build_pe_tables, ForwardPass, HeadKind, HeadSpec, ModelState, PeTables};
use crate::posenc::PeKind;
use crate::tensor::{Tape, Tensor};
use crate::train::optim::{cosine_lr, AdamW};
use crate::train::pretrain::SHUFFLE_TAG;
use crate::train::{derive_seed, shuffled, smoothed_ce, Protocol};

/// What weight transfer did with each target parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferOutcome {
    /// Target parameters overwritten with checkpoint values.
    pub copied: Vec<String>,
    /// Target parameters kept at their fresh initialisation.
    pub reinitialized: Vec<String>,
    /// Whether channel names and patch count match the checkpoint.
    pub montage_matches: bool,
}

/// Copies every checkpoint parameter whose name and shape match a target
/// parameter, with two exceptions: task heads (`head.cls.*`) always start
/// fresh, and learnable positional tables (`pe.*`) stay fresh when the
/// montage changed, because those tables are indexed by training-time
/// channel and patch position.
pub fn transfer_from_checkpoint(
    target: &mut ModelState,
    source: &ModelState,
) -> TransferOutcome {
    let montage_matches = source.channel_names == target.channel_names
        && source.patches_per_epoch == target.patches_per_epoch;
    let block_pe = target.config.pe.kind == PeKind::Learnable && !montage_matches;
    let mut copied = BTreeSet::new();
    for (name, value) in &source.params {
        if name.starts_with("head.cls.") || (block_pe && name.starts_with("pe.")) {
            continue;
        }
        if let Some(slot) = target.params.get_mut(name) {
            if slot.shape() == value.shape() {
                *slot = value.clone();
                copied.insert(name.clone());
            }
        }
    }
    let reinitialized = target
        .params
        .keys()
        .filter(|name| !copied.contains(*name))
        .cloned()
        .collect();
    TransferOutcome { copied: copied.into_iter().collect(), reinitialized, montage_matches }
}

/// Everything a probe or fine-tuning run produces.
#[derive(Debug, Clone)]
pub struct DownstreamOutcome {
    pub seed: u64,
    pub protocol: Protocol,
    /// Validation Cohen's kappa after each training epoch.
    pub val_kappa: Vec<f64>,
    /// 1-based epoch with the highest validation kappa (earliest on ties).
    pub best_epoch: usize,
    pub test_balanced_accuracy: f64,
    pub test_kappa: f64,
    pub test_weighted_f1: f64,
    /// Model restored to the best-kappa epoch.
    pub state: ModelState,
    pub transfer: TransferOutcome,
}

fn check_downstream(cfg: &RunConfig, source: &ModelState, data: &EpochSet) -> Result<()> {
    cfg.validate()?;
    data.validate()?;
    if data.patch_len != source.config.patch_len {
        return Err(Error::Config(format!(
            "dataset was patched with length {} but the checkpoint expects {}",
            data.patch_len, source.config.patch_len
        )));
    }
    if (data.sampling_rate - cfg.data.sampling_rate).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "dataset sampled at {} Hz but the run expects {} Hz",
            data.sampling_rate, cfg.data.sampling_rate
        )));
    }
    if data.num_classes() < 2 {
        return Err(Error::Config(format!(
            "classification needs at least 2 classes, dataset has {}",
            data.num_classes()
        )));
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        if data.indices(split).is_empty() {
            return Err(Error::Config(format!("the {split} split is empty")));
        }
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn param<'a>(params: &'a BTreeMap<String, Tensor>, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .ok_or_else(|| Error::Contract(format!("model has no parameter {name}")))
}

/// (true label, predicted label) pairs over `indices` via full forward passes.
fn eval_pairs_full(
    state: &ModelState,
    tables: Option<&PeTables>,
    data: &EpochSet,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<(usize, usize)>> {
    let k = data.num_classes();
    let mut pairs = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size) {
        let (x, labels) = data.batch(chunk)?;
        let mut fp = ForwardPass::new(state, tables, &|_| false)?;
        let logits = fp.logits(&x)?;
        let values = fp.value(logits);
        for (j, &label) in labels.iter().enumerate() {
            pairs.push((label, argmax(&values[j * k..(j + 1) * k])));
        }
    }
    Ok(pairs)
}

fn test_metrics(pairs: &[(usize, usize)], k: usize) -> Result<(f64, f64, f64)> {
    let cm = ConfusionMatrix::from_pairs(k, pairs)?;
    Ok((balanced_accuracy(&cm)?, cohens_kappa(&cm)?, weighted_f1(&cm)?))
}

/// Runs every epoch through the frozen backbone once and stacks the flattened
/// features into an `[epochs, channels * patches * width]` matrix.
fn cache_features(
    state: &ModelState,
    tables: Option<&PeTables>,
    data: &EpochSet,
    batch_size: usize,
) -> Result<Tensor> {
    let n = data.epochs.len();
    let dim = state.channels() * state.patches_per_epoch * state.config.embed_dim;
    let mut rows = vec![0.0; n * dim];
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(batch_size) {
        let (x, _) = data.batch(chunk)?;
        let mut fp = ForwardPass::new(state, tables, &|_| false)?;
        let features = fp.features(&x)?;
        let values = fp.value(features);
        for (j, &i) in chunk.iter().enumerate() {
            rows[i * dim..(i + 1) * dim].copy_from_slice(&values[j * dim..(j + 1) * dim]);
        }
    }
    Tensor::new(&[n, dim], rows)
}

fn gather_rows(features: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let dim = features.shape()[1];
    let mut out = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        out.extend_from_slice(&features.data()[i * dim..(i + 1) * dim]);
    }
    Tensor::new(&[indices.len(), dim], out)
}

/// One optimizer step on the affine head over a batch of cached features.
/// The graph (affine map, then smoothed cross-entropy) is the same op
/// sequence the full forward pass ends with, so cached training is
/// bit-identical to running the frozen backbone every step.
fn head_step(
    params: &mut BTreeMap<String, Tensor>,
    features: &Tensor,
    batch: &[usize],
    labels: &[usize],
    alpha: f64,
    opt: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let w = tape.leaf(param(params, "head.cls.w0")?);
    let b = tape.leaf(param(params, "head.cls.b0")?);
    let x = tape.constant(&gather_rows(features, batch)?);
    let logits = tape.linear(x, w, b)?;
    let loss = smoothed_ce(&mut tape, logits, labels, alpha)?;
    tape.backward(loss)?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Err(Error::Numeric("probe loss became non-finite".into()));
    }
    let mut grads = BTreeMap::new();
    for (name, id) in [("head.cls.w0", w), ("head.cls.b0", b)] {
        let g = tape
            .grad(id)
            .ok_or_else(|| Error::Contract(format!("{name} received no gradient")))?;
        grads.insert(name.to_string(), g.to_vec());
    }
    opt.step(params, &grads, lr)?;
    Ok(value)
}

/// (true label, predicted label) pairs from the affine head on cached features.
fn head_pairs(
    params: &BTreeMap<String, Tensor>,
    features: &Tensor,
    indices: &[usize],
    labels: &[usize],
) -> Result<Vec<(usize, usize)>> {
    let mut tape = Tape::new();
    let w = tape.constant(param(params, "head.cls.w0")?);
    let b = tape.constant(param(params, "head.cls.b0")?);
    let x = tape.constant(&gather_rows(features, indices)?);
    let logits = tape.linear(x, w, b)?;
    let values = tape.value(logits);
    let k = param(params, "head.cls.b0")?.numel();
    Ok(indices
        .iter()
        .enumerate()
        .map(|(j, &i)| (labels[i], argmax(&values[j * k..(j + 1) * k])))
        .collect())
}

/// Linear probing: transfers the checkpoint into a model with a fresh affine
/// head, freezes everything else, and trains only the head. Backbone
/// features are computed once and cached, which is exact because no frozen
/// parameter ever changes. Learnable positional tables cannot follow a
/// montage change, so that combination is rejected rather than silently
/// probing an untrained table.
pub fn run_probe(
    cfg: &RunConfig,
    source: &ModelState,
    data: &EpochSet,
    seed: u64,
) -> Result<DownstreamOutcome> {
    check_downstream(cfg, source, data)?;
    if cfg.head != HeadKind::Linear1 {
        return Err(Error::Config(format!(
            "linear probing trains a single affine head, not {}; use finetune for deeper heads",
            cfg.head
        )));
    }
    let w = data.patches_per_epoch;
    let montage_matches =
        source.channel_names == data.channel_names && source.patches_per_epoch == w;
    if source.config.pe.kind == PeKind::Learnable && !montage_matches {
        return Err(Error::Protocol(format!(
            "learnable positional tables are tied to the pretraining montage \
             ({} channels x {} patches) and cannot transfer to this dataset \
             ({} channels x {} patches); the variant is excluded from linear \
             probe evaluation on a changed montage",
            source.channels(),
            source.patches_per_epoch,
            data.channels(),
            w,
        )));
    }

    let k = data.num_classes();
    let heads = HeadSpec::classifier(HeadKind::Linear1, k);
    let mut target = ModelState::new(source.config, &data.montage, w, seed, &heads)?;
    let transfer = transfer_from_checkpoint(&mut target, source);
    let tables = build_pe_tables(&target.config, &data.montage, w)?;
    let features = cache_features(&target, tables.as_ref(), data, cfg.probe.batch_size)?;
    let labels: Vec<usize> = data.epochs.iter().map(|e| e.label).collect();

    let settings = cfg.probe;
    let train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    let steps_per_epoch = train_idx.len().div_ceil(settings.batch_size);
    let last_step = (settings.epochs * steps_per_epoch).saturating_sub(1).max(1);
    let mut opt = AdamW::new(settings.weight_decay)?;
    let head_names = ["head.cls.w0", "head.cls.b0"];
    let snapshot = |params: &BTreeMap<String, Tensor>| -> Result<Vec<(String, Tensor)>> {
        head_names
            .iter()
            .map(|n| Ok((n.to_string(), param(params, n)?.clone())))
            .collect()
    };

    let mut best: Option<(f64, usize)> = None;
    let mut best_head = snapshot(&target.params)?;
    let mut val_kappa = Vec::with_capacity(settings.epochs);
    let mut global = 0usize;
    for epoch in 0..settings.epochs {
        let order = shuffled(&train_idx, derive_seed(seed, &[SHUFFLE_TAG, epoch as u64]));
        for chunk in order.chunks(settings.batch_size) {
            let lr = cosine_lr(global, last_step, settings.lr, settings.lr_min)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            head_step(
                &mut target.params,
                &features,
                chunk,
                &batch_labels,
                settings.label_smoothing,
                &mut opt,
                lr,
            )?;
            global += 1;
        }
        let pairs = head_pairs(&target.params, &features, &val_idx, &labels)?;
        let kappa = cohens_kappa(&ConfusionMatrix::from_pairs(k, &pairs)?)?;
        val_kappa.push(kappa);
        if best.is_none_or(|(b, _)| kappa > b) {
            best = Some((kappa, epoch));
            best_head = snapshot(&target.params)?;
        }
    }
    for (name, value) in best_head {
        target.params.insert(name, value);
    }

    let test_idx = data.indices(Split::Test);
    let pairs = head_pairs(&target.params, &features, &test_idx, &labels)?;
    let (bal, kap, f1) = test_metrics(&pairs, k)?;
    Ok(DownstreamOutcome {
        seed,
        protocol: Protocol::Probe,
        val_kappa,
        best_epoch: best.expect("at least one epoch ran").1 + 1,
        test_balanced_accuracy: bal,
        test_kappa: kap,
        test_weighted_f1: f1,
        state: target,
        transfer,
    })
}

/// Full fine-tuning: transfers the checkpoint into a model with a fresh
/// classification head of the configured kind and trains everything except
/// the leftover reconstruction head. After a montage change, learnable
/// positional tables restart from fresh initialisation and train with the
/// rest of the model.
pub fn run_finetune(
    cfg: &RunConfig,
    source: &ModelState,
    data: &EpochSet,
    seed: u64,
) -> Result<DownstreamOutcome> {
    check_downstream(cfg, source, data)?;
    let w = data.patches_per_epoch;
    let k = data.num_classes();
    let heads = HeadSpec::classifier(cfg.head, k);
    let mut target = ModelState::new(source.config, &data.montage, w, seed, &heads)?;
    let transfer = transfer_from_checkpoint(&mut target, source);
    let tables = build_pe_tables(&target.config, &data.montage, w)?;
    let trainable = |name: &str| !name.starts_with("head.recon");

    let settings = cfg.finetune;
    let train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    let steps_per_epoch = train_idx.len().div_ceil(settings.batch_size);
    let last_step = (settings.epochs * steps_per_epoch).saturating_sub(1).max(1);
    let mut opt = AdamW::new(settings.weight_decay)?;

    let mut best: Option<(f64, usize)> = None;
    let mut best_state = target.clone();
    let mut val_kappa = Vec::with_capacity(settings.epochs);
    let mut global = 0usize;
    for epoch in 0..settings.epochs {
        let order = shuffled(&train_idx, derive_seed(seed, &[SHUFFLE_TAG, epoch as u64]));
        for chunk in order.chunks(settings.batch_size) {
            let lr = cosine_lr(global, last_step, settings.lr, settings.lr_min)?;
            let (x, batch_labels) = data.batch(chunk)?;
            let grads;
            let loss_value;
            {
                let mut fp = ForwardPass::new(&target, tables.as_ref(), &trainable)?;
                let logits = fp.logits(&x)?;
                let loss =
                    smoothed_ce(fp.tape_mut(), logits, &batch_labels, settings.label_smoothing)?;
                fp.backward(loss)?;
                loss_value = fp.scalar_value(loss);
                grads = fp.grads();
            }
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became non-finite at epoch {epoch}, step {global}"
                )));
            }
            opt.step(&mut target.params, &grads, lr)?;
            global += 1;
        }
        let pairs =
            eval_pairs_full(&target, tables.as_ref(), data, &val_idx, settings.batch_size)?;
        let kappa = cohens_kappa(&ConfusionMatrix::from_pairs(k, &pairs)?)?;
        val_kappa.push(kappa);
        if best.is_none_or(|(b, _)| kappa > b) {
            best = Some((kappa, epoch));
            best_state = target.clone();
        }
    }

    let test_idx = data.indices(Split::Test);
    let pairs =
        eval_pairs_full(&best_state, tables.as_ref(), data, &test_idx, settings.batch_size)?;
    let (bal, kap, f1) = test_metrics(&pairs, k)?;
    Ok(DownstreamOutcome {
        seed,
        protocol: Protocol::Finetune,
        val_kappa,
        best_epoch: best.expect("at least one epoch ran").1 + 1,
        test_balanced_accuracy: bal,
        test_kappa: kap,
        test_weighted_f1: f1,
        state: best_state,
        transfer,
    })
}
