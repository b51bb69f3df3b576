//! Self-supervised pretraining: masked-patch reconstruction with per-epoch
//! loss curves and best-checkpoint tracking.

use crate::config::RunConfig;
use crate::data::{EpochSet, Split};
use crate::error::{Error, Result};
use crate::model::{build_pe_tables, ForwardPass, HeadSpec, ModelState, PeTables};
use crate::train::optim::{cosine_lr, AdamW};
use crate::train::report::EpochRow;
use crate::train::{derive_seed, shuffled};

pub(crate) const SHUFFLE_TAG: u64 = 1;
const TRAIN_MASK_TAG: u64 = 2;
const VAL_MASK_TAG: u64 = 3;

/// Everything a pretraining run produces.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub seed: u64,
    pub curve: Vec<EpochRow>,
    /// 1-based epoch with the lowest validation loss (earliest on ties).
    pub best_epoch: usize,
    pub final_state: ModelState,
    pub best_state: ModelState,
}

pub(crate) fn check_dataset(cfg: &RunConfig, data: &EpochSet) -> Result<()> {
    data.validate()?;
    if data.patch_len != cfg.model.patch_len {
        return Err(Error::Config(format!(
            "dataset was patched with length {} but the model expects {}",
            data.patch_len, cfg.model.patch_len
        )));
    }
    if (data.sampling_rate - cfg.data.sampling_rate).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "dataset sampled at {} Hz but the run expects {} Hz",
            data.sampling_rate, cfg.data.sampling_rate
        )));
    }
    Ok(())
}

/// Mean masked-reconstruction loss over `indices`, with mask seeds that
/// depend only on the batch position so successive epochs are comparable.
pub(crate) fn eval_recon(
    state: &ModelState,
    tables: Option<&PeTables>,
    data: &EpochSet,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (bi, chunk) in indices.chunks(batch_size).enumerate() {
        let (x, _) = data.batch(chunk)?;
        let mask_seed = derive_seed(seed, &[VAL_MASK_TAG, bi as u64]);
        let mut fp = ForwardPass::new(state, tables, &|_| false)?;
        let (loss, _) = fp.pretrain_loss(&x, mask_seed)?;
        sum += fp.scalar_value(loss) * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(sum / n as f64)
}

/// Runs masked-patch pretraining for one seed. Fully deterministic: the seed
/// fixes the parameter init, the per-epoch shuffles, and every mask draw.
pub fn run_pretrain(cfg: &RunConfig, data: &EpochSet, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    let train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config(
            "pretraining needs non-empty train and validation splits".into(),
        ));
    }

    let w = data.patches_per_epoch;
    let mut state =
        ModelState::new(cfg.model, &data.montage, w, seed, &HeadSpec::pretrain())?;
    let tables = build_pe_tables(&cfg.model, &data.montage, w)?;
    let settings = cfg.pretrain;

    let steps_per_epoch = train_idx.len().div_ceil(settings.batch_size);
    let last_step = (settings.epochs * steps_per_epoch).saturating_sub(1).max(1);
    let mut opt = AdamW::new(settings.weight_decay)?;
    let mut curve = Vec::with_capacity(settings.epochs);
    let mut best: Option<(f64, usize)> = None;
    let mut best_state = state.clone();
    let mut global = 0usize;

    for epoch in 0..settings.epochs {
        let order = shuffled(&train_idx, derive_seed(seed, &[SHUFFLE_TAG, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (bi, chunk) in order.chunks(settings.batch_size).enumerate() {
            let lr = cosine_lr(global, last_step, settings.lr, settings.lr_min)?;
            let (x, _) = data.batch(chunk)?;
            let mask_seed = derive_seed(seed, &[TRAIN_MASK_TAG, epoch as u64, bi as u64]);
            let grads;
            let loss_value;
            {
                let mut fp = ForwardPass::new(&state, tables.as_ref(), &|_| true)?;
                let (loss, _) = fp.pretrain_loss(&x, mask_seed)?;
                fp.backward(loss)?;
                loss_value = fp.scalar_value(loss);
                grads = fp.grads();
            }
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became non-finite at epoch {epoch}, step {bi}"
                )));
            }
            loss_sum += loss_value * chunk.len() as f64;
            count += chunk.len();
            opt.step(&mut state.params, &grads, lr)?;
            global += 1;
        }
        let train_loss = loss_sum / count as f64;
        let val_loss =
            eval_recon(&state, tables.as_ref(), data, &val_idx, settings.batch_size, seed)?;
        curve.push(EpochRow { epoch: epoch + 1, train_loss, val_loss });
        if best.is_none_or(|(b, _)| val_loss < b) {
            best = Some((val_loss, epoch));
            best_state = state.clone();
        }
    }

    let best_epoch = best.expect("at least one epoch ran").1 + 1;
    Ok(PretrainOutcome { seed, curve, best_epoch, final_state: state, best_state })
}
