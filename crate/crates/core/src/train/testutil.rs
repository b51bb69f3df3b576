//! Shared fixtures for training tests: a tiny model config and tiny datasets.

use crate::config::RunConfig;
use crate::data::container::{load_epoch_set, write_dataset};
use crate::data::synthetic::{SyntheticMode, SyntheticSpec};
use crate::data::{EpochSet, SplitFractions, SPLIT_SEED};
use crate::posenc::PeKind;

/// One-layer, 8-wide model on two 8-sample patches; short schedules.
pub(crate) fn tiny_config(kind: PeKind) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.layers = 1;
    cfg.model.heads = 2;
    cfg.model.embed_dim = 8;
    cfg.model.ff_dim = 16;
    cfg.model.patch_len = 8;
    cfg.model.pe.kind = kind;
    cfg.model.pe.kernel_space = 3;
    cfg.model.pe.kernel_time = 1;
    cfg.data.sampling_rate = 40.0;
    cfg.data.epoch_seconds = 0.4; // 16 samples -> two patches of 8
    cfg.pretrain.epochs = 3;
    cfg.pretrain.batch_size = 4;
    cfg.probe.epochs = 3;
    cfg.probe.batch_size = 4;
    cfg.finetune.epochs = 2;
    cfg.finetune.batch_size = 4;
    cfg.seeds = vec![1];
    cfg.validate().unwrap();
    cfg
}

/// Writes a small synthetic dataset and loads it back as an `EpochSet`.
/// Eight subjects split 6/1/1, four epochs each.
pub(crate) fn tiny_dataset(
    mode: SyntheticMode,
    channels: usize,
    classes: usize,
) -> (tempfile::TempDir, EpochSet) {
    let spec = SyntheticSpec {
        mode,
        channels,
        subjects: 8,
        epochs_per_subject: 4,
        classes,
        sampling_rate: 40.0,
        epoch_seconds: 0.4,
        noise: 0.1,
        seed: 9,
    };
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &spec.generate().unwrap()).unwrap();
    let set = load_epoch_set(dir.path(), 40.0, 8, SplitFractions::default(), SPLIT_SEED).unwrap();
    (dir, set)
}
