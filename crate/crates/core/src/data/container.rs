//! On-disk dataset directory: `meta.json`, packed little-endian f32 samples
//! in `data.bin`, and the montage file.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    normalize, patch, split_subjects, EpochSet, PatchedEpoch, SplitFractions, NORM_EPS,
};
use crate::error::{Error, Result};
use crate::geometry::Montage;
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.bin";
pub const MONTAGE_FILE: &str = "montage.txt";

/// Index entry for one stored epoch; `offset` counts f32 elements into
/// `data.bin`, where the epoch is laid out row-major `[C, T]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub subject: usize,
    pub label: usize,
    pub offset: u64,
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub sampling_rate: f64,
    pub channel_names: Vec<String>,
    pub montage_file: String,
    pub class_names: Vec<String>,
    pub epochs: Vec<EpochRecord>,
}

/// One stored epoch: raw (unnormalized) samples, row-major `[C, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEpoch {
    pub subject: usize,
    pub label: usize,
    pub samples: Vec<f32>,
}

/// A dataset held in memory exactly as the container stores it.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub sampling_rate: f64,
    pub channel_names: Vec<String>,
    pub class_names: Vec<String>,
    pub montage: Montage,
    pub epochs: Vec<RawEpoch>,
}

impl RawDataset {
    /// Samples per epoch per channel; all epochs must agree.
    pub fn epoch_samples(&self) -> Result<usize> {
        let c = self.channel_names.len();
        let first = self
            .epochs
            .first()
            .ok_or_else(|| Error::Config("dataset contains no epochs".into()))?;
        if c == 0 || first.samples.len() % c != 0 {
            return Err(Error::Parse(format!(
                "epoch of {} samples is not a multiple of {c} channels",
                first.samples.len()
            )));
        }
        let t = first.samples.len() / c;
        for (i, e) in self.epochs.iter().enumerate() {
            if e.samples.len() != c * t {
                return Err(Error::Parse(format!(
                    "epoch {i} has {} samples, expected {}",
                    e.samples.len(),
                    c * t
                )));
            }
        }
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if self.montage.names() != &self.channel_names[..] {
            return Err(Error::Parse(
                "channel names do not match the montage electrode names".into(),
            ));
        }
        if !(self.sampling_rate.is_finite() && self.sampling_rate > 0.0) {
            return Err(Error::Parse(format!(
                "sampling rate must be positive, got {}",
                self.sampling_rate
            )));
        }
        for (i, e) in self.epochs.iter().enumerate() {
            if e.label >= self.class_names.len() {
                return Err(Error::Parse(format!(
                    "epoch {i} has label {} but only {} classes are declared",
                    e.label,
                    self.class_names.len()
                )));
            }
            if let Some(bad) = e.samples.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "epoch {i} contains a non-finite sample ({bad})"
                )));
            }
        }
        self.epoch_samples().map(|_| ())
    }
}

/// Writes `meta.json`, `data.bin`, and the montage file into `dir`.
pub fn write_dataset(dir: &Path, ds: &RawDataset) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;

    let mut records = Vec::with_capacity(ds.epochs.len());
    let mut blob = Vec::new();
    let mut offset = 0u64;
    for e in &ds.epochs {
        records.push(EpochRecord { subject: e.subject, label: e.label, offset });
        for v in &e.samples {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += e.samples.len() as u64;
    }
    let meta = DatasetMeta {
        sampling_rate: ds.sampling_rate,
        channel_names: ds.channel_names.clone(),
        montage_file: MONTAGE_FILE.to_string(),
        class_names: ds.class_names.clone(),
        epochs: records,
    };
    let mut meta_text = serde_json::to_string_pretty(&meta)?;
    meta_text.push('\n');
    fs::write(dir.join(META_FILE), meta_text)?;
    fs::write(dir.join(DATA_FILE), blob)?;
    fs::write(dir.join(MONTAGE_FILE), ds.montage.to_file_string())?;
    Ok(())
}

/// Reads a dataset directory back into memory, validating the layout.
pub fn read_dataset(dir: &Path) -> Result<RawDataset> {
    let meta_text = fs::read_to_string(dir.join(META_FILE))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)?;
    let montage = Montage::load(&dir.join(&meta.montage_file))?;
    let bytes = fs::read(dir.join(DATA_FILE))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse(format!(
            "data.bin holds {} bytes, not a multiple of 4",
            bytes.len()
        )));
    }
    let total = (bytes.len() / 4) as u64;
    let c = meta.channel_names.len() as u64;
    if c == 0 {
        return Err(Error::Parse("dataset declares no channels".into()));
    }

    let mut epochs = Vec::with_capacity(meta.epochs.len());
    for (i, rec) in meta.epochs.iter().enumerate() {
        let end = match meta.epochs.get(i + 1) {
            Some(next) => next.offset,
            None => total,
        };
        if rec.offset >= end || end > total {
            return Err(Error::Parse(format!(
                "epoch {i} spans offsets {}..{end} in a file of {total} f32 elements",
                rec.offset
            )));
        }
        let len = end - rec.offset;
        if len % c != 0 {
            return Err(Error::Parse(format!(
                "epoch {i} holds {len} f32 elements, not a multiple of {c} channels"
            )));
        }
        let mut samples = Vec::with_capacity(len as usize);
        for k in 0..len as usize {
            let at = (rec.offset as usize + k) * 4;
            samples.push(f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")));
        }
        epochs.push(RawEpoch { subject: rec.subject, label: rec.label, samples });
    }
    if let Some(first) = meta.epochs.first() {
        if first.offset != 0 {
            return Err(Error::Parse(format!(
                "first epoch starts at offset {}, expected 0",
                first.offset
            )));
        }
    } else if total != 0 {
        return Err(Error::Parse(format!(
            "data.bin holds {total} f32 elements but meta.json lists no epochs"
        )));
    }

    let ds = RawDataset {
        sampling_rate: meta.sampling_rate,
        channel_names: meta.channel_names,
        class_names: meta.class_names,
        montage,
        epochs,
    };
    ds.validate()?;
    Ok(ds)
}

/// Loads a dataset, normalizes each epoch per channel, patches it, and
/// assigns subjects to splits. Rejects a sampling-rate mismatch.
pub fn load_epoch_set(
    dir: &Path,
    expected_rate: f64,
    patch_len: usize,
    fractions: SplitFractions,
    split_seed: u64,
) -> Result<EpochSet> {
    let raw = read_dataset(dir)?;
    if (raw.sampling_rate - expected_rate).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "dataset sampled at {} Hz but the run expects {} Hz; resampling is not performed",
            raw.sampling_rate, expected_rate
        )));
    }
    let c = raw.channel_names.len();
    let t_epoch = raw.epoch_samples()?;
    if patch_len == 0 || t_epoch % patch_len != 0 {
        return Err(Error::Config(format!(
            "epoch of {t_epoch} samples is not divisible by patch length {patch_len}"
        )));
    }

    let mut epochs = Vec::with_capacity(raw.epochs.len());
    for e in &raw.epochs {
        let wide: Vec<f64> = e.samples.iter().map(|&v| v as f64).collect();
        let normalized = normalize(&Tensor::new(&[c, t_epoch], wide)?, NORM_EPS)?;
        epochs.push(PatchedEpoch {
            subject: e.subject,
            label: e.label,
            patches: patch(&normalized, patch_len)?,
        });
    }

    let subjects: Vec<usize> =
        epochs.iter().map(|e| e.subject).collect::<BTreeSet<_>>().into_iter().collect();
    let split = split_subjects(&subjects, fractions, split_seed)?;

    let set = EpochSet {
        sampling_rate: raw.sampling_rate,
        channel_names: raw.channel_names,
        class_names: raw.class_names,
        montage: raw.montage,
        patch_len,
        patches_per_epoch: t_epoch / patch_len,
        epochs,
        split,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, SPLIT_SEED};

    fn tiny_dataset(subjects: usize) -> RawDataset {
        let montage = Montage::synthetic_ring(2).unwrap();
        let channel_names = montage.names().to_vec();
        let mut epochs = Vec::new();
        for s in 0..subjects {
            for e in 0..2usize {
                let samples: Vec<f32> =
                    (0..2 * 8).map(|i| (s * 100 + e * 10 + i) as f32 * 0.01 - 0.5).collect();
                epochs.push(RawEpoch { subject: s, label: e % 2, samples });
            }
        }
        RawDataset {
            sampling_rate: 8.0,
            channel_names,
            class_names: vec!["a".into(), "b".into()],
            montage,
            epochs,
        }
    }

    #[test]
    fn roundtrip_preserves_every_sample_bit() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(4);
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn unknown_meta_keys_and_truncated_data_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &tiny_dataset(4)).unwrap();

        let meta_path = dir.path().join(META_FILE);
        let mangled = fs::read_to_string(&meta_path)
            .unwrap()
            .replacen("\"sampling_rate\"", "\"surprise\": 1, \"sampling_rate\"", 1);
        fs::write(&meta_path, mangled).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Json(_))));

        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &tiny_dataset(4)).unwrap();
        let data_path = dir2.path().join(DATA_FILE);
        let bytes = fs::read(&data_path).unwrap();
        fs::write(&data_path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_dataset(dir2.path()), Err(Error::Parse(_))));
    }

    #[test]
    fn non_finite_samples_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny_dataset(4);
        write_dataset(dir.path(), &ds).unwrap();
        ds.epochs[1].samples[3] = f32::NAN;
        assert!(matches!(write_dataset(dir.path(), &ds), Err(Error::Numeric(_))));
        let data_path = dir.path().join(DATA_FILE);
        let mut bytes = fs::read(&data_path).unwrap();
        bytes[0..4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&data_path, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Numeric(_))));
    }

    #[test]
    fn load_epoch_set_normalizes_patches_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(5);
        write_dataset(dir.path(), &ds).unwrap();
        let set =
            load_epoch_set(dir.path(), 8.0, 4, SplitFractions::default(), SPLIT_SEED).unwrap();
        set.validate().unwrap();
        assert_eq!(set.patches_per_epoch, 2);
        assert_eq!(set.epochs.len(), 10);
        // Per-channel max-abs after normalization is exactly 1.
        for e in &set.epochs {
            for c in 0..2 {
                let row = &e.patches.data()[c * 8..(c + 1) * 8];
                let m = row.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                assert_eq!(m, 1.0);
            }
        }
        // First epoch, channel 0: hand-normalized raw samples.
        let raw: Vec<f64> = (0..8).map(|i| (i as f32 * 0.01 - 0.5) as f64).collect();
        let max = raw.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let expect: Vec<f64> = raw.iter().map(|v| v / max).collect();
        assert_eq!(&set.epochs[0].patches.data()[..8], &expect[..]);
        // Every subject landed in exactly one split.
        assert_eq!(set.split.len(), 5);
    }

    #[test]
    fn load_epoch_set_rejects_rate_and_patch_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &tiny_dataset(4)).unwrap();
        let err =
            load_epoch_set(dir.path(), 200.0, 4, SplitFractions::default(), SPLIT_SEED)
                .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("200"));
        assert!(matches!(
            load_epoch_set(dir.path(), 8.0, 3, SplitFractions::default(), SPLIT_SEED),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_assignment_uses_subject_ids_not_epoch_order() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &tiny_dataset(6)).unwrap();
        let set =
            load_epoch_set(dir.path(), 8.0, 4, SplitFractions::default(), SPLIT_SEED).unwrap();
        for e in &set.epochs {
            let split = set.split[&e.subject];
            for other in &set.epochs {
                if other.subject == e.subject {
                    assert_eq!(set.split[&other.subject], split);
                }
            }
        }
        let val: Vec<usize> = set.indices(Split::Val);
        let test: Vec<usize> = set.indices(Split::Test);
        let train: Vec<usize> = set.indices(Split::Train);
        assert_eq!(val.len() + test.len() + train.len(), set.epochs.len());
    }
}
