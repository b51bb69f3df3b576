//! Epoch containers, per-channel normalization, patching, and subject-level
//! train/val/test assignment.

pub mod container;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Montage;
use crate::tensor::Tensor;

/// Division guard so channels that are identically zero stay zero.
pub const NORM_EPS: f64 = 1e-8;

/// Default seed for the subject shuffle behind split assignment.
pub const SPLIT_SEED: u64 = 42;

/// Corpus slice a subject's epochs belong to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Subject fractions assigned to train/val/test, in that order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.70, val: 0.15, test: 0.15 }
    }
}

impl SplitFractions {
    /// Checks each fraction lies in [0, 1] and that they sum to one.
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !f.is_finite() || !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "split fraction {name}={f} must lie in [0, 1]"
                )));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// One labeled multi-channel recording in raw signal units, row-major `[C, T]`.
#[derive(Clone, Debug)]
pub struct Recording {
    pub subject: usize,
    pub label: usize,
    pub sampling_rate: f64,
    pub samples: Tensor,
}

/// Integer sample count for an epoch of `epoch_seconds` at `sampling_rate`.
pub fn samples_per_epoch(sampling_rate: f64, epoch_seconds: f64) -> Result<usize> {
    if !(sampling_rate.is_finite() && sampling_rate > 0.0) {
        return Err(Error::Config(format!(
            "sampling rate must be positive, got {sampling_rate}"
        )));
    }
    if !(epoch_seconds.is_finite() && epoch_seconds > 0.0) {
        return Err(Error::Config(format!(
            "epoch length must be positive, got {epoch_seconds} s"
        )));
    }
    let exact = sampling_rate * epoch_seconds;
    let rounded = exact.round();
    if (exact - rounded).abs() > 1e-6 || rounded < 1.0 {
        return Err(Error::Config(format!(
            "epoch of {epoch_seconds} s at {sampling_rate} Hz is not a whole number of samples"
        )));
    }
    Ok(rounded as usize)
}

/// Divides each channel by `max(max |x|, eps)`; zero channels stay zero.
pub fn normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Config(format!("normalization eps must be positive, got {eps}")));
    }
    if x.rank() != 2 {
        return Err(Error::Shape(format!(
            "normalize expects a [channels, samples] tensor, got {:?}",
            x.shape()
        )));
    }
    let (c, t) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; c * t];
    for ch in 0..c {
        let row = &x.data()[ch * t..(ch + 1) * t];
        let max_abs = row.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let denom = max_abs.max(eps);
        for (o, v) in out[ch * t..(ch + 1) * t].iter_mut().zip(row) {
            *o = v / denom;
        }
    }
    Tensor::new(&[c, t], out)
}

/// Reshapes one epoch `[C, T]` into non-overlapping patches `[C, w, t]`.
pub fn patch(epoch: &Tensor, patch_len: usize) -> Result<Tensor> {
    if epoch.rank() != 2 {
        return Err(Error::Shape(format!(
            "patch expects a [channels, samples] tensor, got {:?}",
            epoch.shape()
        )));
    }
    let (c, t_epoch) = (epoch.shape()[0], epoch.shape()[1]);
    if patch_len == 0 || t_epoch % patch_len != 0 {
        return Err(Error::Config(format!(
            "epoch of {t_epoch} samples is not divisible by patch length {patch_len}"
        )));
    }
    let w = t_epoch / patch_len;
    Tensor::new(&[c, w, patch_len], epoch.data().to_vec())
}

/// Cuts a recording into fixed-length epochs and patches each one.
///
/// Returns an empty list (not an error) when the recording is shorter than
/// one epoch; trailing samples that do not fill an epoch are dropped.
pub fn epoch_and_patch(
    rec: &Recording,
    epoch_seconds: f64,
    patch_len: usize,
) -> Result<Vec<Tensor>> {
    if rec.samples.rank() != 2 {
        return Err(Error::Shape(format!(
            "recording samples must be [channels, samples], got {:?}",
            rec.samples.shape()
        )));
    }
    let t_epoch = samples_per_epoch(rec.sampling_rate, epoch_seconds)?;
    if patch_len == 0 || t_epoch % patch_len != 0 {
        return Err(Error::Config(format!(
            "epoch of {t_epoch} samples is not divisible by patch length {patch_len}"
        )));
    }
    let (c, total) = (rec.samples.shape()[0], rec.samples.shape()[1]);
    let count = total / t_epoch;
    let mut out = Vec::with_capacity(count);
    for e in 0..count {
        let mut chunk = vec![0.0; c * t_epoch];
        for ch in 0..c {
            let src = &rec.samples.data()[ch * total + e * t_epoch..ch * total + (e + 1) * t_epoch];
            chunk[ch * t_epoch..(ch + 1) * t_epoch].copy_from_slice(src);
        }
        out.push(patch(&Tensor::new(&[c, t_epoch], chunk)?, patch_len)?);
    }
    Ok(out)
}

/// Shuffles distinct subjects with a seeded RNG and partitions them by the
/// given fractions (floor rounding, remainder joins the training split).
pub fn split_subjects(
    subjects: &[usize],
    fractions: SplitFractions,
    seed: u64,
) -> Result<BTreeMap<usize, Split>> {
    fractions.validate()?;
    let distinct: BTreeSet<usize> = subjects.iter().copied().collect();
    if distinct.len() != subjects.len() {
        return Err(Error::Config("subject list contains duplicate ids".into()));
    }
    let n = distinct.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "subject-independent splitting needs at least 3 subjects, got {n}"
        )));
    }
    // The 1e-9 nudge keeps floor() from eating products like 0.15*20 that are
    // mathematically integral but land just below an integer in binary.
    let floor_of = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let n_val = floor_of(fractions.val);
    let n_test = floor_of(fractions.test);
    let n_train = n.checked_sub(n_val + n_test).ok_or_else(|| {
        Error::Config(format!(
            "val/test fractions assign {} of {n} subjects, leaving none for training",
            n_val + n_test
        ))
    })?;
    if n_train == 0 {
        return Err(Error::Config("split fractions leave no training subjects".into()));
    }

    let mut order: Vec<usize> = distinct.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut map = BTreeMap::new();
    for (i, subject) in order.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        map.insert(subject, split);
    }
    Ok(map)
}

/// One normalized, patched epoch with its subject and class label.
#[derive(Clone, Debug)]
pub struct PatchedEpoch {
    pub subject: usize,
    pub label: usize,
    /// Patches, `[C, w, t]`.
    pub patches: Tensor,
}

/// A loaded dataset: normalized patched epochs, montage, and split assignment.
#[derive(Clone, Debug)]
pub struct EpochSet {
    pub sampling_rate: f64,
    pub channel_names: Vec<String>,
    pub class_names: Vec<String>,
    pub montage: Montage,
    pub patch_len: usize,
    pub patches_per_epoch: usize,
    pub epochs: Vec<PatchedEpoch>,
    pub split: BTreeMap<usize, Split>,
}

impl EpochSet {
    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Indices of epochs whose subject belongs to `split`, in storage order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.epochs
            .iter()
            .enumerate()
            .filter(|(_, e)| self.split.get(&e.subject) == Some(&split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Stacks the chosen epochs into `[B, C, w, t]` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Contract("cannot build an empty batch".into()));
        }
        let per = self.channels() * self.patches_per_epoch * self.patch_len;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let epoch = self.epochs.get(i).ok_or_else(|| {
                Error::Contract(format!("epoch index {i} out of range ({})", self.epochs.len()))
            })?;
            data.extend_from_slice(epoch.patches.data());
            labels.push(epoch.label);
        }
        let x = Tensor::new(
            &[indices.len(), self.channels(), self.patches_per_epoch, self.patch_len],
            data,
        )?;
        Ok((x, labels))
    }

    /// Checks shape/label consistency and that every subject has a split.
    pub fn validate(&self) -> Result<()> {
        if self.channel_names.len() != self.montage.len() {
            return Err(Error::Config(format!(
                "{} channel names but montage has {} electrodes",
                self.channel_names.len(),
                self.montage.len()
            )));
        }
        let want = [self.channels(), self.patches_per_epoch, self.patch_len];
        for (i, e) in self.epochs.iter().enumerate() {
            if e.patches.shape() != want {
                return Err(Error::Shape(format!(
                    "epoch {i} has patch shape {:?}, expected {want:?}",
                    e.patches.shape()
                )));
            }
            if e.label >= self.num_classes() {
                return Err(Error::Config(format!(
                    "epoch {i} has label {} but only {} classes are declared",
                    e.label,
                    self.num_classes()
                )));
            }
            if !self.split.contains_key(&e.subject) {
                return Err(Error::Config(format!(
                    "subject {} has no split assignment",
                    e.subject
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(c: usize, t: usize, f: impl Fn(usize, usize) -> f64) -> Recording {
        let data: Vec<f64> = (0..c * t).map(|i| f(i / t, i % t)).collect();
        Recording {
            subject: 0,
            label: 0,
            sampling_rate: 100.0,
            samples: Tensor::new(&[c, t], data).unwrap(),
        }
    }

    #[test]
    fn normalize_divides_each_channel_by_its_max_abs() {
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 4.0, 0.0, 0.0, 0.0]).unwrap();
        let y = normalize(&x, NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.25, -0.5, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_is_identity_when_max_abs_is_one() {
        let x = Tensor::new(&[1, 3], vec![0.25, -1.0, 0.5]).unwrap();
        let y = normalize(&x, NORM_EPS).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn normalize_output_stays_in_unit_range_and_is_idempotent() {
        let x = Tensor::new(&[2, 4], vec![3.0, -7.0, 2.0, 5.0, 1e-3, -4e-4, 2e-4, 9e-4]).unwrap();
        let y = normalize(&x, NORM_EPS).unwrap();
        assert!(y.data().iter().all(|v| v.abs() <= 1.0));
        let z = normalize(&y, NORM_EPS).unwrap();
        assert_eq!(z.data(), y.data());
    }

    #[test]
    fn epoch_and_patch_counts_and_reassembles() {
        let r = rec(3, 800, |c, n| (c * 800 + n) as f64 * 1e-3);
        let epochs = epoch_and_patch(&r, 4.0, 100).unwrap();
        assert_eq!(epochs.len(), 2);
        assert_eq!(epochs[0].shape(), &[3, 4, 100]);
        // Concatenating patches reproduces the epoch slice exactly.
        for (e, ep) in epochs.iter().enumerate() {
            for c in 0..3 {
                let row: Vec<f64> =
                    (0..400).map(|n| (c * 800 + e * 400 + n) as f64 * 1e-3).collect();
                assert_eq!(&ep.data()[c * 400..(c + 1) * 400], &row[..]);
            }
        }
    }

    #[test]
    fn epoch_and_patch_short_recording_yields_empty_list() {
        let r = rec(2, 399, |_, _| 0.5);
        assert!(epoch_and_patch(&r, 4.0, 100).unwrap().is_empty());
    }

    #[test]
    fn epoch_and_patch_rejects_non_divisible_patch_length() {
        let r = rec(2, 800, |_, _| 0.5);
        assert!(matches!(epoch_and_patch(&r, 4.0, 150), Err(Error::Config(_))));
        assert!(matches!(
            epoch_and_patch(&rec(2, 800, |_, _| 0.5), 4.005, 100),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_twenty_subjects_gives_fourteen_three_three() {
        let subjects: Vec<usize> = (0..20).collect();
        let map = split_subjects(&subjects, SplitFractions::default(), SPLIT_SEED).unwrap();
        let count = |s: Split| map.values().filter(|&&v| v == s).count();
        assert_eq!(count(Split::Train), 14);
        assert_eq!(count(Split::Val), 3);
        assert_eq!(count(Split::Test), 3);
    }

    #[test]
    fn split_is_deterministic_and_rejects_tiny_or_duplicated_inputs() {
        let subjects: Vec<usize> = (100..110).collect();
        let a = split_subjects(&subjects, SplitFractions::default(), 7).unwrap();
        let b = split_subjects(&subjects, SplitFractions::default(), 7).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            split_subjects(&[1, 2], SplitFractions::default(), 7),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            split_subjects(&[1, 2, 2, 3], SplitFractions::default(), 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_stacks_epochs_and_labels_in_order() {
        let montage = Montage::synthetic_ring(2).unwrap();
        let mk = |subject: usize, label: usize, fill: f64| PatchedEpoch {
            subject,
            label,
            patches: Tensor::from_elem(&[2, 2, 3], fill).unwrap(),
        };
        let set = EpochSet {
            sampling_rate: 10.0,
            channel_names: montage.names().to_vec(),
            class_names: vec!["a".into(), "b".into()],
            montage,
            patch_len: 3,
            patches_per_epoch: 2,
            epochs: vec![mk(0, 0, 0.1), mk(1, 1, 0.2), mk(2, 0, 0.3)],
            split: BTreeMap::from([(0, Split::Train), (1, Split::Val), (2, Split::Train)]),
        };
        set.validate().unwrap();
        assert_eq!(set.indices(Split::Train), vec![0, 2]);
        let (x, labels) = set.batch(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 2, 3]);
        assert_eq!(labels, vec![0, 0]);
        assert!(x.data()[..12].iter().all(|&v| v == 0.3));
        assert!(x.data()[12..].iter().all(|&v| v == 0.1));
    }

    proptest! {
        #[test]
        fn normalize_is_scale_invariant(
            row in proptest::collection::vec(-100.0_f64..100.0, 4..12),
            alpha in 1e-3_f64..1e3,
        ) {
            prop_assume!(row.iter().any(|v| v.abs() > 1e-6));
            let t = row.len();
            let x = Tensor::new(&[1, t], row.clone()).unwrap();
            let scaled =
                Tensor::new(&[1, t], row.iter().map(|v| v * alpha).collect::<Vec<_>>()).unwrap();
            let a = normalize(&x, NORM_EPS).unwrap();
            let b = normalize(&scaled, NORM_EPS).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
            }
        }

        #[test]
        fn normalize_by_power_of_two_is_bit_exact(
            row in proptest::collection::vec(-100.0_f64..100.0, 4..12),
            exp in -6_i32..7,
        ) {
            prop_assume!(row.iter().any(|v| v.abs() > 1e-6));
            let alpha = (2.0_f64).powi(exp);
            let t = row.len();
            let x = Tensor::new(&[1, t], row.clone()).unwrap();
            let scaled =
                Tensor::new(&[1, t], row.iter().map(|v| v * alpha).collect::<Vec<_>>()).unwrap();
            let a = normalize(&x, NORM_EPS).unwrap();
            let b = normalize(&scaled, NORM_EPS).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }

        #[test]
        fn split_partitions_subjects_exactly(
            n in 3_usize..60,
            seed in 0_u64..1000,
        ) {
            let subjects: Vec<usize> = (0..n).map(|i| i * 17 + 3).collect();
            let map = split_subjects(&subjects, SplitFractions::default(), seed).unwrap();
            prop_assert_eq!(map.len(), n);
            for s in &subjects {
                prop_assert!(map.contains_key(s));
            }
            let val = map.values().filter(|&&v| v == Split::Val).count();
            let test = map.values().filter(|&&v| v == Split::Test).count();
            prop_assert_eq!(val, (0.15 * n as f64 + 1e-9).floor() as usize);
            prop_assert_eq!(test, (0.15 * n as f64 + 1e-9).floor() as usize);
        }
    }
}
