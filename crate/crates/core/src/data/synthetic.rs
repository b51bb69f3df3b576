//! Deterministic toy EEG generators: one mode stresses masked reconstruction,
//! the other stresses spatial classification.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::container::{write_dataset, RawDataset, RawEpoch};
use crate::data::samples_per_epoch;
use crate::error::{Error, Result};
use crate::geometry::Montage;

/// Lowest channel frequency in channel-coded mode; channel `c` carries
/// `BASE + c` Hz. The half-integer offset makes each 1-second patch flip sign
/// with patch parity, so reconstructing a masked patch requires knowing where
/// it sits, not just which channel it came from.
pub const CODED_BASE_HZ: f64 = 2.5;

/// Carrier frequency shared by every channel in spatial-class mode.
pub const CLASS_TONE_HZ: f64 = 10.0;

/// Great-circle decay scale (radians) of the class-region gain.
pub const GAIN_SCALE_RAD: f64 = 0.8;

/// Per-subject-per-channel gain jitter range.
pub const JITTER_RANGE: (f64, f64) = (0.8, 1.2);

/// Which synthetic construction to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticMode {
    /// Each channel carries its own sinusoid frequency plus noise.
    ChannelCoded,
    /// Each class activates a scalp region centered on a seed electrode.
    SpatialClass,
}

impl fmt::Display for SyntheticMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticMode::ChannelCoded => write!(f, "channel-coded"),
            SyntheticMode::SpatialClass => write!(f, "spatial-class"),
        }
    }
}

impl FromStr for SyntheticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel-coded" => Ok(SyntheticMode::ChannelCoded),
            "spatial-class" => Ok(SyntheticMode::SpatialClass),
            other => Err(Error::Parse(format!(
                "unknown synthetic mode '{other}' (expected channel-coded or spatial-class)"
            ))),
        }
    }
}

/// Full description of a synthetic dataset; equal specs generate equal bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub mode: SyntheticMode,
    pub channels: usize,
    pub subjects: usize,
    pub epochs_per_subject: usize,
    pub classes: usize,
    pub sampling_rate: f64,
    pub epoch_seconds: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            mode: SyntheticMode::ChannelCoded,
            channels: 8,
            subjects: 10,
            epochs_per_subject: 20,
            classes: 4,
            sampling_rate: 40.0,
            epoch_seconds: 4.0,
            noise: 0.1,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("subjects", self.subjects),
            ("epochs-per-subject", self.epochs_per_subject),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!(
                "noise must be a non-negative standard deviation, got {}",
                self.noise
            )));
        }
        samples_per_epoch(self.sampling_rate, self.epoch_seconds)?;
        let nyquist = self.sampling_rate / 2.0;
        match self.mode {
            SyntheticMode::ChannelCoded => {
                let top = CODED_BASE_HZ + (self.channels - 1) as f64;
                if top >= nyquist {
                    return Err(Error::Config(format!(
                        "channel-coded top frequency {top} Hz reaches the Nyquist limit \
                         {nyquist} Hz; use fewer channels or a higher sampling rate"
                    )));
                }
            }
            SyntheticMode::SpatialClass => {
                if self.classes > self.channels {
                    return Err(Error::Config(format!(
                        "spatial-class needs one seed electrode per class, but {} classes \
                         exceed {} channels",
                        self.classes, self.channels
                    )));
                }
                if CLASS_TONE_HZ >= nyquist {
                    return Err(Error::Config(format!(
                        "spatial-class tone {CLASS_TONE_HZ} Hz reaches the Nyquist limit \
                         {nyquist} Hz"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Seed electrode index for each class: evenly spaced over the montage.
    pub fn class_seed_electrodes(&self) -> Vec<usize> {
        (0..self.classes).map(|k| k * self.channels / self.classes).collect()
    }

    /// Generates the dataset in memory.
    pub fn generate(&self) -> Result<RawDataset> {
        self.validate()?;
        let montage = Montage::synthetic_ring(self.channels)?;
        let t = samples_per_epoch(self.sampling_rate, self.epoch_seconds)?;
        let class_names: Vec<String> = (0..self.classes).map(|k| format!("class_{k}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut epochs = Vec::with_capacity(self.subjects * self.epochs_per_subject);

        match self.mode {
            SyntheticMode::ChannelCoded => {
                for _subject in 0..self.subjects {
                    for e in 0..self.epochs_per_subject {
                        let mut samples = Vec::with_capacity(self.channels * t);
                        for c in 0..self.channels {
                            let freq = CODED_BASE_HZ + c as f64;
                            for n in 0..t {
                                let clean =
                                    (2.0 * PI * freq * n as f64 / self.sampling_rate).sin();
                                let z: f64 = rng.sample(StandardNormal);
                                samples.push((clean + self.noise * z) as f32);
                            }
                        }
                        epochs.push(RawEpoch {
                            subject: epochs.len() / self.epochs_per_subject,
                            label: e % self.classes,
                            samples,
                        });
                    }
                }
            }
            SyntheticMode::SpatialClass => {
                // Per-subject-per-channel jitter is drawn up front so the
                // epoch loop consumes the RNG identically for any noise level.
                let mut jitter = vec![0.0; self.subjects * self.channels];
                for j in jitter.iter_mut() {
                    *j = rng.random_range(JITTER_RANGE.0..JITTER_RANGE.1);
                }
                let seeds = self.class_seed_electrodes();
                let mut gains = vec![0.0; self.classes * self.channels];
                for (k, &seed_electrode) in seeds.iter().enumerate() {
                    for c in 0..self.channels {
                        let d = montage.great_circle(seed_electrode, c)?;
                        gains[k * self.channels + c] = (-(d / GAIN_SCALE_RAD).powi(2)).exp();
                    }
                }
                for s in 0..self.subjects {
                    for e in 0..self.epochs_per_subject {
                        let label = e % self.classes;
                        let phase = rng.random_range(0.0..2.0 * PI);
                        let mut samples = Vec::with_capacity(self.channels * t);
                        for c in 0..self.channels {
                            let amp = gains[label * self.channels + c]
                                * jitter[s * self.channels + c];
                            for n in 0..t {
                                let carrier = (2.0 * PI * CLASS_TONE_HZ * n as f64
                                    / self.sampling_rate
                                    + phase)
                                    .sin();
                                let z: f64 = rng.sample(StandardNormal);
                                samples.push((amp * carrier + self.noise * z) as f32);
                            }
                        }
                        epochs.push(RawEpoch { subject: s, label, samples });
                    }
                }
            }
        }

        Ok(RawDataset {
            sampling_rate: self.sampling_rate,
            channel_names: montage.names().to_vec(),
            class_names,
            montage,
            epochs,
        })
    }

    /// Generates the dataset and writes it in the container format.
    pub fn generate_to_dir(&self, dir: &Path) -> Result<()> {
        write_dataset(dir, &self.generate()?)
    }
}
