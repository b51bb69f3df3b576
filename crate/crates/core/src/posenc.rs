//! The five positional-encoding variants under study.
//!
//! * `nope` — no positional information at all,
//! * `spe` — fixed spherical-harmonic-style sinusoids of the electrode
//!   angles plus temporal sinusoids, parameter-free,
//! * `spe-proj` — `spe` with one learnable d x d projection per table,
//! * `learnable` — one trained vector per channel and per patch position,
//! * `acpe` — a depthwise asymmetric 2-D convolution over the
//!   (channel, patch) grid, computed from the embeddings themselves.
//!
//! This module owns the variant configuration, the fixed tables, and the
//! parameter-count accounting; the model module wires encodings into the
//! forward pass.

use crate::error::{Error, Result};
use crate::geometry::SphericalAngles;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Which positional-encoding variant a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeKind {
    Nope,
    Spe,
    SpeProj,
    Learnable,
    Acpe,
}

impl PeKind {
    pub const ALL: [PeKind; 5] =
        [PeKind::Nope, PeKind::Spe, PeKind::SpeProj, PeKind::Learnable, PeKind::Acpe];
}

impl std::fmt::Display for PeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PeKind::Nope => "nope",
            PeKind::Spe => "spe",
            PeKind::SpeProj => "spe-proj",
            PeKind::Learnable => "learnable",
            PeKind::Acpe => "acpe",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nope" => Ok(PeKind::Nope),
            "spe" => Ok(PeKind::Spe),
            "spe-proj" => Ok(PeKind::SpeProj),
            "learnable" => Ok(PeKind::Learnable),
            "acpe" => Ok(PeKind::Acpe),
            other => Err(Error::Parse(format!(
                "unknown positional encoding {other:?} (expected nope, spe, spe-proj, learnable, or acpe)"
            ))),
        }
    }
}

fn default_kernel_space() -> usize {
    7
}

fn default_kernel_time() -> usize {
    3
}

/// Positional-encoding configuration. The kernel sides only apply to `acpe`:
/// `kernel_space` spans channels, `kernel_time` spans patch positions, and
/// the kernel must be wider across space than across time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeConfig {
    pub kind: PeKind,
    #[serde(default = "default_kernel_space")]
    pub kernel_space: usize,
    #[serde(default = "default_kernel_time")]
    pub kernel_time: usize,
}

impl PeConfig {
    pub fn new(kind: PeKind) -> Self {
        PeConfig {
            kind,
            kernel_space: default_kernel_space(),
            kernel_time: default_kernel_time(),
        }
    }

    /// Checks variant-specific constraints for embedding width `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        match self.kind {
            PeKind::Acpe => {
                if self.kernel_space.is_multiple_of(2) || self.kernel_time.is_multiple_of(2) {
                    return Err(Error::Config(format!(
                        "acpe kernel sides must be odd, got {}x{}",
                        self.kernel_space, self.kernel_time
                    )));
                }
                if self.kernel_space <= self.kernel_time {
                    return Err(Error::Config(format!(
                        "acpe kernel must be wider across space than time, got {}x{}",
                        self.kernel_space, self.kernel_time
                    )));
                }
            }
            PeKind::Spe | PeKind::SpeProj => {
                if !d.is_multiple_of(4) || d == 0 {
                    return Err(Error::Config(format!(
                        "spe needs the embedding width divisible by 4, got {d}"
                    )));
                }
            }
            PeKind::Nope | PeKind::Learnable => {}
        }
        Ok(())
    }

    /// Number of trainable parameters the variant adds to a model with
    /// `c` channels, `w` patches per epoch, and embedding width `d`.
    pub fn param_count(&self, c: usize, w: usize, d: usize) -> usize {
        match self.kind {
            PeKind::Nope | PeKind::Spe => 0,
            PeKind::SpeProj => 2 * d * d,
            PeKind::Learnable => (c + w) * d,
            PeKind::Acpe => d * self.kernel_space * self.kernel_time,
        }
    }
}

/// Octave frequency ladder `1, 2, 4, ..., 2^(d/4 - 1)` used by the spherical
/// tables: each angle feeds `d/4` (sin, cos) pairs.
pub fn octave_frequencies(d: usize) -> Result<Vec<f64>> {
    if !d.is_multiple_of(4) || d == 0 {
        return Err(Error::Config(format!(
            "spherical table width must be divisible by 4, got {d}"
        )));
    }
    Ok((0..d / 4).map(|j| (1u64 << j) as f64).collect())
}

/// Fixed spherical channel table, shape `[C, d]`.
///
/// Row `c` holds `sin/cos` of the channel's azimuth at each octave frequency
/// in the first `d/2` columns, then the same for its inclination:
/// `[sin(w1 az), cos(w1 az), ..., sin(w1 incl), cos(w1 incl), ...]`.
pub fn spe_channel_table(angles: &SphericalAngles, d: usize) -> Result<Tensor> {
    let freqs = octave_frequencies(d)?;
    let c = angles.azimuth.len();
    if c == 0 || angles.inclination.len() != c {
        return Err(Error::Geometry(format!(
            "inconsistent angle lists: {} azimuths, {} inclinations",
            c,
            angles.inclination.len()
        )));
    }
    let mut data = Vec::with_capacity(c * d);
    for ch in 0..c {
        for &angle in [angles.azimuth[ch], angles.inclination[ch]].iter() {
            for &w in &freqs {
                data.push((w * angle).sin());
                data.push((w * angle).cos());
            }
        }
    }
    Tensor::new(&[c, d], data)
}

/// Fixed temporal table, shape `[w, d]`: the standard sinusoidal encoding
/// `pos[p, 2i] = sin(p / 10000^(2i/d))`, `pos[p, 2i+1] = cos(...)`.
pub fn temporal_sinusoid_table(w: usize, d: usize) -> Result<Tensor> {
    if w == 0 {
        return Err(Error::Config("temporal table needs at least one position".into()));
    }
    if !d.is_multiple_of(2) || d == 0 {
        return Err(Error::Config(format!(
            "temporal table width must be even, got {d}"
        )));
    }
    let mut data = Vec::with_capacity(w * d);
    for p in 0..w {
        for i in 0..d / 2 {
            let rate = 10000f64.powf(2.0 * i as f64 / d as f64);
            let arg = p as f64 / rate;
            data.push(arg.sin());
            data.push(arg.cos());
        }
    }
    Tensor::new(&[w, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Montage;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;
    use std::str::FromStr;

    #[test]
    fn kind_strings_round_trip() {
        for kind in PeKind::ALL {
            assert_eq!(PeKind::from_str(&kind.to_string()).unwrap(), kind);
        }
        assert!(matches!(PeKind::from_str("rope"), Err(Error::Parse(_))));
    }

    #[test]
    fn validation_enforces_kernel_and_width_rules() {
        let mut cfg = PeConfig::new(PeKind::Acpe);
        assert!(cfg.validate(32).is_ok());
        cfg.kernel_space = 4;
        assert!(cfg.validate(32).is_err());
        cfg.kernel_space = 3;
        assert!(cfg.validate(32).is_err(), "square kernel must be rejected");
        cfg = PeConfig::new(PeKind::Spe);
        assert!(cfg.validate(30).is_err());
        assert!(cfg.validate(32).is_ok());
        assert!(PeConfig::new(PeKind::Nope).validate(30).is_ok());
    }

    #[test]
    fn parameter_counts_match_the_formulas() {
        let (c, w) = (8, 4);
        assert_eq!(PeConfig::new(PeKind::Nope).param_count(c, w, 32), 0);
        assert_eq!(PeConfig::new(PeKind::Spe).param_count(c, w, 32), 0);
        assert_eq!(PeConfig::new(PeKind::SpeProj).param_count(c, w, 32), 2048);
        assert_eq!(PeConfig::new(PeKind::Learnable).param_count(c, w, 32), 384);
        assert_eq!(PeConfig::new(PeKind::Acpe).param_count(c, w, 32), 32 * 7 * 3);
        // Publication-scale width.
        assert_eq!(PeConfig::new(PeKind::SpeProj).param_count(64, 4, 200), 80000);
        assert_eq!(PeConfig::new(PeKind::Acpe).param_count(64, 4, 200), 4200);
    }

    #[test]
    fn octave_ladder_doubles() {
        assert_eq!(octave_frequencies(32).unwrap(), vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0]);
        assert_eq!(octave_frequencies(8).unwrap(), vec![1.0, 2.0]);
        assert!(octave_frequencies(30).is_err());
    }

    #[test]
    fn temporal_table_position_zero_alternates_zero_one() {
        let t = temporal_sinusoid_table(4, 8).unwrap();
        for i in 0..4 {
            assert_eq!(t.get(&[0, 2 * i]), 0.0);
            assert_eq!(t.get(&[0, 2 * i + 1]), 1.0);
        }
        // Position 1, lowest pair runs at rate 1.
        assert_abs_diff_eq!(t.get(&[1, 0]), 1f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(t.get(&[1, 1]), 1f64.cos(), epsilon = 1e-15);
        // Higher pairs slow down by 10000^(2i/d).
        let rate = 10000f64.powf(6.0 / 8.0);
        assert_abs_diff_eq!(t.get(&[1, 6]), (1.0 / rate).sin(), epsilon = 1e-15);
        assert!(temporal_sinusoid_table(4, 7).is_err());
        assert!(temporal_sinusoid_table(0, 8).is_err());
    }

    #[test]
    fn vertex_channel_encodes_as_zero_one_pairs() {
        let m = Montage::synthetic_ring(8).unwrap();
        let table = spe_channel_table(&m.spherical_angles(), 16).unwrap();
        assert_eq!(table.shape(), &[8, 16]);
        // Electrode 0 sits at the vertex: azimuth 0, inclination 0.
        for i in 0..8 {
            assert_eq!(table.get(&[0, 2 * i]), 0.0);
            assert_eq!(table.get(&[0, 2 * i + 1]), 1.0);
        }
    }

    #[test]
    fn equator_channel_matches_analytic_values() {
        let m = Montage::new(vec!["eq".into()], vec![[1.0, 0.0, 0.0]]).unwrap();
        let table = spe_channel_table(&m.spherical_angles(), 16).unwrap();
        // Azimuth 0 in the first half.
        for i in 0..4 {
            assert_eq!(table.get(&[0, 2 * i]), 0.0);
            assert_eq!(table.get(&[0, 2 * i + 1]), 1.0);
        }
        // Inclination pi/2 in the second half, frequencies 1, 2, 4, 8.
        for (j, freq) in [1.0f64, 2.0, 4.0, 8.0].into_iter().enumerate() {
            assert_abs_diff_eq!(table.get(&[0, 8 + 2 * j]), (freq * FRAC_PI_2).sin(), epsilon = 1e-8);
            assert_abs_diff_eq!(table.get(&[0, 8 + 2 * j + 1]), (freq * FRAC_PI_2).cos(), epsilon = 1e-8);
        }
    }

    #[test]
    fn channel_table_is_scale_invariant_and_permutation_equivariant() {
        let m = Montage::synthetic_ring(9).unwrap();
        let base = spe_channel_table(&m.spherical_angles(), 32).unwrap();
        for factor in [0.5, 2.0, 10.0] {
            let scaled =
                spe_channel_table(&m.scaled(factor).unwrap().spherical_angles(), 32).unwrap();
            assert_eq!(base, scaled);
        }
        let perm: Vec<usize> = (0..9).rev().collect();
        let permuted =
            spe_channel_table(&m.permuted(&perm).unwrap().spherical_angles(), 32).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for col in 0..32 {
                assert_eq!(permuted.get(&[new, col]), base.get(&[old, col]));
            }
        }
    }

    proptest! {
        #[test]
        fn table_entries_stay_in_unit_range(
            xs in proptest::collection::vec(-2.0f64..2.0, 5),
            ys in proptest::collection::vec(-2.0f64..2.0, 5),
            zs in proptest::collection::vec(-2.0f64..2.0, 5)
        ) {
            let positions: Vec<[f64; 3]> = xs
                .iter()
                .zip(&ys)
                .zip(&zs)
                .map(|((&x, &y), &z)| [x, y, z])
                .collect();
            prop_assume!(positions.iter().all(|p| p.iter().map(|v| v * v).sum::<f64>() > 1e-4));
            let names = (0..5).map(|i| format!("e{i}")).collect();
            let m = Montage::new(names, positions).unwrap();
            let table = spe_channel_table(&m.spherical_angles(), 16).unwrap();
            for &v in table.data() {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}
