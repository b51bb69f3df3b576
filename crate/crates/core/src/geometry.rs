//! Electrode montages and spherical head geometry.
//!
//! Electrode positions live on an idealised spherical head. Only the
//! direction of each position vector matters; angles are quantised to a
//! fixed grid so that rescaling every position by a common factor (a change
//! of physical units) leaves the derived angles bit-identical.

use crate::error::{Error, Result};
use std::path::Path;

/// Angle quantum: angles snap to multiples of 2^-32 radians (~58 pico-rad),
/// far below any physical placement accuracy.
const ANGLE_QUANTUM_INV: f64 = 4294967296.0;

/// Minimum accepted position-vector norm.
const MIN_NORM: f64 = 1e-9;

/// Named electrode positions in head-centred Cartesian coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Montage {
    names: Vec<String>,
    positions: Vec<[f64; 3]>,
}

/// Per-electrode azimuth and inclination, quantised.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalAngles {
    /// atan2(y, x) in (-pi, pi]; 0 on the polar axis.
    pub azimuth: Vec<f64>,
    /// acos(z / r) in [0, pi]; 0 at the vertex.
    pub inclination: Vec<f64>,
}

impl Montage {
    pub fn new(names: Vec<String>, positions: Vec<[f64; 3]>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Geometry("montage needs at least one electrode".into()));
        }
        if names.len() != positions.len() {
            return Err(Error::Geometry(format!(
                "{} names but {} positions",
                names.len(),
                positions.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Geometry(format!("invalid electrode name {name:?}")));
            }
            if names[..i].contains(name) {
                return Err(Error::Geometry(format!("duplicate electrode name {name:?}")));
            }
        }
        for (name, p) in names.iter().zip(&positions) {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Geometry(format!("non-finite position for {name}")));
            }
            if norm(p) < MIN_NORM {
                return Err(Error::Geometry(format!(
                    "electrode {name} sits at the head centre; direction undefined"
                )));
            }
        }
        Ok(Montage { names, positions })
    }

    /// Parses the plain-text format: one `NAME x y z` line per electrode,
    /// `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut positions = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!(
                    "montage line {}: expected `NAME x y z`, got {raw:?}",
                    lineno + 1
                )));
            }
            let mut p = [0.0; 3];
            for (slot, field) in p.iter_mut().zip(&fields[1..]) {
                *slot = field.parse::<f64>().map_err(|_| {
                    Error::Parse(format!(
                        "montage line {}: bad coordinate {field:?}",
                        lineno + 1
                    ))
                })?;
            }
            names.push(fields[0].to_string());
            positions.push(p);
        }
        Montage::new(names, positions)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Montage::parse(&text)
    }

    /// Serialises back to the `NAME x y z` text format.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (name, p) in self.names.iter().zip(&self.positions) {
            out.push_str(&format!("{name} {} {} {}\n", p[0], p[1], p[2]));
        }
        out
    }

    /// Deterministic synthetic cap layout on the unit sphere: electrode 0 at
    /// the vertex, the rest on rings of up to eight, ring `j` of `R` at
    /// inclination `(pi/2) * j / R`, evenly spaced in azimuth.
    pub fn synthetic_ring(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Geometry("montage needs at least one electrode".into()));
        }
        let width = channels.saturating_sub(1).to_string().len().max(2);
        let mut names = Vec::with_capacity(channels);
        let mut positions = Vec::with_capacity(channels);
        names.push(format!("E{:0width$}", 0));
        positions.push([0.0, 0.0, 1.0]);
        let rest = channels - 1;
        let rings = rest.div_ceil(8);
        let mut placed = 0usize;
        for ring in 1..=rings {
            let on_ring = (rest - placed).min(8);
            let incl = std::f64::consts::FRAC_PI_2 * ring as f64 / rings as f64;
            for i in 0..on_ring {
                let az = 2.0 * std::f64::consts::PI * i as f64 / on_ring as f64;
                names.push(format!("E{:0width$}", placed + i + 1));
                positions.push([
                    incl.sin() * az.cos(),
                    incl.sin() * az.sin(),
                    incl.cos(),
                ]);
            }
            placed += on_ring;
        }
        Montage::new(names, positions)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    /// Quantised spherical angles of every electrode.
    pub fn spherical_angles(&self) -> SphericalAngles {
        let mut azimuth = Vec::with_capacity(self.len());
        let mut inclination = Vec::with_capacity(self.len());
        for p in &self.positions {
            let (az, incl) = cartesian_to_spherical(*p).expect("validated at construction");
            azimuth.push(az);
            inclination.push(incl);
        }
        SphericalAngles { azimuth, inclination }
    }

    /// Copy with every position multiplied by `factor` (a change of units).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::Geometry(format!("scale factor must be positive, got {factor}")));
        }
        let positions = self.positions.iter().map(|p| p.map(|v| v * factor)).collect();
        Montage::new(self.names.clone(), positions)
    }

    /// Copy with electrodes reordered by `perm` (new index -> old index).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if perm.len() != self.len()
            || perm.iter().any(|&p| p >= self.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Geometry(format!(
                "{perm:?} is not a permutation of {} electrodes",
                self.len()
            )));
        }
        let names = perm.iter().map(|&p| self.names[p].clone()).collect();
        let positions = perm.iter().map(|&p| self.positions[p]).collect();
        Montage::new(names, positions)
    }

    /// Great-circle (angular) distance between two electrodes, in radians.
    pub fn great_circle(&self, i: usize, j: usize) -> Result<f64> {
        if i >= self.len() || j >= self.len() {
            return Err(Error::Geometry(format!(
                "electrode index out of range: {i}, {j} with {} electrodes",
                self.len()
            )));
        }
        let (a, b) = (self.positions[i], self.positions[j]);
        let dot = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (norm(&a) * norm(&b));
        Ok(dot.clamp(-1.0, 1.0).acos())
    }
}

fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Snaps an angle to the quantisation grid. Multiples of 2^-32 with the
/// magnitudes involved here (at most pi) are exactly representable, so two
/// computations that land in the same cell yield bit-identical results.
fn quantize_angle(a: f64) -> f64 {
    (a * ANGLE_QUANTUM_INV).round() / ANGLE_QUANTUM_INV
}

/// Converts a head-centred position to quantised `(azimuth, inclination)`.
///
/// Azimuth is `atan2(y, x)` wrapped into `(-pi, pi]` and defined as 0 on the
/// polar axis; inclination is `acos(z / r)` in `[0, pi]`. Only the direction
/// of `p` matters.
pub fn cartesian_to_spherical(p: [f64; 3]) -> Result<(f64, f64)> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Geometry(format!("non-finite position {p:?}")));
    }
    let r = norm(&p);
    if r < MIN_NORM {
        return Err(Error::Geometry(format!(
            "position {p:?} too close to the head centre"
        )));
    }
    let mut azimuth = if p[0] == 0.0 && p[1] == 0.0 {
        0.0
    } else {
        quantize_angle(f64::atan2(p[1], p[0]))
    };
    if azimuth > std::f64::consts::PI || azimuth <= -std::f64::consts::PI {
        azimuth = std::f64::consts::PI;
    }
    let inclination =
        quantize_angle((p[2] / r).clamp(-1.0, 1.0).acos()).clamp(0.0, std::f64::consts::PI);
    Ok((azimuth, inclination))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn reference_directions_map_to_known_angles() {
        let (az, incl) = cartesian_to_spherical([0.0, 0.0, 1.0]).unwrap();
        assert_eq!((az, incl), (0.0, 0.0));
        let (az, incl) = cartesian_to_spherical([0.0, 0.0, -1.0]).unwrap();
        assert_eq!(az, 0.0);
        assert_abs_diff_eq!(incl, PI, epsilon = 1e-9);
        let (az, incl) = cartesian_to_spherical([1.0, 0.0, 0.0]).unwrap();
        assert_eq!(az, 0.0);
        assert_abs_diff_eq!(incl, FRAC_PI_2, epsilon = 1e-9);
        let (az, incl) = cartesian_to_spherical([0.0, 1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(az, FRAC_PI_2, epsilon = 1e-9);
        assert_abs_diff_eq!(incl, FRAC_PI_2, epsilon = 1e-9);
        let (az, _) = cartesian_to_spherical([-1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(az, PI, epsilon = 1e-9);
    }

    #[test]
    fn angles_are_bit_identical_across_unit_rescaling() {
        let montage = Montage::synthetic_ring(8).unwrap();
        let base = montage.spherical_angles();
        for factor in [0.5, 2.0, 10.0] {
            let scaled = montage.scaled(factor).unwrap().spherical_angles();
            assert_eq!(base, scaled, "angles drifted under scale {factor}");
        }
    }

    proptest! {
        #[test]
        fn rescaling_moves_angles_by_at_most_one_quantum(
            x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, r in 0.1f64..10.0
        ) {
            prop_assume!(norm(&[x, y, z]) > 1e-3);
            let a = cartesian_to_spherical([x, y, z]).unwrap();
            let b = cartesian_to_spherical([x * r, y * r, z * r]).unwrap();
            let q = 1.0 / ANGLE_QUANTUM_INV;
            // Azimuth lives on a circle: measure the wrapped distance.
            let raw = (a.0 - b.0).abs();
            let az_dist = raw.min(2.0 * PI - raw);
            prop_assert!(az_dist <= q + 1e-15);
            prop_assert!((a.1 - b.1).abs() <= q + 1e-15);
        }

        #[test]
        fn angles_stay_in_range(x in -5.0f64..5.0, y in -5.0f64..5.0, z in -5.0f64..5.0) {
            prop_assume!(norm(&[x, y, z]) > 1e-3);
            let (az, incl) = cartesian_to_spherical([x, y, z]).unwrap();
            prop_assert!(az > -PI && az <= PI);
            prop_assert!((0.0..=PI).contains(&incl));
        }
    }

    #[test]
    fn parse_handles_comments_and_rejects_malformed_lines() {
        let text = "# 10-20 subset\nCz 0 0 1\nC3 -0.7 0 0.7 # left\n\nC4 0.7 0 0.7\n";
        let m = Montage::parse(text).unwrap();
        assert_eq!(m.names(), &["Cz", "C3", "C4"]);
        assert_eq!(m.positions()[0], [0.0, 0.0, 1.0]);

        assert!(matches!(Montage::parse("Cz 0 0"), Err(Error::Parse(_))));
        assert!(matches!(Montage::parse("Cz 0 zero 1"), Err(Error::Parse(_))));
        assert!(matches!(Montage::parse("Cz 0 0 1\nCz 1 0 0"), Err(Error::Geometry(_))));
        assert!(matches!(Montage::parse("Cz 0 0 0"), Err(Error::Geometry(_))));
        assert!(matches!(Montage::parse(""), Err(Error::Geometry(_))));
    }

    #[test]
    fn text_round_trip_preserves_the_montage() {
        let m = Montage::synthetic_ring(11).unwrap();
        let back = Montage::parse(&m.to_file_string()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn ring_montage_is_unit_norm_with_vertex_first() {
        for c in [1, 2, 8, 9, 17] {
            let m = Montage::synthetic_ring(c).unwrap();
            assert_eq!(m.len(), c);
            assert_eq!(m.positions()[0], [0.0, 0.0, 1.0]);
            for p in m.positions() {
                assert_abs_diff_eq!(norm(p), 1.0, epsilon = 1e-12);
            }
            let unique: std::collections::BTreeSet<&String> = m.names().iter().collect();
            assert_eq!(unique.len(), c);
        }
    }

    #[test]
    fn great_circle_matches_known_separations() {
        let m = Montage::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![[0.0, 0.0, 1.0], [0.0, 0.0, -2.0], [3.0, 0.0, 0.0]],
        )
        .unwrap();
        assert_abs_diff_eq!(m.great_circle(0, 1).unwrap(), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(m.great_circle(0, 2).unwrap(), FRAC_PI_2, epsilon = 1e-12);
        assert_eq!(m.great_circle(0, 0).unwrap(), 0.0);
        assert!(m.great_circle(0, 3).is_err());
    }

    #[test]
    fn permuted_reorders_names_and_positions_together() {
        let m = Montage::synthetic_ring(4).unwrap();
        let p = m.permuted(&[2, 0, 3, 1]).unwrap();
        assert_eq!(p.names()[0], m.names()[2]);
        assert_eq!(p.positions()[0], m.positions()[2]);
        assert!(m.permuted(&[0, 0, 1, 2]).is_err());
        assert!(m.permuted(&[0, 1]).is_err());
    }
}
