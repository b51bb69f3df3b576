//! Off-tape spectral features: real DFT magnitudes of a 1-D signal.

use crate::error::{Error, Result};

/// Magnitudes of the non-redundant half of the DFT of a real signal:
/// `out[k] = |sum_j x[j] * exp(-2 pi i k j / n)|` for `k = 0 ..= n/2`.
///
/// Direct O(n^2) evaluation; patch lengths here are a few dozen samples.
pub fn rdft_magnitude(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Shape("rdft_magnitude of an empty signal".into()));
    }
    let n = x.len();
    let mut out = Vec::with_capacity(n / 2 + 1);
    for k in 0..=n / 2 {
        let mut re = 0.0;
        let mut im = 0.0;
        for (j, &v) in x.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (k as f64) * (j as f64) / (n as f64);
            re += v * ang.cos();
            im += v * ang.sin();
        }
        out.push((re * re + im * im).sqrt());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn constant_signal_concentrates_in_bin_zero() {
        let mag = rdft_magnitude(&[3.0; 8]).unwrap();
        assert_eq!(mag.len(), 5);
        assert_abs_diff_eq!(mag[0], 24.0, epsilon = 1e-9);
        for &m in &mag[1..] {
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn pure_tone_peaks_at_its_bin_with_magnitude_n_over_two() {
        let n = 40;
        let k = 3;
        let x: Vec<f64> =
            (0..n).map(|j| (2.0 * PI * k as f64 * j as f64 / n as f64).sin()).collect();
        let mag = rdft_magnitude(&x).unwrap();
        assert_abs_diff_eq!(mag[k], n as f64 / 2.0, epsilon = 1e-9);
        for (i, &m) in mag.iter().enumerate() {
            if i != k {
                assert_abs_diff_eq!(m, 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn magnitude_is_phase_invariant() {
        let n = 32;
        let tone = |phase: f64| -> Vec<f64> {
            (0..n).map(|j| (2.0 * PI * 5.0 * j as f64 / n as f64 + phase).sin()).collect()
        };
        let a = rdft_magnitude(&tone(0.0)).unwrap();
        let b = rdft_magnitude(&tone(1.234)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_empty_input() {
        assert!(rdft_magnitude(&[]).is_err());
    }
}
