//! Adam with decoupled weight decay and the cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam optimizer with decay applied directly to the weights, outside the
/// adaptive term: `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p`.
#[derive(Debug, Clone)]
pub struct AdamW {
    weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Result<Self> {
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(AdamW { weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Only parameters named in `grads` move; anything
    /// the backward pass did not reach is left untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| {
                Error::Contract(format!("gradient for unknown parameter {name}"))
            })?;
            if g.len() != p.numel() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient for {name} is not finite ({bad})"
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let data = p.data_mut();
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS))
                    + lr * self.weight_decay * data[i];
                if !data[i].is_finite() {
                    return Err(Error::Numeric(format!(
                        "parameter {name} became non-finite during the update"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Cosine annealing: `lr_min + (lr_max - lr_min) * (1 + cos(pi s / S)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine schedule needs at least one step".into()));
    }
    if step > total {
        return Err(Error::Contract(format!(
            "schedule step {step} exceeds total {total}"
        )));
    }
    if !(lr_max.is_finite() && lr_min.is_finite() && 0.0 <= lr_min && lr_min <= lr_max) {
        return Err(Error::Config(format!(
            "cosine schedule needs 0 <= lr_min <= lr_max, got {lr_min} and {lr_max}"
        )));
    }
    let phase = PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single(name: &str, values: &[f64]) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::new(&[values.len()], values.to_vec()).unwrap())])
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters_unchanged() {
        let mut params = single("w", &[0.3, -0.7]);
        let grads = BTreeMap::from([("w".to_string(), vec![0.0, 0.0])]);
        let mut opt = AdamW::new(0.0).unwrap();
        opt.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params["w"].data(), &[0.3, -0.7]);
    }

    #[test]
    fn first_step_moves_by_about_minus_lr_times_sign() {
        let mut params = single("w", &[0.0]);
        let grads = BTreeMap::from([("w".to_string(), vec![1.0])]);
        let mut opt = AdamW::new(0.0).unwrap();
        opt.step(&mut params, &grads, 0.1).unwrap();
        // Bias-corrected m_hat = 1, v_hat = 1 on the first step.
        assert_relative_eq!(params["w"].data()[0], -0.1, max_relative = 1e-7);
    }

    #[test]
    fn pure_decay_shrinks_by_one_minus_lr_wd() {
        let mut params = single("w", &[2.0, -4.0]);
        let grads = BTreeMap::from([("w".to_string(), vec![0.0, 0.0])]);
        let mut opt = AdamW::new(0.01).unwrap();
        opt.step(&mut params, &grads, 0.5).unwrap();
        assert_relative_eq!(params["w"].data()[0], 2.0 * (1.0 - 0.005), max_relative = 1e-12);
        assert_relative_eq!(params["w"].data()[1], -4.0 * (1.0 - 0.005), max_relative = 1e-12);
    }

    #[test]
    fn parameters_without_gradients_never_move() {
        let mut params = single("w", &[1.0]);
        params.insert("frozen".into(), Tensor::new(&[1], vec![5.0]).unwrap());
        let grads = BTreeMap::from([("w".to_string(), vec![1.0])]);
        let mut opt = AdamW::new(0.9).unwrap();
        for _ in 0..3 {
            opt.step(&mut params, &grads, 0.1).unwrap();
        }
        assert_eq!(params["frozen"].data(), &[5.0]);
        assert_ne!(params["w"].data(), &[1.0]);
    }

    #[test]
    fn mismatched_or_unknown_gradients_are_contract_errors() {
        let mut params = single("w", &[1.0, 2.0]);
        let mut opt = AdamW::new(0.0).unwrap();
        let wrong_shape = BTreeMap::from([("w".to_string(), vec![1.0])]);
        assert!(matches!(
            opt.step(&mut params, &wrong_shape, 0.1),
            Err(crate::error::Error::Contract(_))
        ));
        let unknown = BTreeMap::from([("nope".to_string(), vec![1.0])]);
        assert!(matches!(
            opt.step(&mut params, &unknown, 0.1),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn non_finite_gradient_is_a_numeric_error() {
        let mut params = single("w", &[1.0]);
        let grads = BTreeMap::from([("w".to_string(), vec![f64::NAN])]);
        let mut opt = AdamW::new(0.0).unwrap();
        assert!(matches!(
            opt.step(&mut params, &grads, 0.1),
            Err(crate::error::Error::Numeric(_))
        ));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = single("w", &[0.0]);
        let mut opt = AdamW::new(0.0).unwrap();
        for _ in 0..300 {
            let p = params["w"].data()[0];
            let grads = BTreeMap::from([("w".to_string(), vec![2.0 * (p - 3.0)])]);
            opt.step(&mut params, &grads, 0.05).unwrap();
        }
        assert!((params["w"].data()[0] - 3.0).abs() < 0.05);
    }

    #[test]
    fn cosine_hits_its_endpoints_and_midpoint() {
        assert_relative_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3, max_relative = 1e-12);
        assert_relative_eq!(cosine_lr(100, 100, 1e-3, 1e-5).unwrap(), 1e-5, max_relative = 1e-12);
        assert_relative_eq!(
            cosine_lr(50, 100, 1e-3, 1e-5).unwrap(),
            (1e-3 + 1e-5) / 2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn cosine_rejects_bad_arguments() {
        assert!(matches!(cosine_lr(0, 0, 1e-3, 1e-5), Err(crate::error::Error::Config(_))));
        assert!(matches!(cosine_lr(5, 4, 1e-3, 1e-5), Err(crate::error::Error::Contract(_))));
        assert!(matches!(cosine_lr(0, 4, 1e-5, 1e-3), Err(crate::error::Error::Config(_))));
    }
}
