//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::tensor::NodeId;

/// Step size used throughout the gradient-check suites.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Label of the checked function, for reporting.
    pub name: String,
    /// Worst relative error across all probed coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates probed.
    pub checked: usize,
}

/// Compares tape gradients of a scalar-valued function against central
/// finite differences `(f(x+h) - f(x-h)) / 2h`.
///
/// `build` receives a fresh tape and one trainable leaf per entry of
/// `inputs` and must return a single-element loss node. Relative error uses
/// the symmetric denominator `max(|analytic|, |numeric|, 1e-8)`. With
/// `max_coords = Some(k)`, at most `k` evenly spaced coordinates per input
/// are probed; `None` probes every coordinate.
pub fn grad_check<F>(
    name: &str,
    inputs: &[Tensor],
    h: f64,
    max_coords: Option<usize>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if max_coords == Some(0) {
        return Err(Error::Config("max_coords must be at least 1".into()));
    }
    if inputs.is_empty() {
        return Err(Error::Contract("grad_check needs at least one input".into()));
    }

    let eval = |points: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId, f64)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = points.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check loss must be scalar, got shape {:?}",
                tape.shape(loss)
            )));
        }
        let value = tape.value(loss)[0];
        Ok((tape, ids, loss, value))
    };

    let (mut tape, ids, loss, _) = eval(inputs)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if n > k => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for &c in &coords {
            let base = input.data()[c];
            probe[which].data_mut()[c] = base + h;
            let plus = eval(&probe)?.3;
            probe[which].data_mut()[c] = base - h;
            let minus = eval(&probe)?.3;
            probe[which].data_mut()[c] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic[which][c];
            if !numeric.is_finite() || !exact.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient while checking {name} coordinate {c}"
                )));
            }
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            max_rel_err = max_rel_err.max((exact - numeric).abs() / denom);
            checked += 1;
        }
    }

    Ok(GradCheckReport { name: name.to_string(), max_rel_err, checked })
}
