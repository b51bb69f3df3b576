//! Finite-difference verification suites: one entry per differentiable
//! operation plus a whole-model check, shared by the CLI and the test suite.

use crate::error::{Error, Result};
use crate::geometry::Montage;
use crate::model::{ForwardPass, HeadSpec, ModelConfig, ModelState};
use crate::posenc::PeKind;
use crate::tensor::{grad_check, NodeId, Tape, Tensor, FD_STEP};

/// Relative tolerance for single-operation checks.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative tolerance for the whole-model check.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Finite-difference step for the whole-model check. The loss composes
/// thousands of f64 operations, so the central-difference numerator carries
/// ~1e-12 of rounding noise; at a 1e-5 step that noise dominates coordinates
/// whose true gradient is below ~1e-6, while at 1e-4 both the noise and the
/// quadratic truncation term sit well inside `MODEL_TOLERANCE`.
const MODEL_FD_STEP: f64 = 1e-4;

/// One verified gradient, with the tolerance it is held to.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Number of coordinates probed by finite differences.
    pub checked: usize,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

/// Deterministic, smooth, sign-varying filler for probe tensors.
fn wave(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| (0.37 * i as f64 + 0.3).sin() * 0.9 + 0.05).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn entry<F>(name: &str, inputs: &[Tensor], build: F) -> Result<SuiteEntry>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let report = grad_check(name, inputs, FD_STEP, None, build)?;
    Ok(SuiteEntry {
        name: report.name,
        max_rel_err: report.max_rel_err,
        checked: report.checked,
        tolerance: OP_TOLERANCE,
    })
}

/// Checks every differentiable tape operation against central finite
/// differences. Each closure reduces with `mean_all`/`sum_all` to obtain a
/// scalar, so the reductions themselves are exercised throughout.
pub fn op_gradient_suite() -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();

    out.push(entry("add", &[wave(&[3, 4]), wave(&[3, 4])], |t, ids| {
        let y = t.add(ids[0], ids[1])?;
        t.mean_all(y)
    })?);
    out.push(entry("sub", &[wave(&[3, 4]), wave(&[3, 4])], |t, ids| {
        let y = t.sub(ids[0], ids[1])?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    })?);
    out.push(entry("mul", &[wave(&[3, 4]), wave(&[3, 4])], |t, ids| {
        let y = t.mul(ids[0], ids[1])?;
        t.mean_all(y)
    })?);
    out.push(entry("scale", &[wave(&[3, 4])], |t, ids| {
        let y = t.scale(ids[0], -1.7)?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    })?);
    out.push(entry("matmul", &[wave(&[3, 4]), wave(&[4, 5])], |t, ids| {
        let y = t.matmul(ids[0], ids[1])?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    })?);
    out.push(entry("bmm", &[wave(&[2, 3, 4]), wave(&[2, 4, 5])], |t, ids| {
        let y = t.bmm(ids[0], ids[1])?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    })?);
    out.push(entry("softmax", &[wave(&[3, 5])], |t, ids| {
        let y = t.softmax(ids[0], 1)?;
        let w = t.constant(&wave(&[3, 5]));
        let m = t.mul(y, w)?;
        t.sum_all(m)
    })?);
    out.push(entry("log_softmax", &[wave(&[3, 5])], |t, ids| {
        let y = t.log_softmax(ids[0], 1)?;
        let w = t.constant(&wave(&[3, 5]));
        let m = t.mul(y, w)?;
        t.sum_all(m)
    })?);
    out.push(entry(
        "layer_norm",
        &[wave(&[4, 6]), wave(&[6]), wave(&[6])],
        |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2])?;
            let w = t.constant(&wave(&[4, 6]));
            let m = t.mul(y, w)?;
            t.mean_all(m)
        },
    )?);
    out.push(entry("gelu", &[wave(&[3, 4])], |t, ids| {
        let y = t.gelu(ids[0])?;
        t.mean_all(y)
    })?);
    out.push(entry("reshape", &[wave(&[3, 4])], |t, ids| {
        let y = t.reshape(ids[0], &[2, 6])?;
        let w = t.constant(&wave(&[2, 6]));
        let m = t.mul(y, w)?;
        t.sum_all(m)
    })?);
    out.push(entry("permute", &[wave(&[2, 3, 4])], |t, ids| {
        let y = t.permute(ids[0], &[2, 0, 1])?;
        let w = t.constant(&wave(&[4, 2, 3]));
        let m = t.mul(y, w)?;
        t.sum_all(m)
    })?);
    out.push(entry("broadcast_to", &[wave(&[1, 4])], |t, ids| {
        let y = t.broadcast_to(ids[0], &[3, 4])?;
        let w = t.constant(&wave(&[3, 4]));
        let m = t.mul(y, w)?;
        t.sum_all(m)
    })?);
    out.push(entry("slice", &[wave(&[3, 6])], |t, ids| {
        let y = t.slice(ids[0], 1, 2, 3)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    })?);
    out.push(entry("gather", &[wave(&[4, 5])], |t, ids| {
        let y = t.gather(ids[0], 0, &[2, 0, 3, 3])?;
        let w = t.constant(&wave(&[4, 5]));
        let m = t.mul(y, w)?;
        t.sum_all(m)
    })?);
    out.push(entry("concat", &[wave(&[2, 3]), wave(&[2, 2])], |t, ids| {
        let y = t.concat(&[ids[0], ids[1]], 1)?;
        let w = t.constant(&wave(&[2, 5]));
        let m = t.mul(y, w)?;
        t.sum_all(m)
    })?);
    out.push(entry("sum_all", &[wave(&[3, 4])], |t, ids| t.sum_all(ids[0]))?);
    out.push(entry("mean_all", &[wave(&[3, 4])], |t, ids| t.mean_all(ids[0]))?);
    out.push(entry("conv1d", &[wave(&[2, 2, 10]), wave(&[3, 2, 5])], |t, ids| {
        let y = t.conv1d(ids[0], ids[1], 2, 2)?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    })?);
    out.push(entry(
        "depthwise_conv2d",
        &[wave(&[2, 3, 4, 5]), wave(&[3, 3, 3])],
        |t, ids| {
            let y = t.depthwise_conv2d(ids[0], ids[1])?;
            let sq = t.mul(y, y)?;
            t.mean_all(sq)
        },
    )?);
    out.push(entry("mask_rows", &[wave(&[6, 4]), wave(&[4])], |t, ids| {
        let y = t.mask_rows(ids[0], ids[1], &[1, 4])?;
        let w = t.constant(&wave(&[6, 4]));
        let m = t.mul(y, w)?;
        t.sum_all(m)
    })?);
    out.push(entry("broadcast_add", &[wave(&[6, 4]), wave(&[6, 1])], |t, ids| {
        let y = t.broadcast_add(ids[0], ids[1])?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    })?);
    out.push(entry("linear", &[wave(&[3, 4]), wave(&[4, 2]), wave(&[2])], |t, ids| {
        let y = t.linear(ids[0], ids[1], ids[2])?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    })?);

    Ok(out)
}

fn masked_loss(state: &ModelState, x: &Tensor, mask_seed: u64) -> Result<f64> {
    let mut fp = ForwardPass::new(state, None, &|_| false)?;
    let (loss, _) = fp.pretrain_loss(x, mask_seed)?;
    Ok(fp.scalar_value(loss))
}

/// Finite-difference check of the whole backbone's parameter gradients
/// through the masked-reconstruction loss: two layers, width 32, four
/// channels, three patches, with the convolutional positional encoding so
/// the in-model convolution path is exercised.
///
/// `max_coords_per_param` caps how many evenly spaced coordinates of each
/// parameter tensor are probed; `None` probes every coordinate.
pub fn backbone_gradient_check(max_coords_per_param: Option<usize>) -> Result<SuiteEntry> {
    if max_coords_per_param == Some(0) {
        return Err(Error::Config("max_coords_per_param must be at least 1".into()));
    }
    let config = ModelConfig::desk(PeKind::Acpe);
    let montage = Montage::synthetic_ring(4)?;
    let mut state = ModelState::new(config, &montage, 3, 17, &HeadSpec::pretrain())?;
    let x = wave(&[2, 4, 3, config.patch_len]);
    let mask_seed = 99;

    let analytic = {
        let mut fp = ForwardPass::new(&state, None, &|_| true)?;
        let (loss, _) = fp.pretrain_loss(&x, mask_seed)?;
        fp.backward(loss)?;
        fp.grads()
    };

    let names: Vec<String> = state.params.keys().cloned().collect();
    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    for name in names {
        let n = state.params[&name].numel();
        let coords: Vec<usize> = match max_coords_per_param {
            Some(k) if n > k => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let exact_all = analytic.get(&name);
        for c in coords {
            let base = state.params[&name].data()[c];
            let slot = state.params.get_mut(&name).expect("name from keys");
            slot.data_mut()[c] = base + MODEL_FD_STEP;
            let plus = masked_loss(&state, &x, mask_seed)?;
            let slot = state.params.get_mut(&name).expect("name from keys");
            slot.data_mut()[c] = base - MODEL_FD_STEP;
            let minus = masked_loss(&state, &x, mask_seed)?;
            let slot = state.params.get_mut(&name).expect("name from keys");
            slot.data_mut()[c] = base;

            let numeric = (plus - minus) / (2.0 * MODEL_FD_STEP);
            let exact = exact_all.map_or(0.0, |g| g[c]);
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

    Ok(SuiteEntry {
        name: "backbone (masked reconstruction)".into(),
        max_rel_err,
        checked,
        tolerance: MODEL_TOLERANCE,
    })
}

/// The complete gradient suite: every operation, then the whole backbone.
pub fn gradient_suite(max_coords_per_param: Option<usize>) -> Result<Vec<SuiteEntry>> {
    let mut entries = op_gradient_suite()?;
    entries.push(backbone_gradient_check(max_coords_per_param)?);
    Ok(entries)
}
