//! Reverse-mode autodiff on a Wengert tape.
//!
//! Operations execute eagerly and append one node to the tape; `backward`
//! replays the tape in reverse, accumulating gradients into every node that
//! (transitively) depends on a trainable leaf. Node values are plain `f64`
//! buffers owned by the tape, addressed through copyable [`NodeId`]s.

use super::{numel_of, strides_of, unravel, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalisation.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    Softmax { x: NodeId, axis: usize },
    LogSoftmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu(NodeId),
    Reshape(NodeId),
    Permute { x: NodeId, perm: Vec<usize> },
    BroadcastTo(NodeId),
    Slice { x: NodeId, axis: usize, start: usize },
    Gather { x: NodeId, axis: usize, indices: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    Conv1d { x: NodeId, kernel: NodeId, stride: usize, pad: usize },
    DepthwiseConv2d { x: NodeId, kernel: NodeId },
    MaskRows { x: NodeId, token: NodeId, rows: Vec<usize> },
}

/// Arena of tape nodes plus per-node gradient buffers.
#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    grads: Vec<Option<Vec<f64>>>,
    live: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Registers a trainable leaf; gradients will be accumulated for it.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// Registers a non-trainable leaf; no gradient flows into it.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id.0]
    }

    /// Copies a node's value out as a tensor.
    pub fn tensor(&self, id: NodeId) -> Result<Tensor> {
        Tensor::new(&self.shapes[id.0], self.values[id.0].clone())
    }

    /// Gradient buffer of a node, if `backward` reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, live: bool) -> NodeId {
        debug_assert_eq!(numel_of(&shape), value.len());
        self.ops.push(op);
        self.shapes.push(shape);
        self.values.push(value);
        self.grads.push(None);
        self.live.push(live);
        NodeId(self.ops.len() - 1)
    }

    fn any_live(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.live[id.0])
    }

    // ---- elementwise ----

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::Shape(format!(
                "{what} needs equal shapes, got {:?} and {:?}",
                self.shapes[a.0], self.shapes[b.0]
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let v: Vec<f64> =
            self.values[a.0].iter().zip(&self.values[b.0]).map(|(x, y)| x + y).collect();
        let live = self.any_live(&[a, b]);
        Ok(self.push(Op::Add(a, b), self.shapes[a.0].clone(), v, live))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let v: Vec<f64> =
            self.values[a.0].iter().zip(&self.values[b.0]).map(|(x, y)| x - y).collect();
        let live = self.any_live(&[a, b]);
        Ok(self.push(Op::Sub(a, b), self.shapes[a.0].clone(), v, live))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let v: Vec<f64> =
            self.values[a.0].iter().zip(&self.values[b.0]).map(|(x, y)| x * y).collect();
        let live = self.any_live(&[a, b]);
        Ok(self.push(Op::Mul(a, b), self.shapes[a.0].clone(), v, live))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::Numeric(format!("non-finite scale factor {c}")));
        }
        let v: Vec<f64> = self.values[x.0].iter().map(|a| a * c).collect();
        let live = self.live[x.0];
        Ok(self.push(Op::Scale(x, c), self.shapes[x.0].clone(), v, live))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.shapes[a.0], &self.shapes[b.0]);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = matmul_raw(&self.values[a.0], &self.values[b.0], m, k, n);
        let live = self.any_live(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], v, live))
    }

    /// Batched matmul: `[N,m,k] x [N,k,n] -> [N,m,n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.shapes[a.0], &self.shapes[b.0]);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape(format!("bmm of {sa:?} and {sb:?}")));
        }
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut v = vec![0.0; nb * m * n];
        for i in 0..nb {
            let block = matmul_raw(
                &self.values[a.0][i * m * k..(i + 1) * m * k],
                &self.values[b.0][i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
            v[i * m * n..(i + 1) * m * n].copy_from_slice(&block);
        }
        let live = self.any_live(&[a, b]);
        Ok(self.push(Op::BatchMatMul(a, b), vec![nb, m, n], v, live))
    }

    // ---- normalisation and activations ----

    fn check_axis(&self, x: NodeId, axis: usize, what: &str) -> Result<()> {
        if axis >= self.shapes[x.0].len() {
            return Err(Error::Shape(format!(
                "{what} axis {axis} out of range for shape {:?}",
                self.shapes[x.0]
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis(x, axis, "softmax")?;
        let shape = self.shapes[x.0].clone();
        let v = softmax_raw(&self.values[x.0], &shape, axis, false);
        let live = self.live[x.0];
        Ok(self.push(Op::Softmax { x, axis }, shape, v, live))
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis(x, axis, "log_softmax")?;
        let shape = self.shapes[x.0].clone();
        let v = softmax_raw(&self.values[x.0], &shape, axis, true);
        let live = self.live[x.0];
        Ok(self.push(Op::LogSoftmax { x, axis }, shape, v, live))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// the learnable elementwise affine `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = *self.shapes[x.0].last().expect("tensors have rank >= 1");
        if self.shapes[gain.0] != [d] || self.shapes[bias.0] != [d] {
            return Err(Error::Shape(format!(
                "layer_norm over width {d} needs gain/bias of shape [{d}], got {:?} and {:?}",
                self.shapes[gain.0], self.shapes[bias.0]
            )));
        }
        let shape = self.shapes[x.0].clone();
        let lanes = numel_of(&shape) / d;
        let xv = &self.values[x.0];
        let gv = &self.values[gain.0];
        let bv = &self.values[bias.0];
        let mut v = vec![0.0; xv.len()];
        for lane in 0..lanes {
            let row = &xv[lane * d..(lane + 1) * d];
            let (mean, inv_std) = lane_stats(row);
            for j in 0..d {
                v[lane * d + j] = gv[j] * (row[j] - mean) * inv_std + bv[j];
            }
        }
        let live = self.any_live(&[x, gain, bias]);
        Ok(self.push(Op::LayerNorm { x, gain, bias }, shape, v, live))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v: Vec<f64> = self.values[x.0].iter().map(|&a| gelu_scalar(a)).collect();
        let live = self.live[x.0];
        Ok(self.push(Op::Gelu(x), self.shapes[x.0].clone(), v, live))
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel_of(shape) != self.values[x.0].len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shapes[x.0]
            )));
        }
        let v = self.values[x.0].clone();
        let live = self.live[x.0];
        Ok(self.push(Op::Reshape(x), shape.to_vec(), v, live))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.shapes[x.0].clone();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p.min(rank - 1)], true)) {
            return Err(Error::Shape(format!(
                "permute {perm:?} is not a permutation of axes of {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let v = permute_raw(&self.values[x.0], &shape, perm);
        let live = self.live[x.0];
        Ok(self.push(Op::Permute { x, perm: perm.to_vec() }, out_shape, v, live))
    }

    /// Broadcasts to `target` with right-aligned dimensions; size-1 axes of
    /// `x` expand, and missing leading axes repeat.
    pub fn broadcast_to(&mut self, x: NodeId, target: &[usize]) -> Result<NodeId> {
        let eff = broadcast_strides(&self.shapes[x.0], target).ok_or_else(|| {
            Error::Shape(format!("cannot broadcast {:?} to {target:?}", self.shapes[x.0]))
        })?;
        let n = numel_of(target);
        let mut v = vec![0.0; n];
        let mut idx = vec![0usize; target.len()];
        for (flat, slot) in v.iter_mut().enumerate() {
            unravel(target, flat, &mut idx);
            let src: usize = idx.iter().zip(&eff).map(|(i, s)| i * s).sum();
            *slot = self.values[x.0][src];
        }
        let live = self.live[x.0];
        Ok(self.push(Op::BroadcastTo(x), target.to_vec(), v, live))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.check_axis(x, axis, "slice")?;
        let shape = self.shapes[x.0].clone();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut v = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for i in 0..len {
                let src = (o * alen + start + i) * inner;
                let dst = (o * len + i) * inner;
                v[dst..dst + inner].copy_from_slice(&self.values[x.0][src..src + inner]);
            }
        }
        let live = self.live[x.0];
        Ok(self.push(Op::Slice { x, axis, start }, out_shape, v, live))
    }

    /// Selects `indices` along `axis`; repeated indices are allowed and their
    /// gradients accumulate.
    pub fn gather(&mut self, x: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId> {
        self.check_axis(x, axis, "gather")?;
        let shape = self.shapes[x.0].clone();
        if indices.is_empty() {
            return Err(Error::Shape("gather with empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range for axis {axis} of {shape:?}"
            )));
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let mut v = vec![0.0; outer * indices.len() * inner];
        for o in 0..outer {
            for (i, &src_i) in indices.iter().enumerate() {
                let src = (o * alen + src_i) * inner;
                let dst = (o * indices.len() + i) * inner;
                v[dst..dst + inner].copy_from_slice(&self.values[x.0][src..src + inner]);
            }
        }
        let live = self.live[x.0];
        Ok(self.push(Op::Gather { x, axis, indices: indices.to_vec() }, out_shape, v, live))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shapes[first.0].clone();
        let mut total = 0usize;
        for &p in parts {
            let s = &self.shapes[p.0];
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat along axis {axis}: shape {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut v = vec![0.0; outer * total * inner];
        let mut pos = 0usize;
        for &p in parts {
            let plen = self.shapes[p.0][axis];
            for o in 0..outer {
                for i in 0..plen {
                    let src = (o * plen + i) * inner;
                    let dst = (o * total + pos + i) * inner;
                    v[dst..dst + inner].copy_from_slice(&self.values[p.0][src..src + inner]);
                }
            }
            pos += plen;
        }
        let live = self.any_live(parts);
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, out_shape, v, live))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.values[x.0].iter().sum();
        let live = self.live[x.0];
        Ok(self.push(Op::SumAll(x), vec![1], vec![s], live))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.values[x.0].len() as f64;
        let s: f64 = self.values[x.0].iter().sum();
        let live = self.live[x.0];
        Ok(self.push(Op::MeanAll(x), vec![1], vec![s / n], live))
    }

    // ---- convolutions ----

    /// 1-D convolution: `x [N, c_in, L]`, `kernel [c_out, c_in, k]`, zero
    /// padding `pad` on both ends, stride `stride`.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sk) = (&self.shapes[x.0], &self.shapes[kernel.0]);
        if sx.len() != 3 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(Error::Shape(format!("conv1d of {sx:?} with kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        let (n, ci, l) = (sx[0], sx[1], sx[2]);
        let (co, _, kw) = (sk[0], sk[1], sk[2]);
        if l + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv1d kernel width {kw} exceeds padded input length {}",
                l + 2 * pad
            )));
        }
        let lo = (l + 2 * pad - kw) / stride + 1;
        let xv = &self.values[x.0];
        let kv = &self.values[kernel.0];
        let mut v = vec![0.0; n * co * lo];
        for b in 0..n {
            for o in 0..co {
                for j in 0..lo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for u in 0..kw {
                            let t = (j * stride + u) as isize - pad as isize;
                            if t >= 0 && (t as usize) < l {
                                acc += xv[(b * ci + c) * l + t as usize] * kv[(o * ci + c) * kw + u];
                            }
                        }
                    }
                    v[(b * co + o) * lo + j] = acc;
                }
            }
        }
        let live = self.any_live(&[x, kernel]);
        Ok(self.push(Op::Conv1d { x, kernel, stride, pad }, vec![n, co, lo], v, live))
    }

    /// Depthwise 2-D cross-correlation with odd kernel sides and "same"
    /// zero padding: `x [B, C, H, W]`, `kernel [C, k_h, k_w]`, no bias.
    pub fn depthwise_conv2d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (sx, sk) = (&self.shapes[x.0], &self.shapes[kernel.0]);
        if sx.len() != 4 || sk.len() != 3 || sx[1] != sk[0] {
            return Err(Error::Shape(format!(
                "depthwise_conv2d of {sx:?} with kernel {sk:?}"
            )));
        }
        let (kh, kw) = (sk[1], sk[2]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel sides must be odd, got {kh}x{kw}"
            )));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (ph, pw) = (kh / 2, kw / 2);
        let xv = &self.values[x.0];
        let kv = &self.values[kernel.0];
        let mut v = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for u in 0..kh {
                            for t in 0..kw {
                                let ii = i as isize + u as isize - ph as isize;
                                let jj = j as isize + t as isize - pw as isize;
                                if ii >= 0 && ii < h as isize && jj >= 0 && jj < w as isize {
                                    acc += xv[((bi * c + ci) * h + ii as usize) * w + jj as usize]
                                        * kv[(ci * kh + u) * kw + t];
                                }
                            }
                        }
                        v[((bi * c + ci) * h + i) * w + j] = acc;
                    }
                }
            }
        }
        let live = self.any_live(&[x, kernel]);
        Ok(self.push(Op::DepthwiseConv2d { x, kernel }, sx.clone(), v, live))
    }

    // ---- masking ----

    /// Replaces the listed rows of `x [N, d]` with `token [d]`. Rows must be
    /// strictly increasing (hence unique).
    pub fn mask_rows(&mut self, x: NodeId, token: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (sx, st) = (&self.shapes[x.0], &self.shapes[token.0]);
        if sx.len() != 2 || st.len() != 1 || st[0] != sx[1] {
            return Err(Error::Shape(format!("mask_rows on {sx:?} with token {st:?}")));
        }
        if rows.windows(2).any(|p| p[0] >= p[1]) || rows.last().is_some_and(|&r| r >= sx[0]) {
            return Err(Error::Contract(format!(
                "mask rows must be strictly increasing and < {}",
                sx[0]
            )));
        }
        let d = sx[1];
        let mut v = self.values[x.0].clone();
        for &r in rows {
            v[r * d..(r + 1) * d].copy_from_slice(&self.values[token.0]);
        }
        let live = self.any_live(&[x, token]);
        Ok(self.push(Op::MaskRows { x, token, rows: rows.to_vec() }, sx.clone(), v, live))
    }

    // ---- combinators ----

    /// Adds `b` to `a`, broadcasting `b` to `a`'s shape first.
    pub fn broadcast_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let target = self.shapes[a.0].clone();
        let bb = self.broadcast_to(b, &target)?;
        self.add(a, bb)
    }

    /// Affine map over the last axis: `x [..., in] -> [..., out]` with
    /// `w [in, out]`, `b [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shapes[x.0].clone();
        let sw = self.shapes[w.0].clone();
        if sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(Error::Shape(format!("linear of {sx:?} with weight {sw:?}")));
        }
        let rows = numel_of(&sx) / sw[0];
        let flat = self.reshape(x, &[rows, sw[0]])?;
        let y = self.matmul(flat, w)?;
        let y = self.broadcast_add(y, b)?;
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, &out_shape)
    }

    // ---- backward ----

    /// Clears all gradients, seeds `d loss / d loss = 1`, and replays the
    /// tape in reverse. `loss` must be a single-element node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shapes[loss.0]
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.live[i] {
                continue;
            }
            let op = self.ops[i].clone();
            let g = self.grads[i].clone().expect("checked above");
            self.backprop(i, &op, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Vec<f64>) {
        if !self.live[id.0] {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            None => self.grads[id.0] = Some(delta),
        }
    }

    fn backprop(&mut self, out: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(&self.values[b.0]).map(|(gi, bi)| gi * bi).collect();
                let db: Vec<f64> = g.iter().zip(&self.values[a.0]).map(|(gi, ai)| gi * ai).collect();
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::Scale(x, c) => {
                self.accumulate(*x, g.iter().map(|v| v * c).collect());
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shapes[a.0][0], self.shapes[a.0][1]);
                let n = self.shapes[b.0][1];
                let (da, db) =
                    matmul_backward(g, &self.values[a.0], &self.values[b.0], m, k, n);
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::BatchMatMul(a, b) => {
                let (nb, m, k) = (self.shapes[a.0][0], self.shapes[a.0][1], self.shapes[a.0][2]);
                let n = self.shapes[b.0][2];
                let mut da = vec![0.0; nb * m * k];
                let mut db = vec![0.0; nb * k * n];
                for i in 0..nb {
                    let (dai, dbi) = matmul_backward(
                        &g[i * m * n..(i + 1) * m * n],
                        &self.values[a.0][i * m * k..(i + 1) * m * k],
                        &self.values[b.0][i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                    da[i * m * k..(i + 1) * m * k].copy_from_slice(&dai);
                    db[i * k * n..(i + 1) * k * n].copy_from_slice(&dbi);
                }
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::Softmax { x, axis } => {
                let y = &self.values[out];
                let shape = self.shapes[out].clone();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + inn;
                        let s: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            dx[at(i)] = y[at(i)] * (g[at(i)] - s);
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::LogSoftmax { x, axis } => {
                let y = &self.values[out];
                let shape = self.shapes[out].clone();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + inn;
                        let s: f64 = (0..len).map(|i| g[at(i)]).sum();
                        for i in 0..len {
                            dx[at(i)] = g[at(i)] - y[at(i)].exp() * s;
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = *self.shapes[x.0].last().unwrap();
                let lanes = self.values[x.0].len() / d;
                let xv = &self.values[x.0];
                let gv = &self.values[gain.0];
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for lane in 0..lanes {
                    let row = &xv[lane * d..(lane + 1) * d];
                    let (mean, inv_std) = lane_stats(row);
                    let go = &g[lane * d..(lane + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let gh = go[j] * gv[j];
                        m1 += gh;
                        m2 += gh * xhat;
                        dgain[j] += go[j] * xhat;
                        dbias[j] += go[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        dx[lane * d + j] = inv_std * (go[j] * gv[j] - m1 - xhat * m2);
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gain, dgain);
                self.accumulate(*bias, dbias);
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = self.values[x.0]
                    .iter()
                    .zip(g)
                    .map(|(&a, gi)| gi * gelu_derivative(a))
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Reshape(x) => {
                self.accumulate(*x, g.to_vec());
            }
            Op::Permute { x, perm } => {
                let in_shape = self.shapes[x.0].clone();
                let out_shape = self.shapes[out].clone();
                let in_strides = strides_of(&in_shape);
                let mut dx = vec![0.0; self.values[x.0].len()];
                let mut idx = vec![0usize; out_shape.len()];
                for (flat, gi) in g.iter().enumerate() {
                    unravel(&out_shape, flat, &mut idx);
                    let src: usize =
                        idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
                    dx[src] += gi;
                }
                self.accumulate(*x, dx);
            }
            Op::BroadcastTo(x) => {
                let target = self.shapes[out].clone();
                let eff = broadcast_strides(&self.shapes[x.0], &target)
                    .expect("validated at construction");
                let mut dx = vec![0.0; self.values[x.0].len()];
                let mut idx = vec![0usize; target.len()];
                for (flat, gi) in g.iter().enumerate() {
                    unravel(&target, flat, &mut idx);
                    let src: usize = idx.iter().zip(&eff).map(|(i, s)| i * s).sum();
                    dx[src] += gi;
                }
                self.accumulate(*x, dx);
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shapes[x.0].clone();
                let out_len = self.shapes[out][*axis];
                let (outer, alen, inner) = axis_split(&in_shape, *axis);
                let mut dx = vec![0.0; self.values[x.0].len()];
                for o in 0..outer {
                    for i in 0..out_len {
                        let dst = (o * alen + start + i) * inner;
                        let src = (o * out_len + i) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Gather { x, axis, indices } => {
                let in_shape = self.shapes[x.0].clone();
                let (outer, alen, inner) = axis_split(&in_shape, *axis);
                let mut dx = vec![0.0; self.values[x.0].len()];
                for o in 0..outer {
                    for (i, &src_i) in indices.iter().enumerate() {
                        let dst = (o * alen + src_i) * inner;
                        let src = (o * indices.len() + i) * inner;
                        for t in 0..inner {
                            dx[dst + t] += g[src + t];
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.shapes[out].clone();
                let (outer, total, inner) = axis_split(&out_shape, *axis);
                let mut pos = 0usize;
                for &p in parts {
                    let plen = self.shapes[p.0][*axis];
                    let mut dp = vec![0.0; self.values[p.0].len()];
                    for o in 0..outer {
                        for i in 0..plen {
                            let src = (o * total + pos + i) * inner;
                            let dst = (o * plen + i) * inner;
                            dp[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                        }
                    }
                    self.accumulate(p, dp);
                    pos += plen;
                }
            }
            Op::SumAll(x) => {
                self.accumulate(*x, vec![g[0]; self.values[x.0].len()]);
            }
            Op::MeanAll(x) => {
                let n = self.values[x.0].len();
                self.accumulate(*x, vec![g[0] / n as f64; n]);
            }
            Op::Conv1d { x, kernel, stride, pad } => {
                let (n, ci, l) =
                    (self.shapes[x.0][0], self.shapes[x.0][1], self.shapes[x.0][2]);
                let (co, kw) = (self.shapes[kernel.0][0], self.shapes[kernel.0][2]);
                let lo = self.shapes[out][2];
                let xv = &self.values[x.0];
                let kv = &self.values[kernel.0];
                let mut dx = vec![0.0; xv.len()];
                let mut dk = vec![0.0; kv.len()];
                for b in 0..n {
                    for o in 0..co {
                        for j in 0..lo {
                            let gi = g[(b * co + o) * lo + j];
                            for c in 0..ci {
                                for u in 0..kw {
                                    let t = (j * stride + u) as isize - *pad as isize;
                                    if t >= 0 && (t as usize) < l {
                                        let xi = (b * ci + c) * l + t as usize;
                                        let ki = (o * ci + c) * kw + u;
                                        dx[xi] += gi * kv[ki];
                                        dk[ki] += gi * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*kernel, dk);
            }
            Op::DepthwiseConv2d { x, kernel } => {
                let (b, c, h, w) = (
                    self.shapes[x.0][0],
                    self.shapes[x.0][1],
                    self.shapes[x.0][2],
                    self.shapes[x.0][3],
                );
                let (kh, kw) = (self.shapes[kernel.0][1], self.shapes[kernel.0][2]);
                let (ph, pw) = (kh / 2, kw / 2);
                let xv = &self.values[x.0];
                let kv = &self.values[kernel.0];
                let mut dx = vec![0.0; xv.len()];
                let mut dk = vec![0.0; kv.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let gi = g[((bi * c + ci) * h + i) * w + j];
                                for u in 0..kh {
                                    for t in 0..kw {
                                        let ii = i as isize + u as isize - ph as isize;
                                        let jj = j as isize + t as isize - pw as isize;
                                        if ii >= 0 && ii < h as isize && jj >= 0 && jj < w as isize
                                        {
                                            let xi = ((bi * c + ci) * h + ii as usize) * w
                                                + jj as usize;
                                            let ki = (ci * kh + u) * kw + t;
                                            dx[xi] += gi * kv[ki];
                                            dk[ki] += gi * xv[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*kernel, dk);
            }
            Op::MaskRows { x, token, rows } => {
                let d = self.shapes[x.0][1];
                let mut dx = g.to_vec();
                let mut dt = vec![0.0; d];
                for &r in rows {
                    for j in 0..d {
                        dt[j] += g[r * d + j];
                        dx[r * d + j] = 0.0;
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*token, dt);
            }
        }
    }
}

/// `(product of dims before axis, dim at axis, product of dims after)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Effective strides mapping an index in `target` back into `x` under
/// right-aligned broadcasting; `None` if the shapes are incompatible.
fn broadcast_strides(x_shape: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if x_shape.len() > target.len() {
        return None;
    }
    let off = target.len() - x_shape.len();
    let x_strides = strides_of(x_shape);
    let mut eff = vec![0usize; target.len()];
    for i in 0..x_shape.len() {
        if x_shape[i] == target[off + i] {
            eff[off + i] = x_strides[i];
        } else if x_shape[i] != 1 {
            return None;
        }
    }
    Some(eff)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

/// Gradients of `c = a @ b`: `da = g @ b^T`, `db = a^T @ g`.
fn matmul_backward(
    g: &[f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        for j in 0..n {
            let gi = g[i * n + j];
            if gi == 0.0 {
                continue;
            }
            for p in 0..k {
                da[i * k + p] += gi * b[p * n + j];
                db[p * n + j] += gi * a[i * k + p];
            }
        }
    }
    (da, db)
}

fn softmax_raw(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let at = |i: usize| (o * len + i) * inner + inn;
            let max = (0..len).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..len).map(|i| (x[at(i)] - max).exp()).sum();
            for i in 0..len {
                let shifted = x[at(i)] - max;
                out[at(i)] = if log { shifted - sum.ln() } else { shifted.exp() / sum };
            }
        }
    }
    out
}

/// Mean and inverse standard deviation (biased variance plus [`LN_EPS`]).
fn lane_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn permute_raw(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let mut out = vec![0.0; x.len()];
    let mut idx = vec![0usize; shape.len()];
    for (flat, slot) in out.iter_mut().enumerate() {
        unravel(&out_shape, flat, &mut idx);
        let src: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
        *slot = x[src];
    }
    out
}

/// Tanh-form GELU.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_backward_matches_hand_derivation() {
        // L = sum(A @ B) gives dA[i][p] = sum_j B[p][j], dB[p][j] = sum_i A[i][p].
        let mut tape = Tape::new();
        let av = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bv = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let a = tape.leaf(&t(&[2, 3], &av));
        let b = tape.leaf(&t(&[3, 2], &bv));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[15.0, 19.0, 23.0, 15.0, 19.0, 23.0]);
        assert_eq!(tape.grad(b).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 0.5, 0.0, 0.0, 0.5]));
        let b = tape.leaf(&t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 2.0, 0.0, 0.0, 2.0]));
        let c = tape.bmm(a, b).unwrap();
        assert_eq!(&tape.value(c)[..4], &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(&tape.value(c)[4..], &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_of_log_counts_recovers_proportions() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (got, want) in tape.value(y).iter().zip(want) {
            assert_abs_diff_eq!(got, &want, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_lanes_sum_to_one_on_chosen_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[0.1, -2.0, 3.0, 50.0, 50.0, 50.0]));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        assert_abs_diff_eq!(v[0] + v[1] + v[2], 1.0, epsilon = 1e-12);
        // Equal logits give the uniform distribution even when large.
        for &p in &v[3..] {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_softmax_is_log_of_softmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[0.3, -1.2, 2.5, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        let ls = tape.log_softmax(x, 0).unwrap();
        for (a, b) in tape.value(s).to_vec().iter().zip(tape.value(ls)) {
            assert_abs_diff_eq!(a.ln(), b, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises_each_lane() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[2.0, 0.0, -5.0, 5.0]));
        let gain = tape.leaf(&t(&[2], &[1.0, 1.0]));
        let bias = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        let v = tape.value(y);
        // Lane [2, 0]: mean 1, var 1 -> (x - 1) / sqrt(1 + eps).
        let want = 1.0 / (1.0 + LN_EPS).sqrt();
        assert_abs_diff_eq!(v[0], want, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], -want, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2] + v[3], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // Large inputs saturate towards the identity / zero.
        assert_abs_diff_eq!(gelu_scalar(6.0), 6.0, epsilon = 1e-6);
        assert_abs_diff_eq!(gelu_scalar(-6.0), 0.0, epsilon = 1e-6);
        // gelu(x) = x * F(x) with F(x) + F(-x) = 1, so gelu(x) - gelu(-x) = x.
        for x in [0.3, 1.7, 2.9] {
            assert_abs_diff_eq!(gelu_scalar(x) - gelu_scalar(-x), x, epsilon = 1e-12);
        }
    }

    #[test]
    fn permute_transposes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.value(y), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        // Round trip restores the original buffer.
        let z = tape.permute(y, &[1, 0]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
    }

    #[test]
    fn permute_rejects_bad_axes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        assert!(tape.permute(x, &[0, 0]).is_err());
        assert!(tape.permute(x, &[0, 2]).is_err());
        assert!(tape.permute(x, &[0]).is_err());
    }

    #[test]
    fn broadcast_repeats_rows_and_sums_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let y = tape.broadcast_to(x, &[3, 2]).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn broadcast_expands_size_one_axes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 1], &[1.0, 2.0]));
        let y = tape.broadcast_to(x, &[2, 3]).unwrap();
        assert_eq!(tape.value(y), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(tape.broadcast_to(x, &[3, 2]).is_err());
    }

    #[test]
    fn slice_then_concat_round_trips() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let left = tape.slice(x, 1, 0, 2).unwrap();
        let right = tape.slice(x, 1, 2, 2).unwrap();
        assert_eq!(tape.value(left), &[1.0, 2.0, 5.0, 6.0]);
        let back = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn gather_accumulates_gradient_for_repeated_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.gather(x, 0, &[0, 0, 2]).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn conv1d_identity_kernel_copies_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let k = tape.leaf(&t(&[1, 1, 1], &[1.0]));
        let y = tape.conv1d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv1d_stride_two_with_padding_matches_hand_result() {
        // x = [1..6], kernel [1, 1, 1] summing a width-3 window, pad 1 stride 2:
        // windows at centres 0, 2, 4 -> [0+1+2, 2+3+4, 4+5+6].
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let k = tape.leaf(&t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
        let y = tape.conv1d(x, k, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3]);
        assert_eq!(tape.value(y), &[3.0, 9.0, 15.0]);
    }

    #[test]
    fn depthwise_conv_center_impulse_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0;
        let k = tape.leaf(&t(&[1, 3, 3], &kdata));
        let y = tape.depthwise_conv2d(x, k).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn depthwise_conv_off_center_impulse_shifts_with_zero_fill() {
        // Kernel hot at (u=1, t=2), i.e. one right of centre: cross-correlation
        // reads the input one column to the right, zero beyond the edge.
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut kdata = vec![0.0; 9];
        kdata[5] = 1.0;
        let k = tape.leaf(&t(&[1, 3, 3], &kdata));
        let y = tape.depthwise_conv2d(x, k).unwrap();
        assert_eq!(tape.value(y), &[2.0, 3.0, 0.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn depthwise_conv_rejects_even_kernels_and_zero_maps_to_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1.0; 4]));
        let even = tape.leaf(&t(&[1, 2, 2], &[1.0; 4]));
        assert!(matches!(tape.depthwise_conv2d(x, even), Err(Error::Config(_))));
        let zero = tape.leaf(&Tensor::zeros(&[1, 1, 4, 4]).unwrap());
        let k = tape.leaf(&t(&[1, 3, 1], &[0.5, 1.0, 0.5]));
        let y = tape.depthwise_conv2d(zero, k).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_rows_replaces_and_routes_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let token = tape.leaf(&t(&[2], &[-1.0, -2.0]));
        let y = tape.mask_rows(x, token, &[1]).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, -1.0, -2.0, 5.0, 6.0]);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        // Masked row contributes nothing to x, everything to the token.
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(tape.grad(token).unwrap(), &[1.0, 1.0]);
        assert!(tape.mask_rows(x, token, &[1, 1]).is_err());
        assert!(tape.mask_rows(x, token, &[3]).is_err());
    }

    #[test]
    fn square_loss_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constants_collect_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2], &[1.0, 2.0]));
        let w = tape.leaf(&t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, w).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_applies_affine_over_last_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 3.0]));
        let w = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(&t(&[3], &[0.5, 0.5, 0.5]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 3]);
        assert_eq!(&tape.value(y)[..3], &[1.5, 2.5, 3.5]);
        assert_eq!(&tape.value(y)[3..6], &[4.5, 5.5, 6.5]);
        assert_eq!(&tape.value(y)[6..9], &[5.5, 7.5, 9.5]);
    }

    #[test]
    fn gradients_reset_between_backward_calls() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }
}
