//! Tape-building forward passes for the criss-cross model.

use super::{HeadKind, ModelConfig, ModelState, EMBED_CONV_STRIDE};
use crate::error::{Error, Result};
use crate::geometry::Montage;
use crate::posenc::{spe_channel_table, temporal_sinusoid_table, PeKind};
use crate::tensor::{rdft_magnitude, NodeId, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Fixed (non-trainable) positional tables used by `spe` and `spe-proj`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeTables {
    /// `[C, d]` spherical channel table.
    pub channel: Tensor,
    /// `[w, d]` temporal sinusoid table.
    pub patch: Tensor,
}

/// Computes the fixed tables a model needs, or `None` when its encoding has
/// no fixed tables. Tables derive from the montage actually being decoded,
/// never from a checkpoint, which is what makes `spe` montage-agnostic.
pub fn build_pe_tables(
    config: &ModelConfig,
    montage: &Montage,
    patches_per_epoch: usize,
) -> Result<Option<PeTables>> {
    match config.pe.kind {
        PeKind::Spe | PeKind::SpeProj => {
            let channel = spe_channel_table(&montage.spherical_angles(), config.embed_dim)?;
            let patch = temporal_sinusoid_table(patches_per_epoch, config.embed_dim)?;
            Ok(Some(PeTables { channel, patch }))
        }
        PeKind::Nope | PeKind::Learnable | PeKind::Acpe => Ok(None),
    }
}

/// Number of masked slots per sample: `floor(ratio * slots)`, computed with
/// a small tolerance so exact products like 0.7 * 20 are not pushed down a
/// step by floating-point representation error.
pub fn mask_slot_count(ratio: f64, slots: usize) -> usize {
    ((ratio * slots as f64) + 1e-9).floor().min(slots as f64) as usize
}

/// Draws `count` distinct slots per sample and returns the global row
/// indices into the `[batch * slots, d]` flattened embedding, sorted.
pub fn choose_mask_rows(batch: usize, slots: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(batch * count);
    for b in 0..batch {
        let picks = rand::seq::index::sample(&mut rng, slots, count);
        rows.extend(picks.iter().map(|s| b * slots + s));
    }
    rows.sort_unstable();
    rows
}

/// One forward pass over a tape: owns the tape, registers every parameter as
/// a leaf (trainable) or constant (frozen), and exposes the model's stages.
pub struct ForwardPass<'a> {
    state: &'a ModelState,
    tables: Option<&'a PeTables>,
    tape: Tape,
    nodes: BTreeMap<String, NodeId>,
}

impl<'a> ForwardPass<'a> {
    /// `trainable` decides per parameter name whether gradients flow into it.
    pub fn new(
        state: &'a ModelState,
        tables: Option<&'a PeTables>,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<Self> {
        let kind = state.config.pe.kind;
        if matches!(kind, PeKind::Spe | PeKind::SpeProj) {
            let t = tables.ok_or_else(|| {
                Error::Contract(format!("{kind} needs precomputed positional tables"))
            })?;
            let d = state.config.embed_dim;
            if t.channel.shape() != [state.channels(), d]
                || t.patch.shape() != [state.patches_per_epoch, d]
            {
                return Err(Error::Contract(format!(
                    "positional tables of shapes {:?} and {:?} do not fit a model with {} channels, {} patches, width {d}",
                    t.channel.shape(),
                    t.patch.shape(),
                    state.channels(),
                    state.patches_per_epoch
                )));
            }
        }
        let mut tape = Tape::new();
        let mut nodes = BTreeMap::new();
        for (name, tensor) in &state.params {
            let id = if trainable(name) { tape.leaf(tensor) } else { tape.constant(tensor) };
            nodes.insert(name.clone(), id);
        }
        Ok(ForwardPass { state, tables, tape, nodes })
    }

    fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("model has no parameter {name}")))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        self.tape.value(id)
    }

    pub fn output(&self, id: NodeId) -> Result<Tensor> {
        self.tape.tensor(id)
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.tape.value(id)[0]
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every parameter that received one, keyed by name.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.nodes
            .iter()
            .filter_map(|(name, &id)| self.tape.grad(id).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    fn input_dims(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let cfg = &self.state.config;
        let s = x.shape();
        let ok = s.len() == 4
            && s[1] == self.state.channels()
            && s[2] == self.state.patches_per_epoch
            && s[3] == cfg.patch_len;
        if !ok {
            return Err(Error::Shape(format!(
                "input shape {s:?} does not match [batch, {}, {}, {}]",
                self.state.channels(),
                self.state.patches_per_epoch,
                cfg.patch_len
            )));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// Patch embedding: a strided temporal conv stack and a linear map of
    /// real-DFT magnitudes, summed. `x [B, C, w, t] -> [B, C, w, d]`.
    pub fn patch_embed(&mut self, x: &Tensor) -> Result<NodeId> {
        let (b, c, w, t) = self.input_dims(x)?;
        let n = b * c * w;
        let d = self.state.config.embed_dim;

        let x_node = self.tape.constant(x);
        let patches = self.tape.reshape(x_node, &[n, 1, t])?;
        let pad = super::EMBED_CONV_KERNEL / 2;
        let k1 = self.node("embed.conv1.w")?;
        let h = self.tape.conv1d(patches, k1, EMBED_CONV_STRIDE, pad)?;
        let h = self.add_channel_bias(h, "embed.conv1.b")?;
        let h = self.tape.gelu(h)?;
        let k2 = self.node("embed.conv2.w")?;
        let h = self.tape.conv1d(h, k2, EMBED_CONV_STRIDE, pad)?;
        let h = self.add_channel_bias(h, "embed.conv2.b")?;
        let feat = self.state.config.temporal_feat_len();
        let h = self.tape.reshape(h, &[n, feat])?;
        let temporal = self.affine(h, "embed.temporal_fc")?;

        let bins = self.state.config.spectral_bins();
        let mut spec_data = Vec::with_capacity(n * bins);
        for patch in 0..n {
            spec_data.extend(rdft_magnitude(&x.data()[patch * t..(patch + 1) * t])?);
        }
        let spec = Tensor::new(&[n, bins], spec_data)?;
        let spec_node = self.tape.constant(&spec);
        let spectral = self.affine(spec_node, "embed.spectral_fc")?;

        let sum = self.tape.add(temporal, spectral)?;
        self.tape.reshape(sum, &[b, c, w, d])
    }

    fn add_channel_bias(&mut self, h: NodeId, bias: &str) -> Result<NodeId> {
        let b = self.node(bias)?;
        let channels = self.tape.shape(b)[0];
        let col = self.tape.reshape(b, &[channels, 1])?;
        self.tape.broadcast_add(h, col)
    }

    fn affine(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.node(&format!("{prefix}.w"))?;
        let b = self.node(&format!("{prefix}.b"))?;
        self.tape.linear(x, w, b)
    }

    /// Replaces a seeded choice of slots with the mask token; returns the
    /// masked embedding and the chosen global rows (sorted).
    pub fn mask(&mut self, emb: NodeId, mask_seed: u64) -> Result<(NodeId, Vec<usize>)> {
        let shape = self.tape.shape(emb).to_vec();
        let (b, c, w, d) = (shape[0], shape[1], shape[2], shape[3]);
        let slots = c * w;
        let count = mask_slot_count(self.state.config.mask_ratio, slots);
        if count == 0 {
            return Err(Error::Contract(format!(
                "mask ratio {} masks zero of {slots} slots",
                self.state.config.mask_ratio
            )));
        }
        let rows = choose_mask_rows(b, slots, count, mask_seed);
        let flat = self.tape.reshape(emb, &[b * slots, d])?;
        let token = self.node("mask_token")?;
        let masked = self.tape.mask_rows(flat, token, &rows)?;
        let back = self.tape.reshape(masked, &[b, c, w, d])?;
        Ok((back, rows))
    }

    /// Adds the configured positional encoding. `nope` returns the input
    /// node untouched, so its output is bit-identical to its input.
    pub fn apply_pe(&mut self, emb: NodeId) -> Result<NodeId> {
        let shape = self.tape.shape(emb).to_vec();
        let c = shape[1];
        let d = self.state.config.embed_dim;
        match self.state.config.pe.kind {
            PeKind::Nope => Ok(emb),
            PeKind::Spe => {
                let tables = self.tables.expect("checked at construction");
                let chan = self.tape.constant(&tables.channel);
                let patch = self.tape.constant(&tables.patch);
                self.add_tables(emb, chan, patch, &shape, c, d)
            }
            PeKind::SpeProj => {
                let tables = self.tables.expect("checked at construction");
                let chan = self.tape.constant(&tables.channel);
                let patch = self.tape.constant(&tables.patch);
                let pc = self.node("pe.proj_chan")?;
                let pp = self.node("pe.proj_patch")?;
                let chan = self.tape.matmul(chan, pc)?;
                let patch = self.tape.matmul(patch, pp)?;
                self.add_tables(emb, chan, patch, &shape, c, d)
            }
            PeKind::Learnable => {
                let chan = self.node("pe.chan")?;
                let patch = self.node("pe.patch")?;
                self.add_tables(emb, chan, patch, &shape, c, d)
            }
            PeKind::Acpe => {
                let kernel = self.node("pe.acpe.kernel")?;
                let grid = self.tape.permute(emb, &[0, 3, 1, 2])?;
                let conv = self.tape.depthwise_conv2d(grid, kernel)?;
                let back = self.tape.permute(conv, &[0, 2, 3, 1])?;
                self.tape.add(emb, back)
            }
        }
    }

    fn add_tables(
        &mut self,
        emb: NodeId,
        chan: NodeId,
        patch: NodeId,
        target: &[usize],
        c: usize,
        d: usize,
    ) -> Result<NodeId> {
        let chan_col = self.tape.reshape(chan, &[c, 1, d])?;
        let chan_b = self.tape.broadcast_to(chan_col, target)?;
        let patch_b = self.tape.broadcast_to(patch, target)?;
        let out = self.tape.add(emb, chan_b)?;
        self.tape.add(out, patch_b)
    }

    /// One attention half: heads attending along channels (`spatial`) or
    /// along patch positions.
    fn axial_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        offset: usize,
        spatial: bool,
    ) -> Result<NodeId> {
        let shape = self.tape.shape(q).to_vec();
        let (b, c, w, d) = (shape[0], shape[1], shape[2], shape[3]);
        let half = d / 2;
        let hh = self.state.config.heads / 2;
        let dh = self.state.config.head_dim();
        let seq = if spatial { c } else { w };
        let groups = b * hh * if spatial { w } else { c };
        let fwd: &[usize] = if spatial { &[0, 2, 3, 1, 4] } else { &[0, 1, 3, 2, 4] };
        let rev: &[usize] = if spatial { &[0, 3, 1, 2, 4] } else { &[0, 1, 3, 2, 4] };

        let mut mapped = [q, k, v];
        for id in &mut mapped {
            let part = self.tape.slice(*id, 3, offset, half)?;
            let split = self.tape.reshape(part, &[b, c, w, hh, dh])?;
            let perm = self.tape.permute(split, fwd)?;
            *id = self.tape.reshape(perm, &[groups, seq, dh])?;
        }
        let [q3, k3, v3] = mapped;
        let kt = self.tape.permute(k3, &[0, 2, 1])?;
        let scores = self.tape.bmm(q3, kt)?;
        let scaled = self.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = self.tape.softmax(scaled, 2)?;
        let out = self.tape.bmm(probs, v3)?;

        let grouped = if spatial { [b, w, hh, c, dh] } else { [b, c, hh, w, dh] };
        let out = self.tape.reshape(out, &grouped)?;
        let out = self.tape.permute(out, rev)?;
        self.tape.reshape(out, &[b, c, w, half])
    }

    fn attention(&mut self, x: NodeId, layer: &str) -> Result<NodeId> {
        let q = self.affine_qkv(x, layer, "q")?;
        let k = self.affine_qkv(x, layer, "k")?;
        let v = self.affine_qkv(x, layer, "v")?;
        let d = self.state.config.embed_dim;
        let spatial = self.axial_attention(q, k, v, 0, true)?;
        let temporal = self.axial_attention(q, k, v, d / 2, false)?;
        let cat = self.tape.concat(&[spatial, temporal], 3)?;
        let wo = self.node(&format!("{layer}.attn.wo"))?;
        let bo = self.node(&format!("{layer}.attn.bo"))?;
        self.tape.linear(cat, wo, bo)
    }

    fn affine_qkv(&mut self, x: NodeId, layer: &str, gate: &str) -> Result<NodeId> {
        let w = self.node(&format!("{layer}.attn.w{gate}"))?;
        let b = self.node(&format!("{layer}.attn.b{gate}"))?;
        self.tape.linear(x, w, b)
    }

    fn block(&mut self, x: NodeId, l: usize) -> Result<NodeId> {
        let layer = format!("layers.{l:02}");
        let g1 = self.node(&format!("{layer}.ln1.g"))?;
        let b1 = self.node(&format!("{layer}.ln1.b"))?;
        let normed = self.tape.layer_norm(x, g1, b1)?;
        let att = self.attention(normed, &layer)?;
        let x = self.tape.add(x, att)?;

        let g2 = self.node(&format!("{layer}.ln2.g"))?;
        let b2 = self.node(&format!("{layer}.ln2.b"))?;
        let normed = self.tape.layer_norm(x, g2, b2)?;
        let w1 = self.node(&format!("{layer}.ffn.w1"))?;
        let bb1 = self.node(&format!("{layer}.ffn.b1"))?;
        let h = self.tape.linear(normed, w1, bb1)?;
        let h = self.tape.gelu(h)?;
        let w2 = self.node(&format!("{layer}.ffn.w2"))?;
        let bb2 = self.node(&format!("{layer}.ffn.b2"))?;
        let h = self.tape.linear(h, w2, bb2)?;
        self.tape.add(x, h)
    }

    /// Pre-norm criss-cross blocks followed by a final layer norm.
    pub fn backbone(&mut self, emb: NodeId) -> Result<NodeId> {
        let mut h = emb;
        for l in 0..self.state.config.layers {
            h = self.block(h, l)?;
        }
        let g = self.node("final_ln.g")?;
        let b = self.node("final_ln.b")?;
        self.tape.layer_norm(h, g, b)
    }

    /// Decodes the hidden states at `rows` back to patch samples `[M, t]`.
    pub fn reconstruct(&mut self, hidden: NodeId, rows: &[usize]) -> Result<NodeId> {
        let shape = self.tape.shape(hidden).to_vec();
        let n = shape[0] * shape[1] * shape[2];
        let flat = self.tape.reshape(hidden, &[n, shape[3]])?;
        let picked = self.tape.gather(flat, 0, rows)?;
        self.affine(picked, "head.recon")
    }

    /// The normalised input samples at the masked rows, `[M, t]`.
    pub fn recon_target(&self, x: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let (_, _, _, t) = self.input_dims(x)?;
        let mut data = Vec::with_capacity(rows.len() * t);
        for &r in rows {
            data.extend_from_slice(&x.data()[r * t..(r + 1) * t]);
        }
        Tensor::new(&[rows.len(), t], data)
    }

    /// Mean squared error between reconstruction and target over the masked
    /// slots only.
    pub fn reconstruction_loss(
        &mut self,
        recon: NodeId,
        x: &Tensor,
        rows: &[usize],
    ) -> Result<NodeId> {
        let target = self.recon_target(x, rows)?;
        let target = self.tape.constant(&target);
        let diff = self.tape.sub(recon, target)?;
        let sq = self.tape.mul(diff, diff)?;
        self.tape.mean_all(sq)
    }

    /// Complete pretraining pass: embed, mask, encode, reconstruct, score.
    pub fn pretrain_loss(&mut self, x: &Tensor, mask_seed: u64) -> Result<(NodeId, Vec<usize>)> {
        let emb = self.patch_embed(x)?;
        let (masked, rows) = self.mask(emb, mask_seed)?;
        let encoded = self.apply_pe(masked)?;
        let hidden = self.backbone(encoded)?;
        let recon = self.reconstruct(hidden, &rows)?;
        let loss = self.reconstruction_loss(recon, x, &rows)?;
        Ok((loss, rows))
    }

    /// Backbone output flattened per sample, `[B, C * w * d]`; no masking.
    pub fn features(&mut self, x: &Tensor) -> Result<NodeId> {
        let (b, c, w, _) = self.input_dims(x)?;
        let emb = self.patch_embed(x)?;
        let encoded = self.apply_pe(emb)?;
        let hidden = self.backbone(encoded)?;
        let d = self.state.config.embed_dim;
        self.tape.reshape(hidden, &[b, c * w * d])
    }

    fn head_layer(&mut self, x: NodeId, idx: usize) -> Result<NodeId> {
        let w = self.node(&format!("head.cls.w{idx}"))?;
        let b = self.node(&format!("head.cls.b{idx}"))?;
        self.tape.linear(x, w, b)
    }

    /// Classification head on flattened features `[B, C * w * d] -> [B, K]`.
    pub fn classify_features(&mut self, features: NodeId) -> Result<NodeId> {
        let heads = self.state.head_spec()?;
        let Some((kind, _)) = heads.classify else {
            return Err(Error::Contract("model has no classification head".into()));
        };
        match kind {
            HeadKind::Linear1 => self.head_layer(features, 0),
            HeadKind::Mlp3 => {
                let h = self.head_layer(features, 0)?;
                let h = self.tape.gelu(h)?;
                let h = self.head_layer(h, 1)?;
                let h = self.tape.gelu(h)?;
                self.head_layer(h, 2)
            }
        }
    }

    /// Full supervised pass: `x [B, C, w, t] -> logits [B, K]`, no masking.
    pub fn logits(&mut self, x: &Tensor) -> Result<NodeId> {
        let features = self.features(x)?;
        self.classify_features(features)
    }

    /// Log-softmax of the logits along the class axis.
    pub fn log_probs(&mut self, logits: NodeId) -> Result<NodeId> {
        self.tape.log_softmax(logits, 1)
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
