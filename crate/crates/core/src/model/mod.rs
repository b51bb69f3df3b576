//! Criss-cross transformer model: configuration, parameter state, forward
//! passes, and checkpoint serialisation.

pub mod checkpoint;
mod forward;

pub use forward::{build_pe_tables, choose_mask_rows, mask_slot_count, ForwardPass, PeTables};

use crate::error::{Error, Result};
use crate::geometry::Montage;
use crate::posenc::{PeConfig, PeKind};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Channels produced by each stage of the temporal patch-embedding convs.
pub(crate) const EMBED_CONV_CHANNELS: usize = 8;
/// Kernel width of the temporal patch-embedding convs.
pub(crate) const EMBED_CONV_KERNEL: usize = 7;
/// Stride of the temporal patch-embedding convs.
pub(crate) const EMBED_CONV_STRIDE: usize = 2;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of criss-cross blocks.
    pub layers: usize,
    /// Total attention heads per block; half attend across channels, half
    /// across patch positions.
    pub heads: usize,
    /// Embedding width d.
    pub embed_dim: usize,
    /// Hidden width of the feed-forward sublayer.
    pub ff_dim: usize,
    /// Samples per patch.
    pub patch_len: usize,
    /// Fraction of (channel, patch) slots replaced by the mask token.
    pub mask_ratio: f64,
    pub pe: PeConfig,
}

impl ModelConfig {
    /// Small preset that trains in seconds on a CPU.
    pub fn desk(kind: PeKind) -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            embed_dim: 32,
            ff_dim: 128,
            patch_len: 40,
            mask_ratio: 0.5,
            pe: PeConfig::new(kind),
        }
    }

    /// Publication-scale preset; used for parameter accounting, not training.
    pub fn full_scale(kind: PeKind) -> Self {
        ModelConfig {
            layers: 12,
            heads: 8,
            embed_dim: 200,
            ff_dim: 800,
            patch_len: 200,
            mask_ratio: 0.5,
            pe: PeConfig::new(kind),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.heads < 2 || !self.heads.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "criss-cross attention needs an even head count >= 2, got {}",
                self.heads
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "embedding width {} must be even and divisible by the {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.ff_dim == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        if self.patch_len < 8 || !self.patch_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "patch length must be even and >= 8, got {}",
                self.patch_len
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "mask ratio must be in (0, 1], got {}",
                self.mask_ratio
            )));
        }
        self.pe.validate(self.embed_dim)
    }

    fn conv_out(len: usize) -> usize {
        (len + 2 * (EMBED_CONV_KERNEL / 2) - EMBED_CONV_KERNEL) / EMBED_CONV_STRIDE + 1
    }

    /// Flattened width of the temporal conv stack's output per patch.
    pub(crate) fn temporal_feat_len(&self) -> usize {
        EMBED_CONV_CHANNELS * Self::conv_out(Self::conv_out(self.patch_len))
    }

    /// Number of real-DFT magnitude bins per patch.
    pub(crate) fn spectral_bins(&self) -> usize {
        self.patch_len / 2 + 1
    }

    /// Head dimension of each attention half.
    pub(crate) fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Classification head shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Single affine map from the flattened backbone output.
    Linear1,
    /// Three affine maps with GELU between them.
    Mlp3,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Linear1 => "linear1",
            HeadKind::Mlp3 => "mlp3",
        })
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear1" => Ok(HeadKind::Linear1),
            "mlp3" => Ok(HeadKind::Mlp3),
            other => Err(Error::Parse(format!(
                "unknown head kind {other:?} (expected linear1 or mlp3)"
            ))),
        }
    }
}

/// Which output heads a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    /// Reconstruction head mapping hidden states back to patch samples.
    pub recon: bool,
    /// Classification head kind and class count.
    pub classify: Option<(HeadKind, usize)>,
}

impl HeadSpec {
    pub fn pretrain() -> Self {
        HeadSpec { recon: true, classify: None }
    }

    pub fn classifier(kind: HeadKind, classes: usize) -> Self {
        HeadSpec { recon: true, classify: Some((kind, classes)) }
    }

    fn validate(&self) -> Result<()> {
        if let Some((_, k)) = self.classify {
            if k < 2 {
                return Err(Error::Config(format!(
                    "classification needs at least 2 classes, got {k}"
                )));
            }
        }
        if !self.recon && self.classify.is_none() {
            return Err(Error::Config("model needs at least one head".into()));
        }
        Ok(())
    }
}

/// Full trainable state of one model: configuration, the channel names it
/// was built for, and every parameter tensor keyed by a stable name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub channel_names: Vec<String>,
    pub patches_per_epoch: usize,
    pub params: BTreeMap<String, Tensor>,
}

/// Parameter names and shapes in construction order, which fixes the RNG
/// draw order during initialisation.
fn param_layout(
    cfg: &ModelConfig,
    channels: usize,
    w: usize,
    heads: &HeadSpec,
) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    heads.validate()?;
    if channels == 0 || w == 0 {
        return Err(Error::Config(format!(
            "model needs at least one channel and one patch, got {channels} and {w}"
        )));
    }
    let d = cfg.embed_dim;
    let cc = EMBED_CONV_CHANNELS;
    let kw = EMBED_CONV_KERNEL;
    let mut layout: Vec<(String, Vec<usize>)> = vec![
        ("embed.conv1.w".into(), vec![cc, 1, kw]),
        ("embed.conv1.b".into(), vec![cc]),
        ("embed.conv2.w".into(), vec![cc, cc, kw]),
        ("embed.conv2.b".into(), vec![cc]),
        ("embed.temporal_fc.w".into(), vec![cfg.temporal_feat_len(), d]),
        ("embed.temporal_fc.b".into(), vec![d]),
        ("embed.spectral_fc.w".into(), vec![cfg.spectral_bins(), d]),
        ("embed.spectral_fc.b".into(), vec![d]),
        ("mask_token".into(), vec![d]),
    ];
    for l in 0..cfg.layers {
        let p = format!("layers.{l:02}");
        layout.push((format!("{p}.ln1.g"), vec![d]));
        layout.push((format!("{p}.ln1.b"), vec![d]));
        for gate in ["wq", "wk", "wv", "wo"] {
            layout.push((format!("{p}.attn.{gate}"), vec![d, d]));
        }
        for gate in ["bq", "bk", "bv", "bo"] {
            layout.push((format!("{p}.attn.{gate}"), vec![d]));
        }
        layout.push((format!("{p}.ln2.g"), vec![d]));
        layout.push((format!("{p}.ln2.b"), vec![d]));
        layout.push((format!("{p}.ffn.w1"), vec![d, cfg.ff_dim]));
        layout.push((format!("{p}.ffn.b1"), vec![cfg.ff_dim]));
        layout.push((format!("{p}.ffn.w2"), vec![cfg.ff_dim, d]));
        layout.push((format!("{p}.ffn.b2"), vec![d]));
    }
    layout.push(("final_ln.g".into(), vec![d]));
    layout.push(("final_ln.b".into(), vec![d]));
    match cfg.pe.kind {
        PeKind::Nope | PeKind::Spe => {}
        PeKind::SpeProj => {
            layout.push(("pe.proj_chan".into(), vec![d, d]));
            layout.push(("pe.proj_patch".into(), vec![d, d]));
        }
        PeKind::Learnable => {
            layout.push(("pe.chan".into(), vec![channels, d]));
            layout.push(("pe.patch".into(), vec![w, d]));
        }
        PeKind::Acpe => {
            layout.push((
                "pe.acpe.kernel".into(),
                vec![d, cfg.pe.kernel_space, cfg.pe.kernel_time],
            ));
        }
    }
    if heads.recon {
        layout.push(("head.recon.w".into(), vec![d, cfg.patch_len]));
        layout.push(("head.recon.b".into(), vec![cfg.patch_len]));
    }
    if let Some((kind, k)) = heads.classify {
        let flat = channels * w * d;
        match kind {
            HeadKind::Linear1 => {
                layout.push(("head.cls.w0".into(), vec![flat, k]));
                layout.push(("head.cls.b0".into(), vec![k]));
            }
            HeadKind::Mlp3 => {
                layout.push(("head.cls.w0".into(), vec![flat, d]));
                layout.push(("head.cls.b0".into(), vec![d]));
                layout.push(("head.cls.w1".into(), vec![d, d]));
                layout.push(("head.cls.b1".into(), vec![d]));
                layout.push(("head.cls.w2".into(), vec![d, k]));
                layout.push(("head.cls.b2".into(), vec![k]));
            }
        }
    }
    Ok(layout)
}

enum InitRule {
    Zeros,
    Ones,
    Normal02,
    IdentityPlusNoise,
}

fn init_rule(name: &str) -> InitRule {
    if name.starts_with("pe.proj_") {
        return InitRule::IdentityPlusNoise;
    }
    let last = name.rsplit('.').next().unwrap_or(name);
    if last == "g" {
        InitRule::Ones
    } else if last.starts_with('b') {
        InitRule::Zeros
    } else {
        InitRule::Normal02
    }
}

impl ModelState {
    /// Builds a freshly initialised model for `montage` with `w` patches per
    /// epoch. Weights draw from N(0, 0.02^2), biases start at zero, layer
    /// norms at identity, and spherical projections at identity plus
    /// N(0, 0.01^2) noise. The draw order is fixed, so `(config, montage,
    /// w, seed)` fully determines every parameter.
    pub fn new(
        config: ModelConfig,
        montage: &Montage,
        patches_per_epoch: usize,
        seed: u64,
        heads: &HeadSpec,
    ) -> Result<Self> {
        let layout = param_layout(&config, montage.len(), patches_per_epoch, heads)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal02 = Normal::new(0.0, 0.02).expect("valid std");
        let normal01 = Normal::new(0.0, 0.01).expect("valid std");
        let mut params = BTreeMap::new();
        for (name, shape) in layout {
            let n = shape.iter().product::<usize>();
            let data = match init_rule(&name) {
                InitRule::Zeros => vec![0.0; n],
                InitRule::Ones => vec![1.0; n],
                InitRule::Normal02 => (0..n).map(|_| normal02.sample(&mut rng)).collect(),
                InitRule::IdentityPlusNoise => {
                    let d = shape[0];
                    let mut data = vec![0.0; n];
                    for (i, slot) in data.iter_mut().enumerate() {
                        let eye = if i / d == i % d { 1.0 } else { 0.0 };
                        *slot = eye + normal01.sample(&mut rng);
                    }
                    data
                }
            };
            params.insert(name.clone(), Tensor::new(&shape, data)?);
        }
        Ok(ModelState {
            config,
            channel_names: montage.names().to_vec(),
            patches_per_epoch,
            params,
        })
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    /// Total number of parameter scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Number of parameter scalars contributed by the positional encoding.
    pub fn pe_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with("pe."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// The output heads present, reconstructed from parameter names.
    pub fn head_spec(&self) -> Result<HeadSpec> {
        let recon = self.params.contains_key("head.recon.w");
        let classify = if let Some(w0) = self.params.get("head.cls.w0") {
            let kind = if self.params.contains_key("head.cls.w2") {
                HeadKind::Mlp3
            } else {
                HeadKind::Linear1
            };
            let k = match kind {
                HeadKind::Linear1 => w0.shape()[1],
                HeadKind::Mlp3 => self.params["head.cls.w2"].shape()[1],
            };
            Some((kind, k))
        } else {
            None
        };
        let spec = HeadSpec { recon, classify };
        spec.validate()?;
        Ok(spec)
    }

    /// Errors unless the parameter map matches the layout implied by the
    /// configuration, channel count, and heads exactly (names and shapes).
    pub fn validate_layout(&self) -> Result<()> {
        let heads = self.head_spec()?;
        let layout =
            param_layout(&self.config, self.channels(), self.patches_per_epoch, &heads)?;
        if layout.len() != self.params.len() {
            return Err(Error::Parse(format!(
                "parameter map has {} entries, layout wants {}",
                self.params.len(),
                layout.len()
            )));
        }
        for (name, shape) in layout {
            match self.params.get(&name) {
                None => return Err(Error::Parse(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape => {
                    return Err(Error::Parse(format!(
                        "parameter {name} has shape {:?}, layout wants {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}
