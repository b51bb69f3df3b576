//! Run configuration: desk defaults, a full-scale preset, JSON file
//! overrides, and flag overrides layered in that order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{samples_per_epoch, SplitFractions, SPLIT_SEED};
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig};
use crate::posenc::PeKind;

pub const DESK_PRESET: &str = "desk";
pub const FULL_SCALE_PRESET: &str = "full-scale";

/// Hyper-parameters for one training protocol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; cosine-annealed to `lr_min` over all steps.
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Label-smoothing mass spread over classes (classification runs only).
    pub label_smoothing: f64,
}

impl TrainSettings {
    fn validate(&self, name: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "{name}: epochs and batch size must be positive"
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "{name}: lr must be non-negative, got {}",
                self.lr
            )));
        }
        if !(self.lr_min.is_finite() && (0.0..=self.lr).contains(&self.lr_min)) {
            return Err(Error::Config(format!(
                "{name}: lr_min must lie in [0, lr], got {}",
                self.lr_min
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "{name}: weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.label_smoothing.is_finite() && (0.0..1.0).contains(&self.label_smoothing)) {
            return Err(Error::Config(format!(
                "{name}: label smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Dataset expectations and the subject split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub sampling_rate: f64,
    pub epoch_seconds: f64,
    pub split: SplitFractions,
    pub split_seed: u64,
}

/// File locations; flags override whatever the config file says.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSettings {
    pub data: Option<String>,
    pub out: Option<String>,
    pub checkpoint: Option<String>,
}

/// Fully resolved configuration for a run; reports echo it verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    /// Classification head used by fine-tuning; probing always trains a
    /// single affine head.
    pub head: HeadKind,
    pub data: DataSettings,
    pub pretrain: TrainSettings,
    pub probe: TrainSettings,
    pub finetune: TrainSettings,
    pub seeds: Vec<u64>,
    pub paths: PathSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let downstream = TrainSettings {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            lr_min: 1e-5,
            weight_decay: 0.001,
            label_smoothing: 0.1,
        };
        RunConfig {
            preset: DESK_PRESET.to_string(),
            model: ModelConfig::desk(PeKind::Spe),
            head: HeadKind::Linear1,
            data: DataSettings {
                sampling_rate: 40.0,
                epoch_seconds: 4.0,
                split: SplitFractions::default(),
                split_seed: SPLIT_SEED,
            },
            pretrain: TrainSettings {
                epochs: 40,
                batch_size: 8,
                lr: 1e-3,
                lr_min: 1e-5,
                weight_decay: 0.0,
                label_smoothing: 0.0,
            },
            probe: downstream,
            finetune: downstream,
            seeds: vec![1, 2, 3, 4, 5],
            paths: PathSettings::default(),
        }
    }
}

/// Overlay applied when a config file selects the full-scale preset. The
/// constants exist for parameter-count checks, not for desk-size training.
fn full_scale_overlay() -> Value {
    let model = ModelConfig::full_scale(PeKind::Spe);
    json!({
        "model": {
            "layers": model.layers,
            "heads": model.heads,
            "embed_dim": model.embed_dim,
            "ff_dim": model.ff_dim,
            "patch_len": model.patch_len,
        },
        "data": { "sampling_rate": 200.0, "epoch_seconds": 10.0 },
        "pretrain": { "batch_size": 32, "lr": 1e-5, "lr_min": 1e-7 },
        "probe": { "batch_size": 64, "lr": 1e-5, "lr_min": 1e-7 },
        "finetune": { "batch_size": 64, "lr": 1e-5, "lr_min": 1e-7 },
    })
}

/// Recursively overlays `over` onto `base`: objects merge key-wise, anything
/// else (scalars, arrays) is replaced outright.
pub fn merge_json(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (key, v) in o {
                match b.get_mut(key) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(key.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

impl RunConfig {
    /// Layers `file_text` (JSON) over the defaults; a `"preset"` key inside
    /// the file is applied between the defaults and the file's own keys.
    /// Unknown keys anywhere fail the final decode.
    pub fn resolve(file_text: Option<&str>) -> Result<RunConfig> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(text) = file_text {
            let overlay: Value = serde_json::from_str(text)?;
            if !overlay.is_object() {
                return Err(Error::Config("config file must hold a JSON object".into()));
            }
            let preset = overlay
                .get("preset")
                .map(|p| {
                    p.as_str().map(str::to_string).ok_or_else(|| {
                        Error::Config("preset must be a string".into())
                    })
                })
                .transpose()?
                .unwrap_or_else(|| DESK_PRESET.to_string());
            match preset.as_str() {
                DESK_PRESET => {}
                FULL_SCALE_PRESET => merge_json(&mut value, &full_scale_overlay()),
                other => {
                    return Err(Error::Config(format!(
                        "unknown preset {other:?} (expected {DESK_PRESET} or {FULL_SCALE_PRESET})"
                    )))
                }
            }
            merge_json(&mut value, &overlay);
        }
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        RunConfig::resolve(Some(&text))
    }

    pub fn validate(&self) -> Result<()> {
        if self.preset != DESK_PRESET && self.preset != FULL_SCALE_PRESET {
            return Err(Error::Config(format!("unknown preset {:?}", self.preset)));
        }
        self.model.validate()?;
        self.data.split.validate()?;
        let t_epoch = samples_per_epoch(self.data.sampling_rate, self.data.epoch_seconds)?;
        if t_epoch % self.model.patch_len != 0 {
            return Err(Error::Config(format!(
                "epoch of {t_epoch} samples is not divisible by patch length {}",
                self.model.patch_len
            )));
        }
        self.pretrain.validate("pretrain")?;
        self.probe.validate("probe")?;
        self.finetune.validate("finetune")?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        Ok(())
    }

    /// Patches per epoch implied by the data settings and patch length.
    pub fn patches_per_epoch(&self) -> Result<usize> {
        Ok(samples_per_epoch(self.data.sampling_rate, self.data.epoch_seconds)?
            / self.model.patch_len)
    }
}
