//! Desk-scale benchmark harness for positional-encoding strategies in a
//! criss-cross spatio-temporal EEG transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — dense f64 tensors, a reverse-mode autodiff tape, and
//!   finite-difference gradient checking,
//! * [`geometry`] — electrode montages and spherical coordinates,
//! * [`posenc`] — the five positional-encoding variants under study,
//! * [`model`] — patch embedding, masking, criss-cross attention blocks,
//!   heads, and checkpoint serialisation,
//! * [`data`] — dataset container format, preprocessing, subject-level
//!   splits, and synthetic EEG generators,
//! * [`train`] — optimiser, schedules, losses, and the pretrain / probe /
//!   fine-tune protocols,
//! * [`metrics`] — confusion-matrix metrics and seed aggregation,
//! * [`config`] — run configuration with presets and layered overrides,
//! * [`verify`] — finite-difference gradient suites over ops and the model.
//!
//! Everything is deterministic: a `(seed, config, dataset)` triple fully
//! determines every reported number on a given platform.

pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod posenc;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
