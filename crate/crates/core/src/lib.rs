//! Region-adaptive deformable network for full-reference image quality
//! assessment, built on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{DatasetManifest, ImageBuffer, ManifestRecord, PatchBatch, PatchMode};
pub use error::{Error, Result};
pub use model::{build_model, Model, ModelConfig, ScoreRecord, Variant};
pub use params::{Grads, ModelParams, Params};
pub use tensor::{Element, Tape, Tensor, Var};
