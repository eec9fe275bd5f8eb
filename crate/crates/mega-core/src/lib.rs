//! Masked generative modeling over tokenized body meshes.
//!
//! The crate covers the full desk-scale pipeline: synthetic articulated-body
//! data, a per-part linear mesh tokenizer, a masked encoder-decoder
//! transformer trained from scratch with reverse-mode differentiation,
//! deterministic and stochastic token generation, and the evaluation metrics
//! (PVE / MPJPE / PA-MPJPE, best-of-Q, APD, FID, per-vertex uncertainty).

pub mod body;
pub mod config;
pub mod error;
pub mod geom;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod tokenizer;

pub use body::dataset::DatasetRecord;
pub use body::skeleton::Skeleton;
pub use body::{BodyParams, CanonicalMesh, Observation};
pub use config::{MaskingMode, RunConfig};
pub use error::{Error, Result};
pub use geom::CameraParams;
pub use model::{MaskedSequence, MegaModel, ModelConfig};
pub use nn::{ParamSet, Tensor};
pub use pipeline::Workspace;
pub use sampler::{GenerationConfig, GenerationMode};
pub use tokenizer::{TokenSequence, TokenizerModel};
