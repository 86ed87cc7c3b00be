//! Two-view vision transformers with token-level fusion, random token
//! fusion as a training-time regularizer, and the tooling to train and
//! verify them at desk scale.
//!
//! Layering, bottom up: [`tensor`] and [`tape`] (reverse-mode autodiff),
//! [`vit`] (encoder blocks), [`fusion`], [`model`], then [`data`],
//! [`train`], [`experiment`] and [`attention`] on top. [`gradcheck`] holds
//! the finite-difference verification suite.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use fusion::{FusionStrategy, RtfMask};
pub use model::{MultiViewModel, ViewMode};
pub use scalar::Scalar;
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
pub use vit::{ModelConfig, TokenSet};
