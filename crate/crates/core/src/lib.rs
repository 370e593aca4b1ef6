//! Continual unsupervised domain adaptation for vibration-signal fault
//! diagnosis, on top of a small reverse-mode autodiff engine.

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod model;
pub mod normalization;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, NodeId};
pub use error::{Error, Result};
pub use model::{build_model, Model, ModelSpec, NormKind};
pub use normalization::{BatchNormState, NormPhase};
pub use tensor::Tensor;
