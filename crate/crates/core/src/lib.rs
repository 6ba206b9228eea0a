//! Multi-task contrastive masked tabular modeling.
//!
//! A tabular encoder is pre-trained by jointly recovering a feature-corruption
//! mask and aligning its embeddings with those of paired images. Downstream
//! models then use the tabular encoder alone.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod metrics;
pub mod mtm;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{backward, grad_check, GradMap, Primitive, Tape, Var};
pub use error::{Error, Result};
pub use params::{Param, ParamStore};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
