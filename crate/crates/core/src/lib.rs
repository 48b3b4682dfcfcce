//! Two-branch image tampering localization network on a small reverse-mode
//! autodiff engine.

pub mod caf;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod noise;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use loss::LossConfig;
pub use model::{Model, Network};
pub use nn::{Ctx, ParamId, ParamStore};
pub use tensor::{Precision, Tensor};
