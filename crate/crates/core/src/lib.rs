//! Dual-branch vision transformer with multi-grained features for
//! unsupervised person re-identification.

pub mod association;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod head;
pub mod image;
pub mod memory;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Features32 = head::MultiGrainFeatures<f32>;
pub type Features64 = head::MultiGrainFeatures<f64>;
pub type ProxyMemory32 = memory::ProxyMemory<f32>;
pub type ProxyMemory64 = memory::ProxyMemory<f64>;
pub type EvalSet32 = eval::EvalSet<f32>;
pub type EvalSet64 = eval::EvalSet<f64>;
