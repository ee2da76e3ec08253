//! Hybrid bidirectional LSTM/GRU sequence regression for ventilator
//! pressure forecasting.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar type for the common cases. Training and
//! gradient checks use `f64`.

pub mod activations;
pub mod cells;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use activations::{Activation, SeluConstants};
pub use cells::{CellState, GruParams, LstmParams};
pub use error::{Error, Result};
pub use layers::Mode;
pub use model::{Census, HybridModel, ModelConfig};
pub use params::Parameters;
pub use scalar::Scalar;
pub use tensor::{EwOp, ReduceOp, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type HybridModel64 = HybridModel<f64>;
pub type HybridModel32 = HybridModel<f32>;
