//! Attention-based grid reasoning for one-stage detection, at desk scale.
//!
//! The crate is generic over the scalar type ([`Scalar`]); `f32` is used for
//! training and inference and `f64` for gradient checks. Concrete aliases
//! for both precisions are re-exported at the crate root.

pub mod autograd;
pub mod bench;
pub mod boxes;
pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod inspect;
pub mod optim;
pub mod params;
pub mod reasoning;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use boxes::BBox;
pub use detector::{Detection, Detector, ModelConfig};
pub use error::{Error, Result};
pub use fusion::Variant;
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
