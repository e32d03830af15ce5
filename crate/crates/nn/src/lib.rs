//! Minimal differentiable-layer toolkit. Every layer exposes an explicit
//! `forward` that returns its output together with a cache, and a
//! `backward` that consumes the cache, accumulates parameter gradients and
//! returns the input gradient. Layers are generic over `f32` (training)
//! and `f64` (gradient checks).

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use layers::*;
pub use loss::{masked_mse, mse};
pub use optim::{clip_grad_norm, AdamW, PlateauSchedule};
pub use param::{Module, Param};
pub use scalar::{matmul, Scalar};
pub use tensor::Tensor;
