//! Differentiable-computation core: tensors, a reverse-mode tape, layer
//! primitives, initialization, the optimizer, gradient checking, and the
//! parameter archive.

pub mod adam;
pub mod archive;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod param;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use archive::Archive;
pub use param::{Binder, HasParams, Parameter};
pub use tape::{Gradients, NodeId, Tape, EPS_PROB};
pub use tensor::Tensor;
