//! Deterministic numeric core: tensors and their file format, forward ops,
//! a small gradient tape, and finite-difference gradient checking.

pub mod gradcheck;
pub(crate) mod kernels;
pub mod lltf;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradReport};
pub use kernels::AttnDims;
pub use ops::{attention, layer_norm, linear, timestep_embedding, LAYER_NORM_EPS};
pub use params::ParamStore;
pub use rng::Rng;
pub use tape::{Grads, Tape, Var};
pub use tensor::{DType, Tensor};
