//! Dense tensors, the handful of kernels the transformer needs, and a seeded RNG.
//!
//! Every kernel is a pure function with a fixed summation order, so repeated
//! calls on the same inputs are bitwise identical.

mod ops;
mod rng;
mod tensor;

pub use ops::{cosine_similarity, gelu, gelu_scalar, layer_norm, DEFAULT_LN_EPS};
pub use rng::Rng;
pub use tensor::{dot, Tensor};
