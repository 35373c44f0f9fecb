//! Dense tensors, reverse-mode autodiff, seeded randomness, initialization
//! and quantized arithmetic.

mod dense;
mod float;
mod init;
mod params;
mod quant;
mod rng;
mod tape;

pub use dense::{log_softmax_rows, softmax_rows, Tensor};
pub use float::Float;
pub use init::{depth_gain, position_gain, xavier_bound, xavier_init, InitDist};
pub use params::{HasParams, ParamId, ParamStore};
pub use quant::{qmatmul, quantized_matmul, rounding_bound, QTensor, QuantSpec, QuantStats};
pub use rng::Rng;
pub use tape::{Grads, NormDenom, Tape, Var};
