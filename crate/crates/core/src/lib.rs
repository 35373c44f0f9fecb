//! A from-scratch Transformer toolkit.

pub mod attention;
pub mod blocks;
pub mod config;
pub mod ctx;
pub mod efficient;
pub mod embedding;
pub mod error;
pub mod model;
pub mod oracles;
pub mod runtime;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use ctx::Ctx;
pub use error::{Error, Result};
pub use tensor::{Float, ParamId, ParamStore, Rng, Tape, Tensor, Var};
