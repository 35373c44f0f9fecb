//! Inference, checkpoints, quantized decoding and the command line.

mod checkpoint;
pub mod cli;
mod quantized;
mod search;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use quantized::{logit_bound_check, quantized_infer, BoundReport};
pub use search::{argmax, beam_search, greedy_generate, Hypothesis, SearchConfig};
