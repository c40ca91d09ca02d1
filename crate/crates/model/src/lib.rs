//! Attention-based regressor from stacked cycle features to (SBP, DBP),
//! its checkpoint format and the cross-validation training loop.

mod checkpoint;
mod config;
mod net;
mod params;
pub mod training;

pub use checkpoint::{decode_params, encode_params, load_params, save_params, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use net::{
    embed, forward, forward_graph, head, multi_head_attention, position_wise_ffn, positional_encoding, predict,
    time_compressor, AttentionOut, AttentionVars, Bound, FfnVars, ForwardPass, HeadVars, Mode, LN_EPS,
};
pub use params::{ModelParams, OUTPUT_OFFSET, OUTPUT_SCALE};

use pulsebp_tensorgrad::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("d_model must be even, got {0}")]
    OddDimension(usize),
    #[error("sequence length {len} is not divisible by pool factor {factor}")]
    IndivisibleLength { len: usize, factor: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}
