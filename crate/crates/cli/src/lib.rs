//! Command-line orchestration: corpus generation, training, decoding,
//! scoring and ablation sweeps.

pub mod ablate;
pub mod config;
pub mod decode;
pub mod error;
pub mod eval;
pub mod evaluate;
pub mod gen_data;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
