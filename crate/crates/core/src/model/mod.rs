//! Encoder-decoder transformer with sequence-relative, table-structure and
//! local in-cell attention biases, plus a row-count regression head.

mod bias;
mod checkpoint;
mod config;
mod grammar;
mod layout;
mod transformer;

pub use bias::{relative_bucket, sequence_index, table_index, TableBiasIndex, SKIP};
pub use checkpoint::{decode_f64s, encode_f64s, Checkpoint, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use grammar::Allowed;
pub use layout::{cell_sequence, visibility, Cell, Coord, Layout};
pub use transformer::{rows_from_count, Model};
