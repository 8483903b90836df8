//! Text-to-table generation with a small encoder-decoder transformer.
//!
//! The decoder fills a table template cell by cell. Training samples random
//! cell orders so that, at inference time, the model itself can pick which
//! cell to commit next.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod fsutil;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod table;
pub mod training;

pub use error::{Error, Result};
pub use table::{DatasetRecord, Table};
