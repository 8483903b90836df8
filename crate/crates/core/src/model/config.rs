use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::FloatWidth;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled in from the vocabulary when absent.
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_enc_layers: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_dec_layers: usize,
    #[serde(default = "defaults::d_ff")]
    pub d_ff: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    /// Cell slot length l: a begin marker plus up to l−1 content tokens.
    #[serde(default = "defaults::max_cell_len")]
    pub max_cell_len: usize,
    #[serde(default = "defaults::max_rows")]
    pub max_rows: usize,
    #[serde(default = "defaults::max_cols")]
    pub max_cols: usize,
    /// Buckets of the sequence-relative bias.
    #[serde(default = "defaults::rel_buckets")]
    pub rel_buckets: usize,
    #[serde(default = "defaults::rel_max_distance")]
    pub rel_max_distance: usize,
    #[serde(default = "defaults::max_input_len")]
    pub max_input_len: usize,
    /// Standard deviation of the initial β/τ/λ tables; 0 starts them at zero.
    #[serde(default = "defaults::bias_init_std")]
    pub bias_init_std: f64,
    #[serde(default)]
    pub float_width: FloatWidth,
}

mod defaults {
    pub fn d_model() -> usize {
        64
    }
    pub fn n_heads() -> usize {
        4
    }
    pub fn n_layers() -> usize {
        2
    }
    pub fn d_ff() -> usize {
        128
    }
    pub fn dropout() -> f64 {
        0.1
    }
    pub fn max_cell_len() -> usize {
        2
    }
    pub fn max_rows() -> usize {
        8
    }
    pub fn max_cols() -> usize {
        8
    }
    pub fn rel_buckets() -> usize {
        32
    }
    pub fn rel_max_distance() -> usize {
        128
    }
    pub fn max_input_len() -> usize {
        512
    }
    pub fn bias_init_std() -> f64 {
        1.0
    }
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: defaults::d_model(),
            n_heads: defaults::n_heads(),
            n_enc_layers: defaults::n_layers(),
            n_dec_layers: defaults::n_layers(),
            d_ff: defaults::d_ff(),
            dropout: defaults::dropout(),
            max_cell_len: defaults::max_cell_len(),
            max_rows: defaults::max_rows(),
            max_cols: defaults::max_cols(),
            rel_buckets: defaults::rel_buckets(),
            rel_max_distance: defaults::rel_max_distance(),
            max_input_len: defaults::max_input_len(),
            bias_init_std: defaults::bias_init_std(),
            float_width: FloatWidth::F64,
        }
    }

    /// Number of reserved token ids for this row limit.
    pub fn n_reserved(&self) -> usize {
        5 + self.max_rows
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.max_cell_len < 2 {
            return bad("max_cell_len must be at least 2");
        }
        if self.max_rows == 0 || self.max_cols == 0 {
            return bad("max_rows and max_cols must be positive");
        }
        if self.vocab_size <= self.n_reserved() {
            return bad("vocabulary has no regular tokens");
        }
        if self.rel_buckets < 4 || !self.rel_buckets.is_multiple_of(2) {
            return bad("rel_buckets must be an even number >= 4");
        }
        if self.rel_max_distance < self.rel_buckets / 2 {
            return bad("rel_max_distance must be at least rel_buckets / 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.bias_init_std >= 0.0 && self.bias_init_std.is_finite()) {
            return bad("bias_init_std must be finite and non-negative");
        }
        if self.d_ff == 0 || self.max_input_len == 0 {
            return bad("d_ff and max_input_len must be positive");
        }
        Ok(())
    }
}
