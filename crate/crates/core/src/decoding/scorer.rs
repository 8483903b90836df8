use std::sync::Arc;

use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::model::{Cell, Layout, Model};
use crate::numerics::Tensor;

use super::state::DecodingState;

/// One next-token query: a cell and the tokens generated for it so far.
pub type Request = (Cell, Vec<TokenId>);

/// Source of next-token logits for open cells given the committed context.
/// Implementations must be pure: identical inputs give identical outputs.
pub trait CellScorer {
    fn vocab_size(&self) -> usize;
    fn n_reserved(&self) -> usize;
    /// Slot length l (content limit is l−1).
    fn max_cell_len(&self) -> usize;
    /// Raw (unmasked) logits, one row per request.
    fn logits(&self, state: &DecodingState, requests: &[Request]) -> Result<Vec<Vec<f64>>>;
}

/// Scores cells with the transformer; all requests of a step share one
/// decoder pass since open cells cannot see each other.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocab,
    pub memory: Arc<Tensor>,
    pub headers: Vec<String>,
    /// Committed cells are chained in commit order instead of sharing group 0.
    pub causal: bool,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, vocab: &'a Vocab, text: &str, headers: &[String], causal: bool) -> Result<Self> {
        if headers.len() > model.config.max_cols {
            return Err(Error::Config(format!(
                "{} columns exceed the model limit {}",
                headers.len(),
                model.config.max_cols
            )));
        }
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Config("vocabulary does not match the model".into()));
        }
        let src = model.source_ids(vocab, text)?;
        Ok(ModelScorer {
            model,
            vocab,
            memory: model.memory(&src)?,
            headers: headers.to_vec(),
            causal,
        })
    }

    /// Decoder layout for `state` with each request's partial content.
    pub fn layout(&self, state: &DecodingState, requests: &[Request]) -> Result<Layout> {
        let l = self.model.config.max_cell_len;
        let mut layout = Layout::template(self.vocab, &self.headers, state.n_rows, l)?;
        let open = if self.causal { u32::MAX } else { 1 };
        for cell in state.all_cells() {
            layout.set_group(cell, open);
        }
        for (k, &cell) in state.commit_order.iter().enumerate() {
            let group = if self.causal { k as u32 + 1 } else { 0 };
            layout.set_cell(cell, state.cell(cell), group);
        }
        for (cell, partial) in requests {
            if state.is_decoded(*cell) || partial.len() >= l {
                return Err(Error::Decoding(format!("cell {cell:?} cannot take another token")));
            }
            layout.set_cell(*cell, partial, open);
        }
        Ok(layout)
    }
}

impl CellScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn n_reserved(&self) -> usize {
        self.model.config.n_reserved()
    }

    fn max_cell_len(&self) -> usize {
        self.model.config.max_cell_len
    }

    fn logits(&self, state: &DecodingState, requests: &[Request]) -> Result<Vec<Vec<f64>>> {
        let layout = self.layout(state, requests)?;
        let positions: Vec<usize> = requests
            .iter()
            .map(|(cell, partial)| layout.slot_start(*cell) + partial.len())
            .collect();
        self.model.position_logits(&self.memory, &layout, &positions)
    }
}

/// A deterministic stand-in for the model: logits are a hash of
/// (seed, cell, committed context, partial content).
#[derive(Clone, Debug)]
pub struct MockScorer {
    pub seed: u64,
    pub vocab_size: usize,
    pub n_reserved: usize,
    pub max_cell_len: usize,
    /// Scales the pseudo-random logits; larger values make sharper choices.
    pub temperature: f64,
}

impl MockScorer {
    fn context_key(state: &DecodingState) -> Vec<u64> {
        let mut key = Vec::new();
        for cell in state.all_cells() {
            if state.is_decoded(cell) {
                key.push((cell.0 * 1000 + cell.1) as u64);
                key.extend(state.cell(cell).iter().map(|&t| t as u64));
            }
        }
        key
    }
}

impl CellScorer for MockScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn n_reserved(&self) -> usize {
        self.n_reserved
    }

    fn max_cell_len(&self) -> usize {
        self.max_cell_len
    }

    fn logits(&self, state: &DecodingState, requests: &[Request]) -> Result<Vec<Vec<f64>>> {
        use rand_distr::{Distribution, StandardNormal};
        let ctx = Self::context_key(state);
        Ok(requests
            .iter()
            .map(|((r, c), partial)| {
                let mut parts = vec![self.seed, *r as u64, *c as u64, u64::MAX];
                parts.extend(&ctx);
                parts.push(u64::MAX - 1);
                parts.extend(partial.iter().map(|&t| t as u64));
                let mut rng = crate::seed::rng(&parts);
                (0..self.vocab_size)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * self.temperature
                    })
                    .collect()
            })
            .collect())
    }
}
