//! Model-guided table filling: each outer iteration greedily generates every
//! eligible open cell in parallel, then commits the `k` best-scored ones.

mod config;
mod scorer;
mod search;
mod state;

pub use config::{Constraint, DecodingConfig, InnerCriterion, OuterCriterion, Stopping, TieBreak};
pub use scorer::{CellScorer, MockScorer, ModelScorer, Request};
pub use search::{
    decode_fixed, decode_semi_templated, decode_table, inner_loop, state_to_table, Candidate, DecodeOutput,
    SearchOutput, TraceEntry,
};
pub use state::{apply_constraint, outer_criterion, semi_templated_stop, DecodingState};
