//! Permutation-order training: sample a cell ordering and a cut, fill the
//! prefix from gold, and predict every remaining cell in one pass.

mod pass;
mod plan;
mod trainer;

pub use pass::{
    build_fixed_causal_pass, build_semi_templated_corpus_variant, build_training_pass, cell_nlls, pass_loss,
    prepare_example, TrainingExample, TrainingPass,
};
pub use plan::{sample_permutation, PermutationPlan};
pub use trainer::{evaluation_loss, sample_batch, training_step, CellOrder, StepStats, Trainer, TrainingConfig};
