//! Training-objective estimators against exhaustive enumeration.

mod common;
mod oracles;

use std::sync::Arc;

use proptest::prelude::*;
use tabgen_core::corpus::{generate, CorpusSpec, Task, Vocab, EOC, PAD};
use tabgen_core::model::{cell_sequence, Allowed, Cell, Layout, Model};
use tabgen_core::numerics::Tensor;
use tabgen_core::seed;
use tabgen_core::training::{
    build_fixed_causal_pass, build_training_pass, cell_nlls, prepare_example, sample_permutation, PermutationPlan,
    Trainer, TrainingConfig,
};
use tabgen_core::DatasetRecord;

use common::{frozen_model, memory, two_by_one, two_by_two};
use oracles::{enumerated_objective, pass_objective, permutations, sampled_objective};

/// −log p(cell | filled) computed from scratch: a fresh template with the
/// filled cells written as context and the target teacher-forced alone.
fn reference_cell_nll(
    model: &Model,
    vocab: &Vocab,
    mem: &Arc<Tensor>,
    record: &DatasetRecord,
    filled: &[Cell],
    target: Cell,
) -> f64 {
    let l = model.config.max_cell_len;
    let t = &record.table;
    let mut layout = Layout::template(vocab, &t.headers, t.n_rows(), l).unwrap();
    let seq = |(r, c): Cell| cell_sequence(vocab, &t.headers[c - 1], t.rows[r - 1][c - 1].as_deref(), l).unwrap();
    for &cell in filled {
        layout.set_cell(cell, &seq(cell), 0);
    }
    let target_seq = seq(target);
    layout.set_cell(target, &target_seq, 1);
    let start = layout.slot_start(target);
    let positions: Vec<usize> = (start..start + target_seq.len()).collect();
    let rows = model.position_logits(mem, &layout, &positions).unwrap();
    let n_reserved = model.config.n_reserved();
    let mut nll = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let rule = Allowed::at(i, layout.tokens[start + i], l);
        let allowed: Vec<f64> = (0..row.len())
            .filter(|&id| rule.permits(id, n_reserved))
            .map(|id| row[id])
            .collect();
        let max = allowed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + allowed.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        nll += lse - row[target_seq[i]];
    }
    nll
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn two_by_one_pass_average_equals_enumerated_objective() {
    let rec = two_by_one();
    let (model, vocab) = frozen_model(std::slice::from_ref(&rec), 4, 1);
    let ex = prepare_example(&rec, &vocab, &model, false).unwrap();
    let mem = memory(&model, &vocab, &rec.text);
    let cells = [(1, 1), (2, 1)];
    let mut via_pass = 0.0;
    let mut reference = 0.0;
    for sigma in permutations(&cells) {
        for cut in 1..=2 {
            let plan = PermutationPlan {
                n_rows: 2,
                n_cols: 1,
                sigma: sigma.clone(),
                cut,
            };
            via_pass += pass_objective(&model, &mem, &ex, &plan) / 4.0;
            let (filled, open) = sigma.split_at(cut - 1);
            let mean: f64 = open
                .iter()
                .map(|&c| reference_cell_nll(&model, &vocab, &mem, &rec, filled, c))
                .sum::<f64>()
                / open.len() as f64;
            reference += mean / 4.0;
        }
    }
    assert!(close(via_pass, reference), "{via_pass} vs {reference}");
}

#[test]
fn fixed_causal_pass_is_the_row_major_chain_of_cuts() {
    for rec in [two_by_one(), two_by_two()] {
        let (model, vocab) = frozen_model(std::slice::from_ref(&rec), 4, 2);
        let ex = prepare_example(&rec, &vocab, &model, false).unwrap();
        let mem = memory(&model, &vocab, &rec.text);
        let fixed = cell_nlls(&model, &mem, &build_fixed_causal_pass(&ex, &model.config).unwrap()).unwrap();
        let n = ex.n_rows() * ex.n_cols();
        assert_eq!(fixed.len(), n);
        for (k, (cell, nll)) in fixed.iter().enumerate() {
            // Cut k+1 of the row-major order: the first open cell is `cell`.
            let plan = PermutationPlan::row_major(ex.n_rows(), ex.n_cols(), k + 1);
            assert_eq!(plan.open()[0], *cell);
            let per_cut = cell_nlls(&model, &mem, &build_training_pass(&ex, &plan, &model.config).unwrap()).unwrap();
            let (c, x) = per_cut.iter().find(|(c, _)| c == cell).unwrap();
            assert_eq!(c, cell);
            assert!(close(*x, *nll), "{cell:?}: {x} vs {nll}");
        }
    }
}

#[test]
fn monte_carlo_objective_matches_enumeration_on_two_by_two() {
    let rec = two_by_two();
    let (model, vocab) = frozen_model(std::slice::from_ref(&rec), 4, 3);
    let ex = prepare_example(&rec, &vocab, &model, false).unwrap();
    let mem = memory(&model, &vocab, &rec.text);
    let exact = enumerated_objective(&model, &mem, &ex);
    let (mean, se) = sampled_objective(&model, &mem, &ex, 2000, 17);
    assert!((mean - exact).abs() < 3.0 * se, "mc {mean} ± {se}, exact {exact}");
}

#[test]
fn count_head_fits_a_constant_row_count() {
    let mut spec = CorpusSpec::new(Task::Lineitems, 64, 4);
    spec.min_rows = 3;
    spec.max_rows = 3;
    let records: Vec<_> = generate(&spec).unwrap().collect();
    let (train, held_out) = records.split_at(48);
    let vocab = tabgen_core::corpus::build_vocab(&records, 4);
    let mut cfg = common::tiny_config(&vocab, 4);
    cfg.d_model = 16;
    cfg.d_ff = 32;
    let model = Model::new(cfg, 0).unwrap();
    let examples: Vec<_> = train
        .iter()
        .map(|r| prepare_example(r, &vocab, &model, false).unwrap())
        .collect();
    let tc = TrainingConfig {
        steps: 200,
        batch_size: 8,
        lr: 3e-3,
        ..TrainingConfig::default()
    };
    let mut trainer = Trainer::new(model, tc).unwrap();
    for _ in 0..200 {
        trainer.train_step(&examples).unwrap();
    }
    for r in held_out {
        let y = trainer
            .model
            .predict_count(&memory(&trainer.model, &vocab, &r.text))
            .unwrap();
        assert!((2.5..=3.5).contains(&y), "{}: {y}", r.id);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every plan yields a pass whose targets are exactly the open cells'
    /// sequences, weighted to a mean over open cells, with open cells
    /// mutually invisible and filled cells visible to all.
    #[test]
    fn training_pass_structure(seed_value in any::<u64>(), rows in 1usize..4, cols in 1usize..4) {
        let text = "first item : name pear , qty 3 .";
        let headers: Vec<&str> = ["name", "qty", "price"][..cols].to_vec();
        let row: Vec<Option<&str>> = ["pear", "3", "9"][..cols].iter().map(|s| Some(*s)).collect();
        let table: Vec<&[Option<&str>]> = (0..rows).map(|_| row.as_slice()).collect();
        let rec = common::record("p", text, &headers, &table);
        let (model, vocab) = frozen_model(std::slice::from_ref(&rec), 4, 0);
        let ex = prepare_example(&rec, &vocab, &model, false).unwrap();
        let plan = sample_permutation(rows, cols, &mut seed::rng(&[seed_value]));
        let pass = build_training_pass(&ex, &plan, &model.config).unwrap();

        let open = plan.open();
        let weight_sum: f64 = pass.weights.iter().sum();
        let tokens_per_cell = 2.0; // one content token plus end-of-cell
        prop_assert!((weight_sum - tokens_per_cell).abs() < 1e-12);
        prop_assert_eq!(pass.targets.iter().filter(|&&t| t == EOC).count(), open.len());
        let mut cells = pass.cells.clone();
        cells.dedup();
        let mut sorted_open = open.to_vec();
        sorted_open.sort_unstable();
        prop_assert_eq!(cells, sorted_open);

        let vis = pass.layout.visibility();
        let n = pass.layout.len();
        let cell_of = |i: usize| {
            let c = pass.layout.coords[i];
            (c.row, c.col)
        };
        for i in 0..n {
            for j in 0..n {
                let (ci, cj) = (pass.layout.coords[i], pass.layout.coords[j]);
                if !ci.is_cell() || !cj.is_cell() || cell_of(i) == cell_of(j) || pass.layout.tokens[j] == PAD {
                    continue;
                }
                let j_open = open.contains(&cell_of(j));
                prop_assert_eq!(vis[i * n + j], !j_open);
            }
        }
    }
}
