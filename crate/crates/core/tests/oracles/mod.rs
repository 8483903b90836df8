//! Independent reference implementations the library is checked against:
//! finite differences, exhaustive enumeration and brute-force search.
#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use tabgen_core::corpus::{build_vocab, generate, CorpusSpec, Task, BOS, EOC, NULL};
use tabgen_core::decoding::{CellScorer, DecodingState, InnerCriterion, MockScorer, OuterCriterion, Request};
use tabgen_core::metrics::Counts;
use tabgen_core::model::{Allowed, Cell, Model, ModelConfig};
use tabgen_core::numerics::{GradBuffer, Tensor};
use tabgen_core::seed;
use tabgen_core::training::{
    build_training_pass, cell_nlls, pass_loss, prepare_example, sample_permutation, PermutationPlan, TrainingExample,
    TrainingPass,
};
use tabgen_core::Table;

/// All orderings of `items`.
pub fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}

pub fn row_major(rows: usize, cols: usize) -> Vec<Cell> {
    (1..=rows).flat_map(|r| (1..=cols).map(move |c| (r, c))).collect()
}

// ---- gradients -------------------------------------------------------------

pub struct GradFixture {
    pub model: Model,
    pub batch: Vec<(TrainingExample, TrainingPass)>,
}

/// A two-example batch of small tables under a perturbed toy model.
pub fn grad_fixture(task: Task) -> GradFixture {
    let mut spec = CorpusSpec::new(task, 2, 5);
    spec.min_rows = 2;
    spec.max_rows = 3;
    let records: Vec<_> = generate(&spec).unwrap().collect();
    let vocab = build_vocab(&records, 4);
    let mut cfg = ModelConfig::new(vocab.len());
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.max_rows = 4;
    cfg.max_cols = 4;
    cfg.rel_buckets = 8;
    cfg.rel_max_distance = 16;
    cfg.dropout = 0.0;
    let mut model = Model::new(cfg, 3).unwrap();
    // Move every parameter (bias tables and count head start near zero) off
    // its initialisation so that all paths carry gradient.
    let mut rng = seed::rng(&[11]);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for x in model.store.value_mut(id).data_mut() {
            *x += noise.sample(&mut rng);
        }
    }
    let batch = records
        .iter()
        .map(|r| {
            let ex = prepare_example(r, &vocab, &model, false).unwrap();
            let mut prng = seed::rng(&[rng.random::<u64>()]);
            let mut plan = sample_permutation(ex.n_rows(), ex.n_cols(), &mut prng);
            plan.cut = 1 + ex.n_rows() * ex.n_cols() / 2;
            let pass = build_training_pass(&ex, &plan, &model.config).unwrap();
            (ex, pass)
        })
        .collect();
    GradFixture { model, batch }
}

/// Batch loss (mean NLL + mean count MSE) and, optionally, its gradient.
pub fn batch_loss(f: &GradFixture, model: &Model, grads: Option<&mut GradBuffer>) -> f64 {
    let n = f.batch.len() as f64;
    let mut total = 0.0;
    let mut sink = GradBuffer::empty(model.store.len());
    for (ex, pass) in &f.batch {
        let mut g = model.graph(true);
        let mem = model.encode(&mut g, &ex.source, None).unwrap();
        let count = model.count_head(&mut g, mem).unwrap();
        let mse = g.mse(count, &[ex.n_groups as f64]).unwrap();
        let nll = pass_loss(model, &mut g, mem, pass, 0.1, None).unwrap();
        let sum = g.add(nll, mse).unwrap();
        let root = g.scale(sum, 1.0 / n);
        total += g.value(root).item();
        if grads.is_some() {
            g.backward(root, &mut sink).unwrap();
        }
    }
    if let Some(out) = grads {
        out.add_assign(&sink);
    }
    total
}

/// Worst relative error of the analytic gradient against central
/// differences over every parameter entry, and the number of entries.
pub fn max_gradient_error(task: Task) -> (f64, usize) {
    let f = grad_fixture(task);
    let mut analytic = GradBuffer::empty(f.model.store.len());
    batch_loss(&f, &f.model, Some(&mut analytic));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut model = f.model.clone();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let a = analytic
            .get(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; model.store.value(id).data().len()]);
        for (i, &ai) in a.iter().enumerate() {
            let x0 = model.store.value(id).data()[i];
            model.store.value_mut(id).data_mut()[i] = x0 + h;
            let up = batch_loss(&f, &model, None);
            model.store.value_mut(id).data_mut()[i] = x0 - h;
            let down = batch_loss(&f, &model, None);
            model.store.value_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((ai - numeric).abs() / ai.abs().max(numeric.abs()).max(1e-3));
            checked += 1;
        }
    }
    (worst, checked)
}

// ---- training objective ----------------------------------------------------

/// Mean open-cell NLL of a plan through the training pass.
pub fn pass_objective(model: &Model, mem: &Arc<Tensor>, ex: &TrainingExample, plan: &PermutationPlan) -> f64 {
    let pass = build_training_pass(ex, plan, &model.config).unwrap();
    let nlls = cell_nlls(model, mem, &pass).unwrap();
    nlls.iter().map(|(_, x)| x).sum::<f64>() / nlls.len() as f64
}

/// The objective averaged over every ordering and every cut.
pub fn enumerated_objective(model: &Model, mem: &Arc<Tensor>, ex: &TrainingExample) -> f64 {
    let (rows, cols) = (ex.n_rows(), ex.n_cols());
    let n = rows * cols;
    let orders = permutations(&row_major(rows, cols));
    let weight = 1.0 / (orders.len() * n) as f64;
    let mut exact = 0.0;
    for sigma in orders {
        for cut in 1..=n {
            let plan = PermutationPlan {
                n_rows: rows,
                n_cols: cols,
                sigma: sigma.clone(),
                cut,
            };
            exact += pass_objective(model, mem, ex, &plan) * weight;
        }
    }
    exact
}

/// Monte-Carlo mean and standard error over `n` sampled plans.
pub fn sampled_objective(
    model: &Model,
    mem: &Arc<Tensor>,
    ex: &TrainingExample,
    n: usize,
    seed_value: u64,
) -> (f64, f64) {
    let mut rng = seed::rng(&[seed_value]);
    let samples: Vec<f64> = (0..n)
        .map(|_| pass_objective(model, mem, ex, &sample_permutation(ex.n_rows(), ex.n_cols(), &mut rng)))
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

// ---- decoding --------------------------------------------------------------

pub fn mock(seed: u64, max_cell_len: usize) -> MockScorer {
    MockScorer {
        seed,
        vocab_size: 14,
        n_reserved: 8,
        max_cell_len,
        temperature: 2.0,
    }
}

/// Why a finished state is not a well-formed table, if it is not.
pub fn validity_violation(
    state: &DecodingState,
    rows: usize,
    cols: usize,
    n_reserved: usize,
    l: usize,
) -> Option<String> {
    if (state.n_rows, state.n_cols) != (rows, cols) {
        return Some(format!(
            "shape {}x{}, expected {rows}x{cols}",
            state.n_rows, state.n_cols
        ));
    }
    if !state.is_complete() {
        return Some("undecoded cells remain".into());
    }
    for cell in state.all_cells() {
        let seq = state.cell(cell);
        if seq.len() < 2 || seq.len() > l {
            return Some(format!("{cell:?} has length {}: {seq:?}", seq.len()));
        }
        let (&last, content) = seq.split_last().unwrap();
        if last != EOC {
            return Some(format!("{cell:?} not closed: {seq:?}"));
        }
        if content != [NULL] && content.iter().any(|&t| t < n_reserved) {
            return Some(format!("{cell:?} holds a structural token: {seq:?}"));
        }
    }
    let mut order = state.commit_order.clone();
    order.sort_unstable();
    if order != state.all_cells().collect::<Vec<_>>() {
        return Some("commit order is not a permutation of the cells".into());
    }
    None
}

/// Greedy completion of `cell`, written independently of the library's
/// inner loop. Returns the tokens and the log-probabilities of the tokens
/// the grammar left a choice for.
pub fn complete(scorer: &MockScorer, state: &DecodingState, cell: Cell) -> (Vec<usize>, Vec<f64>) {
    let (mut toks, mut lps) = (Vec::new(), Vec::new());
    for t in 0..scorer.max_cell_len {
        let current = toks.last().copied().unwrap_or(BOS);
        let rule = Allowed::at(t, current, scorer.max_cell_len);
        let request: Request = (cell, toks.clone());
        let logits = &scorer.logits(state, &[request]).unwrap()[0];
        let ids: Vec<usize> = (0..logits.len())
            .filter(|&i| rule.permits(i, scorer.n_reserved))
            .collect();
        let m = ids.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + ids.iter().map(|&i| (logits[i] - m).exp()).sum::<f64>().ln();
        let best = *ids
            .iter()
            .max_by(|&&a, &&b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
            .unwrap();
        toks.push(best);
        if ids.len() > 1 {
            lps.push(logits[best] - lse);
        }
        if best == EOC {
            break;
        }
    }
    (toks, lps)
}

pub fn aggregate(criterion: InnerCriterion, lps: &[f64]) -> f64 {
    match criterion {
        InnerCriterion::Min => lps.iter().copied().fold(f64::INFINITY, f64::min),
        InnerCriterion::Max => lps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        InnerCriterion::Mean => lps.iter().sum::<f64>() / lps.len() as f64,
    }
}

/// Score sequence of committing cells in `order`, each greedily completed
/// in the context committed before it.
pub fn path_scores(scorer: &MockScorer, rows: usize, cols: usize, order: &[Cell], inner: InnerCriterion) -> Vec<f64> {
    let mut state = DecodingState::new(rows, cols);
    order
        .iter()
        .map(|&cell| {
            let (toks, lps) = complete(scorer, &state, cell);
            state.commit(cell, toks, false).unwrap();
            aggregate(inner, &lps)
        })
        .collect()
}

/// Among all commit orders, the one that at every step commits the
/// best-scoring available cell, ties going to the earlier cell in row-major
/// order.
pub fn brute_force_order(
    scorer: &MockScorer,
    rows: usize,
    cols: usize,
    inner: InnerCriterion,
    outer: OuterCriterion,
) -> Vec<Cell> {
    let better = |a: (&[Cell], &[f64]), b: (&[Cell], &[f64])| -> bool {
        for ((ca, x), (cb, y)) in a.0.iter().zip(a.1).zip(b.0.iter().zip(b.1)) {
            if x != y {
                return match outer {
                    OuterCriterion::MaxFirst => x > y,
                    OuterCriterion::MinFirst => x < y,
                };
            }
            if ca != cb {
                return ca < cb;
            }
        }
        false
    };
    let mut best: Option<(Vec<Cell>, Vec<f64>)> = None;
    for order in permutations(&row_major(rows, cols)) {
        let s = path_scores(scorer, rows, cols, &order, inner);
        if best.as_ref().is_none_or(|(o, b)| better((&order, &s), (o, b))) {
            best = Some((order, s));
        }
    }
    best.unwrap().0
}

// ---- metrics ---------------------------------------------------------------

/// Exact-match counts under the best one-to-one row pairing, found by
/// trying every injection of predicted rows into gold rows or nowhere.
pub fn brute_force_counts(pred: &Table, gold: &Table) -> Counts {
    let cols: Vec<usize> = pred.headers.iter().map(|h| gold.column_index(h).unwrap()).collect();
    let matches = |p: usize, g: usize| {
        cols.iter()
            .enumerate()
            .filter(|&(pc, &gc)| {
                matches!((pred.rows[p][pc].as_deref(), gold.rows[g][gc].as_deref()), (Some(x), Some(y)) if x.trim() == y.trim())
            })
            .count()
    };
    fn best(p: usize, used: &mut Vec<bool>, n_pred: usize, matches: &dyn Fn(usize, usize) -> usize) -> usize {
        if p == n_pred {
            return 0;
        }
        let mut top = best(p + 1, used, n_pred, matches);
        for g in 0..used.len() {
            if !used[g] {
                used[g] = true;
                top = top.max(matches(p, g) + best(p + 1, used, n_pred, matches));
                used[g] = false;
            }
        }
        top
    }
    let filled = |t: &Table| t.rows.iter().flatten().filter(|c| c.is_some()).count();
    Counts {
        correct: best(0, &mut vec![false; gold.n_rows()], pred.n_rows(), &matches),
        predicted: filled(pred),
        gold: filled(gold),
    }
}

/// A random pair over a tiny alphabet (so that rows collide and tie) with
/// up to four rows each; the prediction lists the columns in shuffled order.
pub fn random_table_pair(rng: &mut impl Rng) -> (Table, Table) {
    let n_cols = rng.random_range(1..=3);
    let headers: Vec<String> = (0..n_cols).map(|c| format!("h{c}")).collect();
    fn cell(rng: &mut impl Rng) -> Option<String> {
        match rng.random_range(0..4) {
            0 => None,
            v => Some(["a", "b", "c"][v - 1].to_string()),
        }
    }
    fn table(rng: &mut impl Rng, headers: &[String]) -> Table {
        let rows = rng.random_range(0..=4);
        Table::new(
            headers.to_vec(),
            (0..rows)
                .map(|_| (0..headers.len()).map(|_| cell(rng)).collect())
                .collect(),
        )
    }
    let gold = table(rng, &headers);
    let mut shuffled = headers.clone();
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, rng.random_range(0..=i));
    }
    let pred = table(rng, &shuffled);
    (pred, gold)
}

/// Commit order of repeatedly completing every undecoded cell in the
/// current context and committing the best, ties going to the earlier cell
/// in row-major order.
pub fn stepwise_argmax_order(
    scorer: &MockScorer,
    rows: usize,
    cols: usize,
    inner: InnerCriterion,
    outer: OuterCriterion,
) -> Vec<Cell> {
    let mut state = DecodingState::new(rows, cols);
    let mut order = Vec::new();
    for _ in 0..rows * cols {
        let mut best: Option<(Cell, f64, Vec<usize>)> = None;
        for cell in row_major(rows, cols) {
            if state.is_decoded(cell) {
                continue;
            }
            let (toks, lps) = complete(scorer, &state, cell);
            let s = aggregate(inner, &lps);
            let wins = match &best {
                None => true,
                Some((_, b, _)) => match outer {
                    OuterCriterion::MaxFirst => s > *b,
                    OuterCriterion::MinFirst => s < *b,
                },
            };
            if wins {
                best = Some((cell, s, toks));
            }
        }
        let (cell, _, toks) = best.unwrap();
        state.commit(cell, toks, false).unwrap();
        order.push(cell);
    }
    order
}
