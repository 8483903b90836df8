use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::model::{cell_sequence, Allowed, Cell, Layout, Model, ModelConfig};
use crate::numerics::{Graph, Tensor, Var};
use crate::table::{DatasetRecord, Table};

use super::plan::PermutationPlan;

/// A record in token form: the source ids and a fully filled gold layout.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub id: String,
    pub source: Vec<TokenId>,
    /// True number of rows (the count-head target).
    pub n_groups: usize,
    /// Gold template with every cell filled (group 0); `None` for empty tables.
    pub gold: Option<Layout>,
    /// Row-major cell sequences (content + end-of-cell).
    pub cells: Vec<Vec<TokenId>>,
}

impl TrainingExample {
    pub fn n_rows(&self) -> usize {
        self.gold.as_ref().map_or(0, Layout::n_rows)
    }

    pub fn n_cols(&self) -> usize {
        self.gold.as_ref().map_or(0, Layout::n_cols)
    }

    fn seq(&self, (r, c): Cell) -> &[TokenId] {
        &self.cells[(r - 1) * self.n_cols() + c - 1]
    }
}

/// Appends the all-NULL sentinel row used by semi-templated decoding.
pub fn build_semi_templated_corpus_variant(gold: &Table, max_rows: usize) -> Result<Table> {
    if gold.n_rows() + 1 > max_rows {
        return Err(Error::Layout(format!(
            "sentinel row would exceed the limit of {max_rows} rows"
        )));
    }
    Ok(gold.with_null_row())
}

/// Tokenizes a record against `vocab`; with `semi_templated` the gold table
/// gets the sentinel row.
pub fn prepare_example(
    record: &DatasetRecord,
    vocab: &Vocab,
    model: &Model,
    semi_templated: bool,
) -> Result<TrainingExample> {
    let cfg = &model.config;
    let table = &record.table;
    table.validate().map_err(|msg| Error::Record {
        id: record.id.clone(),
        msg,
    })?;
    if table.n_cols() > cfg.max_cols || table.n_rows() > cfg.max_rows {
        return Err(Error::Record {
            id: record.id.clone(),
            msg: format!(
                "{}x{} table exceeds the model limit {}x{}",
                table.n_rows(),
                table.n_cols(),
                cfg.max_rows,
                cfg.max_cols
            ),
        });
    }
    let source = model.source_ids(vocab, &record.text)?;
    let layout_table = if semi_templated {
        build_semi_templated_corpus_variant(table, cfg.max_rows)?
    } else {
        table.clone()
    };
    let mut cells = Vec::new();
    for row in &layout_table.rows {
        for (c, cell) in row.iter().enumerate() {
            cells.push(cell_sequence(
                vocab,
                &layout_table.headers[c],
                cell.as_deref(),
                cfg.max_cell_len,
            )?);
        }
    }
    let gold = if layout_table.n_rows() == 0 || layout_table.n_cols() == 0 {
        None
    } else {
        let mut l = Layout::template(vocab, &layout_table.headers, layout_table.n_rows(), cfg.max_cell_len)?;
        let cols = layout_table.n_cols();
        for (i, seq) in cells.iter().enumerate() {
            l.set_cell((i / cols + 1, i % cols + 1), seq, 0);
        }
        Some(l)
    };
    Ok(TrainingExample {
        id: record.id.clone(),
        source,
        n_groups: table.n_rows(),
        gold,
        cells,
    })
}

/// A decoder layout with its teacher-forced loss positions.
#[derive(Clone, Debug)]
pub struct TrainingPass {
    pub layout: Layout,
    pub positions: Vec<usize>,
    pub targets: Vec<TokenId>,
    pub weights: Vec<f64>,
    /// `positions.len() * vocab_size`, `true` = grammar-forbidden.
    pub forbidden: Arc<Vec<bool>>,
    /// Cell owning each loss position.
    pub cells: Vec<Cell>,
}

fn add_targets(
    pass: &mut TrainingPass,
    forbidden: &mut Vec<bool>,
    example: &TrainingExample,
    cell: Cell,
    weight: f64,
    cfg: &ModelConfig,
) {
    let start = pass.layout.slot_start(cell);
    for (t, &target) in example.seq(cell).iter().enumerate() {
        let rule = Allowed::at(t, pass.layout.tokens[start + t], cfg.max_cell_len);
        pass.positions.push(start + t);
        pass.targets.push(target);
        pass.weights.push(weight);
        pass.cells.push(cell);
        forbidden.extend(rule.forbidden_mask(cfg.vocab_size, cfg.n_reserved()));
    }
}

fn gold(example: &TrainingExample) -> Result<&Layout> {
    example
        .gold
        .as_ref()
        .ok_or_else(|| Error::Layout(format!("example `{}` has no cells", example.id)))
}

/// Filled cells are context (group 0); every open cell is a target seen
/// only by itself. Each open cell's token losses are weighted by
/// `1 / |open|`, so the pass loss is the mean cell NLL over open cells.
pub fn build_training_pass(
    example: &TrainingExample,
    plan: &PermutationPlan,
    cfg: &ModelConfig,
) -> Result<TrainingPass> {
    let gold = gold(example)?;
    if (plan.n_rows, plan.n_cols) != (gold.n_rows(), gold.n_cols()) || !plan.is_valid() {
        return Err(Error::Layout("plan does not match the gold table".into()));
    }
    let mut pass = TrainingPass {
        layout: gold.clone(),
        positions: Vec::new(),
        targets: Vec::new(),
        weights: Vec::new(),
        forbidden: Arc::new(Vec::new()),
        cells: Vec::new(),
    };
    for &cell in plan.open() {
        pass.layout.set_group(cell, 1);
    }
    let w = 1.0 / plan.open().len() as f64;
    let mut forbidden = Vec::new();
    let mut open = plan.open().to_vec();
    open.sort_unstable();
    for cell in open {
        add_targets(&mut pass, &mut forbidden, example, cell, w, cfg);
    }
    pass.forbidden = Arc::new(forbidden);
    Ok(pass)
}

/// Row-major strict prefix: cell `k` sees cells `1..k`; every cell is a
/// target with weight `1 / C`.
pub fn build_fixed_causal_pass(example: &TrainingExample, cfg: &ModelConfig) -> Result<TrainingPass> {
    let gold = gold(example)?;
    let mut pass = TrainingPass {
        layout: gold.clone(),
        positions: Vec::new(),
        targets: Vec::new(),
        weights: Vec::new(),
        forbidden: Arc::new(Vec::new()),
        cells: Vec::new(),
    };
    let cells: Vec<Cell> = gold.cells().collect();
    let w = 1.0 / cells.len() as f64;
    let mut forbidden = Vec::new();
    for (k, &cell) in cells.iter().enumerate() {
        pass.layout.set_group(cell, k as u32 + 1);
        add_targets(&mut pass, &mut forbidden, example, cell, w, cfg);
    }
    pass.forbidden = Arc::new(forbidden);
    Ok(pass)
}

/// Weighted, label-smoothed, grammar-masked token NLL of a pass.
pub fn pass_loss(
    model: &Model,
    g: &mut Graph,
    memory: Var,
    pass: &TrainingPass,
    smoothing: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let hidden = model.decode(g, memory, &pass.layout, rng)?;
    let logits = model.logits(g, hidden, &pass.positions)?;
    let masked = g.masked_fill(logits, Arc::clone(&pass.forbidden), f64::NEG_INFINITY)?;
    g.cross_entropy(masked, &pass.targets, &pass.weights, smoothing)
}

/// Unsmoothed NLL of each target cell (sum over its tokens), in eval mode.
pub fn cell_nlls(model: &Model, memory: &Arc<Tensor>, pass: &TrainingPass) -> Result<Vec<(Cell, f64)>> {
    let rows = model.position_logits(memory, &pass.layout, &pass.positions)?;
    let v = model.config.vocab_size;
    let mut out: Vec<(Cell, f64)> = Vec::new();
    for (p, row) in rows.iter().enumerate() {
        let mask = &pass.forbidden[p * v..(p + 1) * v];
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &f)| !f)
            .map(|(x, _)| *x)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + row
                .iter()
                .zip(mask)
                .filter(|(_, &f)| !f)
                .map(|(x, _)| (x - max).exp())
                .sum::<f64>()
                .ln();
        let nll = lse - row[pass.targets[p]];
        match out.last_mut() {
            Some((c, total)) if *c == pass.cells[p] => *total += nll,
            _ => out.push((pass.cells[p], nll)),
        }
    }
    Ok(out)
}
