use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocab, BOS, EOC, NULL};
use crate::error::{Error, Result};
use crate::model::{rows_from_count, Allowed, Cell, Model};
use crate::table::Table;

use super::config::{Constraint, DecodingConfig, Stopping};
use super::scorer::{CellScorer, ModelScorer, Request};
use super::state::{apply_constraint, outer_criterion, semi_templated_stop, DecodingState};

/// A fully generated cell with its aggregated score.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub cell: Cell,
    /// Content followed by end-of-cell.
    pub tokens: Vec<TokenId>,
    /// Grammar-masked log-probability of each chosen token.
    pub logprobs: Vec<f64>,
    /// Whether the grammar left a choice at each token; forced tokens have
    /// probability one and are left out of the score.
    pub free: Vec<bool>,
    pub score: f64,
    /// End-of-cell was forced at the length limit.
    pub truncated: bool,
}

/// Masked log-softmax over the classes `rule` permits; returns the argmax
/// (lowest id on ties) and its log-probability.
fn choose(logits: &[f64], rule: Allowed, n_reserved: usize) -> Result<(TokenId, f64)> {
    let allowed = || {
        logits
            .iter()
            .enumerate()
            .filter(move |(id, x)| rule.permits(*id, n_reserved) && !x.is_nan())
    };
    let (best, max) = allowed()
        .fold(None, |acc: Option<(usize, f64)>, (id, &x)| match acc {
            Some((_, m)) if m >= x => acc,
            _ => Some((id, x)),
        })
        .ok_or_else(|| Error::Decoding("no permitted token".into()))?;
    if !max.is_finite() {
        return Err(Error::Decoding("no finite logit among permitted tokens".into()));
    }
    let lse = max + allowed().map(|(_, x)| (x - max).exp()).sum::<f64>().ln();
    Ok((best, max - lse))
}

/// Greedily generates every eligible cell in parallel token steps. The
/// candidates only depend on the committed context, not on each other.
pub fn inner_loop<S: CellScorer + ?Sized>(
    scorer: &S,
    state: &DecodingState,
    eligible: &[Cell],
    cfg: &DecodingConfig,
) -> Result<Vec<Candidate>> {
    if eligible.is_empty() {
        return Err(Error::Decoding("no eligible undecoded cell".into()));
    }
    if let Some(c) = eligible.iter().find(|&&c| state.is_decoded(c)) {
        return Err(Error::Decoding(format!("cell {c:?} is already decoded")));
    }
    let l = scorer.max_cell_len();
    let n_reserved = scorer.n_reserved();
    let mut cands: Vec<Candidate> = eligible
        .iter()
        .map(|&cell| Candidate {
            cell,
            tokens: Vec::new(),
            logprobs: Vec::new(),
            free: Vec::new(),
            score: 0.0,
            truncated: false,
        })
        .collect();
    for t in 0..l {
        let active: Vec<usize> = (0..cands.len())
            .filter(|&i| cands[i].tokens.last() != Some(&EOC))
            .collect();
        if active.is_empty() {
            break;
        }
        let requests: Vec<Request> = active
            .iter()
            .map(|&i| (cands[i].cell, cands[i].tokens.clone()))
            .collect();
        let rows = scorer.logits(state, &requests)?;
        if rows.len() != requests.len() || rows.iter().any(|r| r.len() != scorer.vocab_size()) {
            return Err(Error::Decoding("scorer returned malformed logits".into()));
        }
        for (&i, row) in active.iter().zip(&rows) {
            let cand = &mut cands[i];
            let current = cand.tokens.last().copied().unwrap_or(BOS);
            let rule = Allowed::at(t, current, l);
            let (tok, lp) = choose(row, rule, n_reserved)?;
            let free = Allowed::unbounded(t, current);
            if free != rule && choose(row, free, n_reserved)?.0 != EOC {
                cand.truncated = true;
            }
            cand.tokens.push(tok);
            cand.logprobs.push(lp);
            cand.free.push(rule != Allowed::EndOnly);
        }
    }
    for c in &mut cands {
        let mut free: Vec<f64> = c
            .logprobs
            .iter()
            .zip(&c.free)
            .filter(|(_, &f)| f)
            .map(|(&x, _)| x)
            .collect();
        if free.is_empty() {
            free.clone_from(&c.logprobs);
        }
        c.score = cfg
            .inner_criterion
            .aggregate(&free)
            .ok_or_else(|| Error::Decoding("empty candidate".into()))?;
    }
    Ok(cands)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub row: usize,
    pub col: usize,
    pub score: f64,
    pub tokens: Vec<String>,
}

/// Result of the outer loop in token form.
#[derive(Clone, Debug)]
pub struct SearchOutput {
    pub state: DecodingState,
    pub outer_iterations: usize,
    /// (iteration, committed candidate) in commit order.
    pub commits: Vec<(usize, Candidate)>,
}

/// Commits until every cell of `rows` is decoded.
fn fill<S: CellScorer + ?Sized>(
    scorer: &S,
    state: &mut DecodingState,
    cfg: &DecodingConfig,
    only_row: Option<usize>,
    out_iters: &mut usize,
    commits: &mut Vec<(usize, Candidate)>,
) -> Result<()> {
    loop {
        let eligible: Vec<Cell> = apply_constraint(state, cfg.constraint)
            .into_iter()
            .filter(|&(r, _)| only_row.is_none_or(|o| o == r))
            .collect();
        let remaining = state.undecoded().any(|(r, _)| only_row.is_none_or(|o| o == r));
        if !remaining {
            return Ok(());
        }
        if eligible.is_empty() {
            return Err(Error::Decoding("constraint left no eligible cell".into()));
        }
        let cands = inner_loop(scorer, state, &eligible, cfg)?;
        let scores: Vec<(Cell, f64)> = cands.iter().map(|c| (c.cell, c.score)).collect();
        let mut order = outer_criterion(&scores, cfg);
        if state.active.is_none() {
            match cfg.constraint {
                Constraint::ColumnByColumn => {
                    let col = order[0].1;
                    state.active = Some(col);
                    order.retain(|&(_, c)| c == col);
                }
                Constraint::RowByRow => {
                    let row = order[0].0;
                    state.active = Some(row);
                    order.retain(|&(r, _)| r == row);
                }
                _ => {}
            }
        }
        *out_iters += 1;
        for cell in order.into_iter().take(cfg.k) {
            let cand = cands.iter().find(|c| c.cell == cell).expect("scored").clone();
            state.commit(cell, cand.tokens.clone(), cand.truncated)?;
            commits.push((*out_iters, cand));
        }
        state.advance_active(cfg.constraint);
    }
}

/// Fills an `n_rows × n_cols` template.
pub fn decode_fixed<S: CellScorer + ?Sized>(
    scorer: &S,
    n_rows: usize,
    n_cols: usize,
    cfg: &DecodingConfig,
) -> Result<SearchOutput> {
    cfg.validate()?;
    let mut state = DecodingState::new(n_rows, n_cols);
    let mut out = SearchOutput {
        state: state.clone(),
        outer_iterations: 0,
        commits: Vec::new(),
    };
    if n_rows > 0 && n_cols > 0 {
        fill(
            scorer,
            &mut state,
            cfg,
            None,
            &mut out.outer_iterations,
            &mut out.commits,
        )?;
    }
    out.state = state;
    Ok(out)
}

/// Adds rows one at a time until a completed row is all NULL (dropped) or
/// `max_rows` rows are kept.
pub fn decode_semi_templated<S: CellScorer + ?Sized>(
    scorer: &S,
    n_cols: usize,
    max_rows: usize,
    cfg: &DecodingConfig,
) -> Result<SearchOutput> {
    cfg.validate()?;
    let mut state = DecodingState::new(0, n_cols);
    let mut iters = 0;
    let mut commits = Vec::new();
    if n_cols > 0 {
        while state.n_rows < max_rows {
            state = grow(&state);
            let row = state.n_rows;
            fill(scorer, &mut state, cfg, Some(row), &mut iters, &mut commits)?;
            if semi_templated_stop(&state) {
                state = shrink(&state);
                break;
            }
        }
    }
    Ok(SearchOutput {
        state,
        outer_iterations: iters,
        commits,
    })
}

fn grow(s: &DecodingState) -> DecodingState {
    let mut n = DecodingState::new(s.n_rows + 1, s.n_cols);
    for (i, cell) in s.all_cells().enumerate() {
        n.cells[i] = s.cells[i].clone();
        n.decoded[i] = s.decoded[i];
        n.truncated[i] = s.truncated[i];
        debug_assert_eq!(n.index(cell), i);
    }
    n.commit_order = s.commit_order.clone();
    n.active = s.active;
    n
}

fn shrink(s: &DecodingState) -> DecodingState {
    let mut n = DecodingState::new(s.n_rows - 1, s.n_cols);
    let keep = n.cells.len();
    n.cells = s.cells[..keep].to_vec();
    n.decoded = s.decoded[..keep].to_vec();
    n.truncated = s.truncated[..keep].to_vec();
    n.commit_order = s.commit_order.iter().copied().filter(|&(r, _)| r <= n.n_rows).collect();
    n.active = s.active;
    n
}

/// Converts committed token sequences to a table.
pub fn state_to_table(state: &DecodingState, headers: &[String], vocab: &Vocab) -> Result<Table> {
    let mut rows = Vec::with_capacity(state.n_rows);
    for r in 1..=state.n_rows {
        let mut row = Vec::with_capacity(state.n_cols);
        for c in 1..=state.n_cols {
            let seq = state.cell((r, c));
            let Some((&EOC, content)) = seq.split_last() else {
                return Err(Error::Decoding(format!("cell ({r}, {c}) is not closed")));
            };
            if content.is_empty() || content.iter().any(|&t| t != NULL && vocab.is_structural(t)) {
                return Err(Error::Decoding(format!("cell ({r}, {c}) has invalid content")));
            }
            row.push(vocab.decode_cell(content));
        }
        rows.push(row);
    }
    Ok(Table::new(headers.to_vec(), rows))
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub table: Table,
    pub predicted_count: Option<f64>,
    pub outer_iterations: usize,
    pub truncated: Vec<Cell>,
    pub trace: Vec<TraceEntry>,
    pub state: DecodingState,
}

/// Decodes the table for `text` under the given column labels.
pub fn decode_table(
    model: &Model,
    vocab: &Vocab,
    text: &str,
    headers: &[String],
    cfg: &DecodingConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    let scorer = ModelScorer::new(model, vocab, text, headers, cfg.causal_context)?;
    let max_rows = model.config.max_rows;
    let (search, predicted) = match (cfg.stopping, cfg.max_rows_override) {
        (Stopping::PredictedCount, Some(n)) => (decode_fixed(&scorer, n.min(max_rows), headers.len(), cfg)?, None),
        (Stopping::PredictedCount, None) => {
            let y = model.predict_count(&scorer.memory)?;
            let n = rows_from_count(y, max_rows);
            (decode_fixed(&scorer, n, headers.len(), cfg)?, Some(y))
        }
        (Stopping::SemiTemplated, cap) => {
            let cap = cap.unwrap_or(max_rows).min(max_rows);
            (decode_semi_templated(&scorer, headers.len(), cap, cfg)?, None)
        }
    };
    let table = state_to_table(&search.state, headers, vocab)?;
    let truncated = search
        .state
        .all_cells()
        .filter(|&c| search.state.truncated[search.state.index(c)])
        .collect();
    let trace = search
        .commits
        .iter()
        .map(|(it, c)| TraceEntry {
            iteration: *it,
            row: c.cell.0,
            col: c.cell.1,
            score: c.score,
            tokens: c.tokens.iter().map(|&t| vocab.token(t).to_string()).collect(),
        })
        .collect();
    Ok(DecodeOutput {
        table,
        predicted_count: predicted,
        outer_iterations: search.outer_iterations,
        truncated,
        trace,
        state: search.state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::MockScorer;

    fn mock(seed: u64) -> MockScorer {
        MockScorer {
            seed,
            vocab_size: 12,
            n_reserved: 7,
            max_cell_len: 3,
            temperature: 2.0,
        }
    }

    #[test]
    fn one_by_one_single_iteration() {
        for k in [1, 2, 5] {
            let cfg = DecodingConfig {
                k,
                ..Default::default()
            };
            let out = decode_fixed(&mock(1), 1, 1, &cfg).unwrap();
            assert_eq!(out.outer_iterations, 1);
            assert!(out.state.is_complete());
        }
    }

    #[test]
    fn iterations_are_ceil_c_over_k() {
        for k in 1..8 {
            let cfg = DecodingConfig {
                k,
                ..Default::default()
            };
            let out = decode_fixed(&mock(k as u64), 3, 2, &cfg).unwrap();
            assert_eq!(out.outer_iterations, 6_usize.div_ceil(k));
        }
    }

    #[test]
    fn k_at_least_c_equals_parallel_candidates() {
        let cfg = DecodingConfig {
            k: 4,
            ..Default::default()
        };
        let s = mock(3);
        let out = decode_fixed(&s, 2, 2, &cfg).unwrap();
        let empty = DecodingState::new(2, 2);
        let all: Vec<Cell> = empty.all_cells().collect();
        let cands = inner_loop(&s, &empty, &all, &cfg).unwrap();
        for c in cands {
            assert_eq!(out.state.cell(c.cell), c.tokens.as_slice());
        }
    }

    #[test]
    fn inner_loop_is_pure() {
        let cfg = DecodingConfig::default();
        let s = mock(5);
        let st = DecodingState::new(2, 3);
        let cells: Vec<Cell> = st.all_cells().collect();
        assert_eq!(
            inner_loop(&s, &st, &cells, &cfg).unwrap(),
            inner_loop(&s, &st, &cells, &cfg).unwrap()
        );
    }

    #[test]
    fn inner_loop_without_eligible_cells_fails() {
        let cfg = DecodingConfig::default();
        assert!(inner_loop(&mock(0), &DecodingState::new(1, 1), &[], &cfg).is_err());
    }

    #[test]
    fn choose_respects_grammar() {
        let logits = vec![9.0, 9.0, 1.0, 0.5, 9.0, 9.0, 9.0, 2.0, 3.0];
        let (tok, lp) = choose(&logits, Allowed::Start, 7).unwrap();
        assert_eq!(tok, 8);
        let z = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        assert!((lp - (3.0 - z)).abs() < 1e-12);
        assert_eq!(choose(&logits, Allowed::EndOnly, 7).unwrap(), (EOC, 0.0));
    }
}
