use std::cmp::Ordering;

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::Cell;

use super::config::{Constraint, DecodingConfig, OuterCriterion, TieBreak};

/// Committed cells of a partially decoded `n_rows × n_cols` table.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodingState {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major token sequences (content + end-of-cell); empty until committed.
    pub cells: Vec<Vec<TokenId>>,
    pub decoded: Vec<bool>,
    pub commit_order: Vec<Cell>,
    pub truncated: Vec<bool>,
    /// Active column (column-by-column) or row (row-by-row), 1-based.
    pub active: Option<usize>,
}

impl DecodingState {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        let c = n_rows * n_cols;
        DecodingState {
            n_rows,
            n_cols,
            cells: vec![Vec::new(); c],
            decoded: vec![false; c],
            commit_order: Vec::new(),
            truncated: vec![false; c],
            active: None,
        }
    }

    pub fn index(&self, (r, c): Cell) -> usize {
        (r - 1) * self.n_cols + (c - 1)
    }

    pub fn is_decoded(&self, cell: Cell) -> bool {
        self.decoded[self.index(cell)]
    }

    pub fn cell(&self, cell: Cell) -> &[TokenId] {
        &self.cells[self.index(cell)]
    }

    pub fn all_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (1..=self.n_rows).flat_map(move |r| (1..=self.n_cols).map(move |c| (r, c)))
    }

    pub fn undecoded(&self) -> impl Iterator<Item = Cell> + '_ {
        self.all_cells().filter(move |&c| !self.is_decoded(c))
    }

    pub fn is_complete(&self) -> bool {
        self.decoded.iter().all(|&d| d)
    }

    /// Commits a finished sequence; committed cells are immutable.
    pub fn commit(&mut self, cell: Cell, seq: Vec<TokenId>, truncated: bool) -> Result<()> {
        let i = self.index(cell);
        if self.decoded[i] {
            return Err(Error::Decoding(format!("cell {cell:?} is already decoded")));
        }
        self.cells[i] = seq;
        self.decoded[i] = true;
        self.truncated[i] = truncated;
        self.commit_order.push(cell);
        Ok(())
    }

    fn column_done(&self, c: usize) -> bool {
        (1..=self.n_rows).all(|r| self.is_decoded((r, c)))
    }

    fn row_done(&self, r: usize) -> bool {
        (1..=self.n_cols).all(|c| self.is_decoded((r, c)))
    }

    /// Moves the active column/row on once it is complete: the next
    /// unfinished one after it, wrapping around.
    pub fn advance_active(&mut self, constraint: Constraint) {
        let Some(a) = self.active else { return };
        let (n, done): (usize, &dyn Fn(usize) -> bool) = match constraint {
            Constraint::ColumnByColumn => (self.n_cols, &|c| self.column_done(c)),
            Constraint::RowByRow => (self.n_rows, &|r| self.row_done(r)),
            _ => return,
        };
        if !done(a) {
            return;
        }
        let next = (1..=n).map(|d| (a - 1 + d) % n + 1).find(|&x| !done(x));
        self.active = next;
    }
}

/// Cells that may be committed next under `constraint`.
pub fn apply_constraint(state: &DecodingState, constraint: Constraint) -> Vec<Cell> {
    match constraint {
        Constraint::None => state.undecoded().collect(),
        Constraint::ColumnByColumn => match state.active {
            None => state.undecoded().collect(),
            Some(c) => state.undecoded().filter(|&(_, col)| col == c).collect(),
        },
        Constraint::RowByRow => match state.active {
            None => state.undecoded().collect(),
            Some(r) => state.undecoded().filter(|&(row, _)| row == r).collect(),
        },
        Constraint::LeftRightTopBottom => state.undecoded().take(1).collect(),
        Constraint::NoDistantRows => state
            .undecoded()
            .filter(|&(r, c)| (1..r).all(|above| state.is_decoded((above, c))))
            .collect(),
    }
}

fn tie_key(cell: Cell, tie: TieBreak) -> (usize, usize) {
    match tie {
        TieBreak::RowMajor => cell,
        TieBreak::ColumnMajor => (cell.1, cell.0),
    }
}

/// Eligible cells sorted best-first by the outer criterion; ties by `tie_break`.
pub fn outer_criterion(scores: &[(Cell, f64)], cfg: &DecodingConfig) -> Vec<Cell> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| {
        let by_score = match cfg.outer_criterion {
            OuterCriterion::MaxFirst => b.1.partial_cmp(&a.1),
            OuterCriterion::MinFirst => a.1.partial_cmp(&b.1),
        }
        .unwrap_or(Ordering::Equal);
        by_score.then_with(|| tie_key(a.0, cfg.tie_break).cmp(&tie_key(b.0, cfg.tie_break)))
    });
    v.into_iter().map(|(c, _)| c).collect()
}

/// True iff the last row is entirely NULL.
pub fn semi_templated_stop(state: &DecodingState) -> bool {
    use crate::corpus::{EOC, NULL};
    state.n_rows > 0
        && (1..=state.n_cols).all(|c| {
            let cell = (state.n_rows, c);
            state.is_decoded(cell) && state.cell(cell) == [NULL, EOC]
        })
}
