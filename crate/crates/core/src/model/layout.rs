//! Serialized decoder template: column-header blocks, then per row a row
//! marker followed by one fixed-width slot per cell.
//!
//! A slot holds `[BOS, s_1, .., s_{l-1}]` where `s` is the cell's token
//! sequence (content + end-of-cell, or NULL + end-of-cell); the query at slot
//! index `t` predicts `s_{t+1}`. Unused slot positions are PAD.

use crate::corpus::{tokenize, TokenId, Vocab, BOS, EOC, NULL, PAD};
use crate::error::{Error, Result};

/// Coordinates of one decoder position. Row 0 is the header row, column 0
/// holds row markers; `idx` is the position within its header block or slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
    pub idx: usize,
}

impl Coord {
    pub fn new(row: usize, col: usize, idx: usize) -> Self {
        Coord { row, col, idx }
    }

    pub fn is_cell(&self) -> bool {
        self.row > 0 && self.col > 0
    }
}

/// A 1-based (row, column) cell address.
pub type Cell = (usize, usize);

/// Token sequence a cell decodes to: content then end-of-cell; NULL cells
/// are `[NULL, EOC]`.
pub fn cell_sequence(vocab: &Vocab, column: &str, cell: Option<&str>, max_cell_len: usize) -> Result<Vec<TokenId>> {
    let mut seq = match cell {
        None => vec![NULL],
        Some(text) => {
            let ids: Vec<TokenId> = tokenize(text).iter().map(|t| vocab.id(t)).collect();
            if ids.is_empty() {
                return Err(Error::Layout("empty cell; use NULL instead".into()));
            }
            if ids.len() > max_cell_len - 1 {
                return Err(Error::CellTooLong {
                    column: column.to_string(),
                    len: ids.len(),
                    limit: max_cell_len - 1,
                });
            }
            ids
        }
    };
    seq.push(EOC);
    Ok(seq)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub tokens: Vec<TokenId>,
    pub coords: Vec<Coord>,
    /// Per position: 0 for context visible to every other cell (headers,
    /// markers, filled cells); `g > 0` for cells visible only to cells of a
    /// larger group.
    pub groups: Vec<u32>,
    n_rows: usize,
    n_cols: usize,
    slot_len: usize,
    header_len: usize,
}

impl Layout {
    /// An all-open template (group 1) with empty slots.
    pub fn template(vocab: &Vocab, headers: &[String], n_rows: usize, max_cell_len: usize) -> Result<Self> {
        if n_rows > vocab.max_rows() {
            return Err(Error::Layout(format!(
                "{n_rows} rows exceed the limit of {}",
                vocab.max_rows()
            )));
        }
        let mut tokens = Vec::new();
        let mut coords = Vec::new();
        for (c, h) in headers.iter().enumerate() {
            for (i, t) in tokenize(h).iter().enumerate() {
                tokens.push(vocab.id(t));
                coords.push(Coord::new(0, c + 1, i));
            }
        }
        let header_len = tokens.len();
        let mut groups = vec![0; header_len];
        for r in 1..=n_rows {
            tokens.push(vocab.row_marker(r));
            coords.push(Coord::new(r, 0, 0));
            groups.push(0);
            for c in 1..=headers.len() {
                for i in 0..max_cell_len {
                    tokens.push(if i == 0 { BOS } else { PAD });
                    coords.push(Coord::new(r, c, i));
                    groups.push(1);
                }
            }
        }
        Ok(Layout {
            tokens,
            coords,
            groups,
            n_rows,
            n_cols: headers.len(),
            slot_len: max_cell_len,
            header_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn slot_len(&self) -> usize {
        self.slot_len
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (1..=self.n_rows).flat_map(move |r| (1..=self.n_cols).map(move |c| (r, c)))
    }

    /// Position of the begin marker of cell `(r, c)`.
    pub fn slot_start(&self, (r, c): Cell) -> usize {
        assert!(r >= 1 && r <= self.n_rows && c >= 1 && c <= self.n_cols);
        self.header_len + (r - 1) * (1 + self.n_cols * self.slot_len) + 1 + (c - 1) * self.slot_len
    }

    /// Writes the first `l` tokens of `[BOS] + seq` into the slot.
    pub fn set_cell(&mut self, cell: Cell, seq: &[TokenId], group: u32) {
        let start = self.slot_start(cell);
        for i in 0..self.slot_len {
            self.tokens[start + i] = match i {
                0 => BOS,
                _ => seq.get(i - 1).copied().unwrap_or(PAD),
            };
            self.groups[start + i] = group;
        }
    }

    pub fn set_group(&mut self, cell: Cell, group: u32) {
        let start = self.slot_start(cell);
        self.groups[start..start + self.slot_len].fill(group);
    }

    pub fn group(&self, cell: Cell) -> u32 {
        self.groups[self.slot_start(cell)]
    }

    pub fn slot_tokens(&self, cell: Cell) -> &[TokenId] {
        let s = self.slot_start(cell);
        &self.tokens[s..s + self.slot_len]
    }

    /// Row-major attention visibility (`true` = query `i` may attend key `j`).
    pub fn visibility(&self) -> Vec<bool> {
        visibility(&self.tokens, &self.coords, &self.groups)
    }
}

/// The visibility contract over a coordinate map:
/// - PAD keys are hidden;
/// - header and row-marker keys are visible to everyone;
/// - within a cell, a token sees its own earlier tokens and itself;
/// - across cells, a key in group `g` is visible iff `g == 0` or the query's
///   group exceeds `g` (headers and markers count as group 0).
pub fn visibility(tokens: &[TokenId], coords: &[Coord], groups: &[u32]) -> Vec<bool> {
    let n = tokens.len();
    let mut vis = vec![false; n * n];
    for i in 0..n {
        let (ci, gi) = (coords[i], if coords[i].is_cell() { groups[i] } else { 0 });
        for j in 0..n {
            let cj = coords[j];
            vis[i * n + j] = if tokens[j] == PAD {
                false
            } else if !cj.is_cell() {
                true
            } else if (ci.row, ci.col) == (cj.row, cj.col) {
                cj.idx <= ci.idx
            } else {
                groups[j] == 0 || gi > groups[j]
            };
        }
    }
    vis
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;

    fn vocab() -> Vocab {
        Vocab::from_words(4, ["a", "b", "x", "y"].map(String::from))
    }

    #[test]
    fn slot_positions() {
        let v = vocab();
        let l = Layout::template(&v, &["a".into(), "b".into()], 2, 3).unwrap();
        // 2 header tokens, then per row 1 marker + 2 slots of 3.
        assert_eq!(l.len(), 2 + 2 * 7);
        assert_eq!(l.slot_start((1, 1)), 3);
        assert_eq!(l.slot_start((2, 2)), 2 + 7 + 1 + 3);
        assert_eq!(l.coords[l.slot_start((2, 2)) + 1], Coord::new(2, 2, 1));
        assert_eq!(l.tokens[l.slot_start((2, 1)) - 1], v.row_marker(2));
    }

    #[test]
    fn open_cells_do_not_see_each_other() {
        let v = vocab();
        let mut l = Layout::template(&v, &["a".into(), "b".into()], 1, 3).unwrap();
        l.set_cell((1, 1), &[v.id("x"), EOC], 1);
        l.set_cell((1, 2), &[v.id("y"), EOC], 1);
        let vis = l.visibility();
        let n = l.len();
        let (p, q) = (l.slot_start((1, 1)), l.slot_start((1, 2)));
        assert!(!vis[(q + 1) * n + p]);
        assert!(!vis[(p + 1) * n + q + 1]);
        assert!(vis[(p + 1) * n + p] && vis[(p + 1) * n + p + 1] && !vis[p * n + p + 1]);
        assert!(vis[(q + 2) * n]);
        // filled cells become visible to open ones
        l.set_group((1, 1), 0);
        assert!(l.visibility()[(q + 1) * n + p + 1]);
    }

    #[test]
    fn cell_sequences() {
        let v = vocab();
        assert_eq!(cell_sequence(&v, "a", None, 2).unwrap(), vec![NULL, EOC]);
        assert_eq!(cell_sequence(&v, "a", Some("x"), 2).unwrap(), vec![v.id("x"), EOC]);
        assert!(matches!(
            cell_sequence(&v, "a", Some("x y"), 2),
            Err(Error::CellTooLong { len: 2, limit: 1, ref column }) if column == "a"
        ));
    }
}
