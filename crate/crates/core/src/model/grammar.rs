//! Which tokens may follow inside a cell slot.

use crate::corpus::{TokenId, EOC, NULL};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Allowed {
    /// First token: NULL or any regular token.
    Start,
    /// After content: a regular token or end-of-cell.
    Continue,
    /// After NULL or at the length limit.
    EndOnly,
}

impl Allowed {
    /// Rule for the query at slot index `t` whose own token is `current`
    /// (the begin marker at `t = 0`), with slot length `max_cell_len`.
    pub fn at(t: usize, current: TokenId, max_cell_len: usize) -> Self {
        if t == 0 {
            Allowed::Start
        } else if current == NULL || t >= max_cell_len - 1 {
            Allowed::EndOnly
        } else {
            Allowed::Continue
        }
    }

    pub fn permits(self, id: TokenId, n_reserved: usize) -> bool {
        match self {
            Allowed::Start => id == NULL || id >= n_reserved,
            Allowed::Continue => id == EOC || id >= n_reserved,
            Allowed::EndOnly => id == EOC,
        }
    }

    /// `true` marks a forbidden class.
    pub fn forbidden_mask(self, vocab_size: usize, n_reserved: usize) -> Vec<bool> {
        (0..vocab_size).map(|id| !self.permits(id, n_reserved)).collect()
    }

    /// The rule ignoring the length limit; used to detect truncation.
    pub fn unbounded(t: usize, current: TokenId) -> Self {
        Self::at(t, current, usize::MAX)
    }
}
