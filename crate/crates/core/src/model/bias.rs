//! Index maps from (query, key) position pairs into the per-head bias tables.
//!
//! Every bias term is a lookup `table[head, bucket(i, j)]`; pairs that do not
//! receive a term map to [`SKIP`].

use std::sync::Arc;

use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::layout::Coord;

pub const SKIP: u32 = u32::MAX;

/// Bidirectional log-bucketing of a sequence offset `i − j`: half the buckets
/// per direction, the first half of those exact, the rest logarithmic up to
/// `max_distance`.
pub fn relative_bucket(offset: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let base = if offset > 0 { half } else { 0 };
    let n = offset.unsigned_abs() as usize;
    let max_exact = half / 2;
    if n < max_exact {
        return base + n;
    }
    let log_ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (log_ratio * (half - max_exact) as f64) as usize;
    base + large.min(half - 1)
}

/// Sequence-relative bucket for every pair of `len` positions.
pub fn sequence_index(len: usize, cfg: &ModelConfig) -> Arc<Vec<u32>> {
    let mut idx = Vec::with_capacity(len * len);
    for i in 0..len {
        for j in 0..len {
            idx.push(relative_bucket(i as i64 - j as i64, cfg.rel_buckets, cfg.rel_max_distance) as u32);
        }
    }
    Arc::new(idx)
}

/// Table-structure indices of the decoder self-attention.
#[derive(Clone, Debug)]
pub struct TableBiasIndex {
    pub len: usize,
    /// `R(r_i − r_j)` for keys outside the header row.
    pub row: Arc<Vec<u32>>,
    /// `R₀` for header keys.
    pub row0: Arc<Vec<u32>>,
    /// `C(c_i − c_j)` for every pair.
    pub col: Arc<Vec<u32>>,
    /// `L(idx_i − idx_j)` within the same cell (or header block).
    pub local: Arc<Vec<u32>>,
}

pub fn check_coords(coords: &[Coord], cfg: &ModelConfig) -> Result<()> {
    for c in coords {
        if c.row > cfg.max_rows || c.col > cfg.max_cols {
            return Err(Error::CoordinateOutOfRange {
                row: c.row,
                col: c.col,
                max_rows: cfg.max_rows,
                max_cols: cfg.max_cols,
            });
        }
    }
    Ok(())
}

pub fn table_index(coords: &[Coord], cfg: &ModelConfig) -> Result<TableBiasIndex> {
    check_coords(coords, cfg)?;
    let n = coords.len();
    let (nr, nc, l) = (cfg.max_rows as i64, cfg.max_cols as i64, cfg.max_cell_len as i64);
    let mut row = Vec::with_capacity(n * n);
    let mut row0 = Vec::with_capacity(n * n);
    let mut col = Vec::with_capacity(n * n);
    let mut local = Vec::with_capacity(n * n);
    for qi in coords {
        for kj in coords {
            let (ri, rj) = (qi.row as i64, kj.row as i64);
            if kj.row == 0 {
                row.push(SKIP);
                row0.push(0);
            } else {
                row.push((ri - rj + nr) as u32);
                row0.push(SKIP);
            }
            col.push((qi.col as i64 - kj.col as i64 + nc) as u32);
            local.push(if (qi.row, qi.col) == (kj.row, kj.col) {
                ((qi.idx as i64 - kj.idx as i64).clamp(-l, l) + l) as u32
            } else {
                SKIP
            });
        }
    }
    Ok(TableBiasIndex {
        len: n,
        row: Arc::new(row),
        row0: Arc::new(row0),
        col: Arc::new(col),
        local: Arc::new(local),
    })
}
