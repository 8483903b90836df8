use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Cell;

/// A cell ordering `sigma` and a cut: cells `sigma[..cut-1]` are filled
/// context, the rest are open prediction targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationPlan {
    pub n_rows: usize,
    pub n_cols: usize,
    pub sigma: Vec<Cell>,
    /// 1-based, in `1..=C`.
    pub cut: usize,
}

impl PermutationPlan {
    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn filled(&self) -> &[Cell] {
        &self.sigma[..self.cut - 1]
    }

    pub fn open(&self) -> &[Cell] {
        &self.sigma[self.cut - 1..]
    }

    /// Position of each cell in `sigma`, row-major indexed.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.n_cells()];
        for (k, &(r, c)) in self.sigma.iter().enumerate() {
            inv[(r - 1) * self.n_cols + (c - 1)] = k;
        }
        inv
    }

    /// Row-major order with the given cut.
    pub fn row_major(n_rows: usize, n_cols: usize, cut: usize) -> Self {
        let sigma = (1..=n_rows).flat_map(|r| (1..=n_cols).map(move |c| (r, c))).collect();
        PermutationPlan {
            n_rows,
            n_cols,
            sigma,
            cut,
        }
    }

    /// The plan whose filled set is `filled` (in that order), followed by the
    /// remaining cells in row-major order.
    pub fn from_filled(n_rows: usize, n_cols: usize, filled: &[Cell]) -> Result<Self> {
        let mut seen = vec![false; n_rows * n_cols];
        for &(r, c) in filled {
            if r == 0 || r > n_rows || c == 0 || c > n_cols || seen[(r - 1) * n_cols + c - 1] {
                return Err(Error::Layout(format!("invalid filled cell ({r}, {c})")));
            }
            seen[(r - 1) * n_cols + c - 1] = true;
        }
        if filled.len() >= n_rows * n_cols {
            return Err(Error::Layout("no open cell left".into()));
        }
        let mut sigma = filled.to_vec();
        sigma.extend(
            (1..=n_rows)
                .flat_map(|r| (1..=n_cols).map(move |c| (r, c)))
                .filter(|&(r, c)| !seen[(r - 1) * n_cols + c - 1]),
        );
        Ok(PermutationPlan {
            n_rows,
            n_cols,
            sigma,
            cut: filled.len() + 1,
        })
    }

    pub fn is_valid(&self) -> bool {
        let c = self.n_cells();
        if self.sigma.len() != c || self.cut == 0 || self.cut > c {
            return false;
        }
        let mut seen = vec![false; c];
        self.sigma.iter().all(|&(r, col)| {
            r >= 1 && r <= self.n_rows && col >= 1 && col <= self.n_cols && {
                let i = (r - 1) * self.n_cols + col - 1;
                !std::mem::replace(&mut seen[i], true)
            }
        })
    }
}

/// Uniform ordering (Fisher–Yates) and uniform cut in `1..=C`.
pub fn sample_permutation<R: Rng + ?Sized>(n_rows: usize, n_cols: usize, rng: &mut R) -> PermutationPlan {
    assert!(n_rows >= 1 && n_cols >= 1, "table must have at least one cell");
    let mut plan = PermutationPlan::row_major(n_rows, n_cols, 1);
    plan.sigma.shuffle(rng);
    plan.cut = rng.random_range(1..=plan.n_cells());
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_by_one() {
        let p = sample_permutation(1, 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.sigma, vec![(1, 1)]);
        assert_eq!(p.cut, 1);
        assert!(p.filled().is_empty());
    }

    #[test]
    fn two_by_one_orderings_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let first = (0..n)
            .filter(|_| sample_permutation(2, 1, &mut rng).sigma[0] == (1, 1))
            .count();
        let f = first as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    #[test]
    fn inverse_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = sample_permutation(3, 4, &mut rng);
        let inv = p.inverse();
        for (k, &(r, c)) in p.sigma.iter().enumerate() {
            assert_eq!(inv[(r - 1) * 4 + c - 1], k);
        }
        assert!(p.is_valid());
    }

    #[test]
    fn from_filled_keeps_order() {
        let p = PermutationPlan::from_filled(2, 2, &[(2, 2), (1, 1)]).unwrap();
        assert_eq!(p.sigma, vec![(2, 2), (1, 1), (1, 2), (2, 1)]);
        assert_eq!(p.cut, 3);
        assert_eq!(p.open(), &[(1, 2), (2, 1)]);
        assert!(PermutationPlan::from_filled(1, 1, &[(1, 1)]).is_err());
    }
}
