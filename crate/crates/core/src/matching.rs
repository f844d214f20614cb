//! Minimum-cost bipartite assignment (Hungarian method with potentials).
//!
//! Rows are student predictions, columns are (pseudo-)ground-truth instances.
//! Among all optimal assignments the lexicographically smallest one is
//! returned, comparing the column chosen for row 0, then row 1, and so on;
//! rows left unassigned in a tall matrix sort after every real column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl MatchResult {
    pub fn empty() -> Self {
        Self {
            pairs: Vec::new(),
            total_cost: 0.0,
        }
    }

    pub fn column_for(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|(r, _)| *r == row).map(|&(_, c)| c)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cost matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("cost matrix rows must have equal length"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Square solve over the sub-matrix given by `rows` x `cols` (equal lengths).
/// Returns, for each position in `rows`, the position in `cols` it takes.
fn solve_square(cost: &dyn Fn(usize, usize) -> f64, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    debug_assert_eq!(n, cols.len());
    if n == 0 {
        return Vec::new();
    }
    // 1-indexed potentials formulation; p[j] is the row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

fn assignment_cost(cost: &dyn Fn(usize, usize) -> f64, rows: &[usize], cols: &[usize], a: &[usize]) -> f64 {
    rows.iter().zip(a).map(|(&r, &k)| cost(r, cols[k])).sum()
}

/// Optimal injective assignment of `min(rows, cols)` pairs.
pub fn hungarian(costs: &CostMatrix) -> MatchResult {
    let n = costs.rows.max(costs.cols);
    if costs.rows == 0 || costs.cols == 0 {
        return MatchResult::empty();
    }
    // Pad to square with zero-cost dummy rows/columns.
    let padded = |r: usize, c: usize| -> f64 {
        if r < costs.rows && c < costs.cols {
            costs.get(r, c)
        } else {
            0.0
        }
    };
    let all: Vec<usize> = (0..n).collect();
    let mut current = solve_square(&padded, &all, &all);
    let optimum = assignment_cost(&padded, &all, &all, &current);
    let scale: f64 = costs.data.iter().map(|v| v.abs()).sum::<f64>() + 1.0;
    let tol = 1e-12 * scale;

    // Walk rows in order, moving each to the smallest column that still admits
    // an optimal completion.
    let mut fixed_cost = 0.0;
    let mut free_cols: Vec<usize> = all.clone();
    for row in 0..n {
        let rest_rows: Vec<usize> = (row + 1..n).collect();
        let chosen = current[row];
        for &col in free_cols.iter().filter(|&&c| c < chosen) {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != col).collect();
            let sub = solve_square(&padded, &rest_rows, &rest_cols);
            let total = fixed_cost + padded(row, col) + assignment_cost(&padded, &rest_rows, &rest_cols, &sub);
            if total <= optimum + tol {
                current[row] = col;
                for (k, &r) in rest_rows.iter().enumerate() {
                    current[r] = rest_cols[sub[k]];
                }
                break;
            }
        }
        fixed_cost += padded(row, current[row]);
        free_cols.retain(|&c| c != current[row]);
    }

    let pairs: Vec<(usize, usize)> = (0..costs.rows)
        .filter(|&r| current[r] < costs.cols)
        .map(|r| (r, current[r]))
        .collect();
    let total_cost = pairs.iter().map(|&(r, c)| costs.get(r, c)).sum();
    MatchResult { pairs, total_cost }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> CostMatrix {
        CostMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn small_examples() {
        let r = hungarian(&m(&[vec![1.0, 2.0], vec![2.0, 1.0]]));
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total_cost, 2.0);

        let r = hungarian(&m(&[vec![0.0, 0.0], vec![0.0, 0.0]]));
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn tie_break_prefers_low_columns_for_early_rows() {
        let r = hungarian(&m(&[vec![1.0, 1.0, 5.0], vec![1.0, 1.0, 5.0], vec![5.0, 5.0, 0.0]]));
        assert_eq!(r.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let r = hungarian(&m(&[vec![3.0, 3.0, 3.0], vec![3.0, 3.0, 3.0], vec![3.0, 3.0, 3.0]]));
        assert_eq!(r.pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn rectangular() {
        let r = hungarian(&m(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]]));
        assert_eq!(r.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(r.total_cost, 3.0);

        let r = hungarian(&m(&[vec![5.0], vec![1.0], vec![3.0]]));
        assert_eq!(r.pairs, vec![(1, 0)]);
        assert_eq!(r.total_cost, 1.0);

        assert!(hungarian(&CostMatrix::new(0, 3, vec![]).unwrap()).is_empty());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(CostMatrix::new(1, 2, vec![0.0]).is_err());
    }
}
