//! Column permutations and minimum-cost assignment.

use ndarray::Array2;

use crate::error::{Error, Result};

/// A permutation of column indices. `perm[i]` is the source column that maps
/// to destination column `i`, so `apply_to_columns` yields
/// `out.column(i) = input.column(perm[i])`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation(pub Vec<usize>);

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0usize; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Permutation(inv)
    }

    pub fn apply_to_columns<T: Clone>(&self, m: &Array2<T>) -> Array2<T> {
        assert_eq!(m.ncols(), self.0.len(), "permutation length mismatch");
        Array2::from_shape_fn((m.nrows(), m.ncols()), |(r, c)| m[[r, self.0[c]]].clone())
    }
}

/// Solves the square minimum-cost assignment problem in O(n^3) using the
/// potential-based Hungarian method. Returns `assign` with `assign[row] = col`.
pub fn hungarian_min_cost(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if n == 0 || cost.ncols() != n {
        return Err(Error::Contract(
            "hungarian_min_cost requires a non-empty square matrix".into(),
        ));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("assignment costs must be finite".into()));
    }

    // 1-based potentials; way[j] tracks the augmenting path.
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
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

    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    Ok(assign)
}
