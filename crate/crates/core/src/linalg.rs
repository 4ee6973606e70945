//! Sparse symmetric solves and small dense helpers.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("singular system of size {0}")]
    Singular(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Triplet list for a square matrix, summed on conversion.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    pub n: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Triplets {
    pub fn new(n: usize) -> Self {
        Triplets { n, ..Default::default() }
    }

    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        self.rows.push(r);
        self.cols.push(c);
        self.vals.push(v);
    }

    pub fn to_csc(&self) -> CscMatrix<f64> {
        let coo = CooMatrix::try_from_triplets(self.n, self.n, self.rows.clone(), self.cols.clone(), self.vals.clone())
            .expect("triplet indices in range");
        CscMatrix::from(&coo)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for ((&r, &c), &v) in self.rows.iter().zip(&self.cols).zip(&self.vals) {
            m[(r, c)] += v;
        }
        m
    }

    /// `y = A x` without forming the matrix.
    pub fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for ((&r, &c), &v) in self.rows.iter().zip(&self.cols).zip(&self.vals) {
            y[r] += v * x[c];
        }
        y
    }
}

/// Reverse Cuthill–McKee ordering of the graph of a symmetric pattern.
/// Returns `perm` with `perm[new] = old`.
pub fn rcm_ordering(n: usize, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (&r, &c) in rows.iter().zip(cols) {
        if r != c {
            adj[r].push(c);
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        // start each component at a minimum-degree node
        let start = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (adj[i].len(), i))
            .expect("unvisited node exists");
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (adj[w].len(), w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Solves `A x = b` for a symmetric matrix given as triplets.
///
/// Uses an RCM-ordered sparse Cholesky factorization and falls back to dense
/// LU when the matrix is not positive definite.
pub fn solve_symmetric(a: &Triplets, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    if b.len() != a.n {
        return Err(LinalgError::Dimension(format!("rhs {} vs matrix {}", b.len(), a.n)));
    }
    let n = a.n;
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let perm = rcm_ordering(n, &a.rows, &a.cols);
    let mut inv = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let permuted = Triplets {
        n,
        rows: a.rows.iter().map(|&r| inv[r]).collect(),
        cols: a.cols.iter().map(|&c| inv[c]).collect(),
        vals: a.vals.clone(),
    };
    let csc = permuted.to_csc();
    if let Ok(chol) = CscCholesky::factor(&csc) {
        let pb = DMatrix::from_fn(n, 1, |i, _| b[perm[i]]);
        let px = chol.solve(&pb);
        let mut x = DVector::zeros(n);
        for i in 0..n {
            x[perm[i]] = px[(i, 0)];
        }
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    a.to_dense().lu().solve(b).ok_or(LinalgError::Singular(n))
}

/// Symmetrized copy `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> Triplets {
        let mut t = Triplets::new(n);
        for i in 0..n {
            t.push(i, i, 2.0);
            if i + 1 < n {
                t.push(i, i + 1, -1.0);
                t.push(i + 1, i, -1.0);
            }
        }
        t
    }

    #[test]
    fn rcm_is_a_permutation() {
        let t = laplacian_1d(7);
        let mut p = rcm_ordering(7, &t.rows, &t.cols);
        p.sort_unstable();
        assert_eq!(p, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn sparse_solve_matches_dense() {
        let t = laplacian_1d(20);
        let b = DVector::from_fn(20, |i, _| (i as f64).sin());
        let x = solve_symmetric(&t, &b).unwrap();
        assert!((t.mul(&x) - &b).norm() < 1e-12);
    }

    #[test]
    fn indefinite_falls_back_to_lu() {
        let mut t = Triplets::new(2);
        t.push(0, 1, 1.0);
        t.push(1, 0, 1.0);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = solve_symmetric(&t, &b).unwrap();
        assert!((x - DVector::from_vec(vec![2.0, 1.0])).norm() < 1e-14);
    }

    #[test]
    fn singular_is_reported() {
        let t = Triplets::new(2);
        assert!(solve_symmetric(&t, &DVector::from_vec(vec![1.0, 0.0])).is_err());
    }
}
