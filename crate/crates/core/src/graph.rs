//! Sparse graph representation and the spectral operators every other
//! module consumes.
//!
//! The normalized adjacency acts as a low-pass graph filter (smoothing
//! connected nodes toward each other) and the normalized Laplacian as the
//! complementary high-pass filter (emphasizing differences between
//! connected nodes). Both are derived from a raw, loop-free, binary
//! adjacency by self-loop-augmented symmetric normalization.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};

/// Sparse matrix in canonical compressed-sparse-row form: within each row,
/// column indices are strictly increasing and no explicit zeros are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a CSR matrix from per-row `(col, value)` lists. Each row list
    /// must already be sorted by column with no duplicates; zeros are dropped.
    pub fn from_row_entries(
        n_rows: usize,
        n_cols: usize,
        rows: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        if rows.len() != n_rows {
            return Err(Error::DimensionMismatch("row list length".into()));
        }
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in &rows {
            let mut last: Option<usize> = None;
            for &(j, v) in row {
                if j >= n_cols {
                    return Err(Error::InvalidArgument(format!("column {j} out of range")));
                }
                if let Some(prev) = last {
                    if j <= prev {
                        return Err(Error::InvalidArgument("row entries not strictly increasing".into()));
                    }
                }
                last = Some(j);
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self { n_rows, n_cols, row_ptr, col_idx, values })
    }

    /// Binary adjacency from an edge list. Out-of-range endpoints and
    /// self-loops are rejected; duplicates (after optional symmetrization)
    /// are silently deduplicated.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], symmetrize: bool) -> Result<Self> {
        let mut set: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({u},{v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                return Err(Error::InvalidArgument(format!(
                    "self-loop on node {u}; self-connections are added by normalization"
                )));
            }
            set.insert((u, v));
            if symmetrize {
                set.insert((v, u));
            }
        }
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (u, v) in set {
            rows[u].push((v, 1.0));
        }
        Self::from_row_entries(n, n, rows)
    }

    pub fn identity(n: usize) -> Self {
        let rows = (0..n).map(|i| vec![(i, 1.0)]).collect();
        Self::from_row_entries(n, n, rows).expect("identity is canonical")
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n_cols];
        for (i, j, v) in self.iter_entries() {
            rows[j].push((i, v));
        }
        CsrMatrix::from_row_entries(self.n_cols, self.n_rows, rows).expect("transpose is canonical")
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.n_rows == self.n_cols
            && self.iter_entries().all(|(i, j, v)| (self.get(j, i) - v).abs() <= tol)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for (i, j, v) in self.iter_entries() {
            out.set(i, j, v);
        }
        out
    }

    /// Sparse-dense product `self * d`. Parallelized over output rows; each
    /// row is accumulated by exactly one worker in storage order, so the
    /// result is bitwise independent of the worker count.
    pub fn spmm(&self, d: &DenseMatrix) -> Result<DenseMatrix> {
        if self.n_cols != d.n_rows() {
            return Err(Error::DimensionMismatch(format!(
                "spmm {}x{} * {}x{}",
                self.n_rows,
                self.n_cols,
                d.n_rows(),
                d.n_cols()
            )));
        }
        let m = d.n_cols();
        let mut out = vec![0.0; self.n_rows * m];
        out.par_chunks_mut(m).enumerate().for_each(|(i, out_row)| {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let d_row = d.row(j);
                for (o, &x) in out_row.iter_mut().zip(d_row) {
                    *o += v * x;
                }
            }
        });
        DenseMatrix::new(self.n_rows, m, out)
    }
}

/// The pair of complementary spectral filters derived from one graph:
/// `adj_norm` (low-pass) and `lap_norm = I - adj_norm` (high-pass).
#[derive(Debug, Clone)]
pub struct GraphOperators {
    pub adj_norm: CsrMatrix,
    pub lap_norm: CsrMatrix,
    pub n: usize,
}

/// Normalizes a raw adjacency with self-loop augmentation:
/// scale each side by `1/sqrt(deg + 1)` after adding the identity, then
/// take the Laplacian as its complement. Isolated nodes get a diagonal
/// entry of exactly 1 in `adj_norm` (and an empty Laplacian row).
pub fn build_operators(a: &CsrMatrix) -> Result<GraphOperators> {
    let n = a.n_rows();
    if a.n_cols() != n {
        return Err(Error::InvalidArgument("adjacency must be square".into()));
    }
    if !a.is_symmetric(0.0) {
        return Err(Error::InvalidArgument("adjacency must be symmetric".into()));
    }
    for (i, j, v) in a.iter_entries() {
        if i == j {
            return Err(Error::InvalidArgument("adjacency must be loop-free".into()));
        }
        if v != 1.0 {
            return Err(Error::InvalidArgument("adjacency must be binary".into()));
        }
    }

    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg = a.row(i).0.len();
            1.0 / ((deg as f64) + 1.0).sqrt()
        })
        .collect();

    let mut adj_rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut lap_rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let (cols, _) = a.row(i);
        let mut adj_row = Vec::with_capacity(cols.len() + 1);
        let mut lap_row = Vec::with_capacity(cols.len() + 1);
        let diag = inv_sqrt[i] * inv_sqrt[i];
        let mut placed_diag = false;
        for &j in cols {
            if !placed_diag && j > i {
                adj_row.push((i, diag));
                lap_row.push((i, 1.0 - diag));
                placed_diag = true;
            }
            let v = inv_sqrt[i] * inv_sqrt[j];
            adj_row.push((j, v));
            lap_row.push((j, -v));
        }
        if !placed_diag {
            adj_row.push((i, diag));
            lap_row.push((i, 1.0 - diag));
        }
        adj_rows.push(adj_row);
        lap_rows.push(lap_row);
    }

    Ok(GraphOperators {
        adj_norm: CsrMatrix::from_row_entries(n, n, adj_rows)?,
        lap_norm: CsrMatrix::from_row_entries(n, n, lap_rows)?,
        n,
    })
}
