//! Dense and sparse matrix kernels.
//!
//! Dense products go through `matrixmultiply`'s packed GEMM on blocks of output
//! rows; the sparse product is a CSR-times-dense kernel. Both split work by
//! output rows via [`crate::par`], so the parallel and sequential builds agree
//! bit for bit.

use crate::error::{IgtError, Result};
use crate::par;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// `a` is stored row-major as `m × k`, or as `k × m` when `trans_a` is set; the
/// same convention holds for `b`. With `accumulate` false `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    par::for_each_row_block(c, n, k * n, |row0, block| {
        let rows = block.len() / n;
        let a_off = row0 * rsa;
        // SAFETY: strides describe in-bounds views of `a`, `b` and `block` for
        // the given dimensions; the block is a disjoint mutable slice.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed
    /// and columns within a row are sorted.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, c, _) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(IgtError::Invalid(format!(
                    "triplet ({r},{c}) outside {n_rows}x{n_cols}"
                )));
            }
            counts[r + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..n_rows {
            scratch.clear();
            scratch.extend((counts[r]..counts[r + 1]).map(|p| (cols[p], vals[p])));
            scratch.sort_by_key(|&(c, _)| c);
            for &(c, v) in &scratch {
                if indices.len() > indptr[r] && *indices.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Iterates `(col, value)` over one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(p) => self.values[span.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn transpose(&self) -> Self {
        let triplets: Vec<_> = (0..self.n_rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v)))
            .collect();
        Self::from_triplets(self.n_cols, self.n_rows, &triplets).expect("in-bounds transpose")
    }

    /// Exact structural and numerical symmetry.
    pub fn is_symmetric(&self) -> bool {
        self.is_symmetric_within(0.0)
    }

    pub fn is_symmetric_within(&self, tol: f64) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        (0..self.n_rows).all(|r| {
            self.row(r).all(|(c, v)| {
                let span = self.indptr[c]..self.indptr[c + 1];
                match self.indices[span.clone()].binary_search(&r) {
                    Ok(p) => (self.values[span.start + p] - v).abs() <= tol,
                    Err(_) => v == 0.0,
                }
            })
        })
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * self.n_cols];
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                out[r * self.n_cols + c] += v;
            }
        }
        out
    }

    /// `out = self · x` where `x` is `n_cols × d` row-major.
    pub fn spmm(&self, x: &[f64], d: usize, out: &mut [f64]) -> Result<()> {
        if x.len() != self.n_cols * d || out.len() != self.n_rows * d {
            return Err(IgtError::Shape {
                op: "spmm",
                shapes: vec![
                    vec![self.n_rows, self.n_cols],
                    vec![x.len() / d.max(1), d],
                    vec![out.len() / d.max(1), d],
                ],
            });
        }
        let avg_nnz = self.nnz() / self.n_rows.max(1) + 1;
        par::for_each_row_block(out, d, avg_nnz * d, |row0, block| {
            for (i, out_row) in block.chunks_exact_mut(d).enumerate() {
                out_row.fill(0.0);
                for (c, v) in self.row(row0 + i) {
                    let x_row = &x[c * d..(c + 1) * d];
                    for (o, xv) in out_row.iter_mut().zip(x_row) {
                        *o += v * xv;
                    }
                }
            }
        });
        Ok(())
    }

    /// Multiplies a row vector from the left: `y = v · self` where `v` has
    /// `n_rows` entries.
    pub fn vecmul_left(&self, v: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_cols];
        for (r, &vr) in v.iter().enumerate() {
            for (c, a) in self.row(r) {
                y[c] += vr * a;
            }
        }
        y
    }

    /// `y = self · v` for a column vector.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| self.row(r).map(|(c, a)| a * v[c]).sum())
            .collect()
    }
}
