//! The normalized propagation operator `Â = D̃^{-1/2}(A + I)D̃^{-1/2}`.
//!
//! `D̃` is the degree of `A + I`, so isolated nodes have degree one and the
//! operator is always defined.

use crate::error::{FguError, Result};
use crate::graph::Graph;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Symmetric sparse `Â` in CSR form, self-loop included.
#[derive(Clone, Debug)]
pub struct SparseNorm<T> {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
}

/// `Â` built from a real-valued dense adjacency; keeps what the adjacency
/// gradient needs.
#[derive(Clone, Debug)]
pub struct DenseNorm<T> {
    /// `A + I`
    shifted: Matrix<T>,
    /// `d̃^{-1/2}` per node
    inv_sqrt_deg: Vec<T>,
    norm: Matrix<T>,
}

#[derive(Clone, Debug)]
pub enum Propagation<T> {
    Sparse(SparseNorm<T>),
    Dense(DenseNorm<T>),
}

impl<T: Scalar> Propagation<T> {
    pub fn from_graph(graph: &Graph<T>) -> Self {
        let n = graph.num_nodes();
        let idx = graph.neighbor_index();
        let inv: Vec<T> = (0..n).map(|i| T::from_count(idx.degree(i) + 1).sqrt().recip()).collect();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(2 * graph.edges().len() + n);
        let mut vals = Vec::with_capacity(cols.capacity());
        offsets.push(0);
        for i in 0..n {
            let nb = idx.neighbors(i);
            let split = nb.partition_point(|&j| j < i);
            for &j in nb[..split].iter().chain(std::iter::once(&i)).chain(&nb[split..]) {
                cols.push(j);
                vals.push(inv[i] * inv[j]);
            }
            offsets.push(cols.len());
        }
        Propagation::Sparse(SparseNorm { offsets, cols, vals })
    }

    /// From a dense adjacency `A` without self-loops (entries need not be 0/1).
    pub fn dense(adjacency: &Matrix<T>) -> Result<Self> {
        let (n, m) = adjacency.shape();
        if n != m {
            return Err(FguError::DimensionMismatch(format!("adjacency is {n}x{m}")));
        }
        let mut shifted = adjacency.clone();
        for i in 0..n {
            *shifted.get_mut(i, i) += T::one();
        }
        let mut inv_sqrt_deg = Vec::with_capacity(n);
        for i in 0..n {
            let d: T = shifted.row(i).iter().copied().sum();
            if d <= T::zero() {
                return Err(FguError::InvalidArgument(format!("node {i} has non-positive degree {d}")));
            }
            inv_sqrt_deg.push(d.sqrt().recip());
        }
        let norm = Matrix::from_fn(n, n, |i, j| inv_sqrt_deg[i] * shifted.get(i, j) * inv_sqrt_deg[j]);
        Ok(Propagation::Dense(DenseNorm { shifted, inv_sqrt_deg, norm }))
    }

    pub fn num_nodes(&self) -> usize {
        match self {
            Propagation::Sparse(s) => s.offsets.len() - 1,
            Propagation::Dense(d) => d.norm.rows(),
        }
    }

    /// `Â · M`
    pub fn apply(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            Propagation::Sparse(s) => {
                let n = s.offsets.len() - 1;
                if m.rows() != n {
                    return Err(FguError::DimensionMismatch(format!("propagate {n} nodes over {} rows", m.rows())));
                }
                let mut out = Matrix::zeros(n, m.cols());
                for i in 0..n {
                    let row = out.row_mut(i);
                    for p in s.offsets[i]..s.offsets[i + 1] {
                        let w = s.vals[p];
                        for (o, &x) in row.iter_mut().zip(m.row(s.cols[p])) {
                            *o += w * x;
                        }
                    }
                }
                Ok(out)
            }
            Propagation::Dense(d) => d.norm.matmul(m),
        }
    }

    /// `Âᵀ · M`
    pub fn apply_t(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            // Sparse `Â` is symmetric.
            Propagation::Sparse(_) => self.apply(m),
            Propagation::Dense(d) => d.norm.t_matmul(m),
        }
    }

    /// Dense `Â`, mostly for tests and diagnostics.
    pub fn to_dense(&self) -> Matrix<T> {
        match self {
            Propagation::Sparse(s) => {
                let n = s.offsets.len() - 1;
                let mut out = Matrix::zeros(n, n);
                for i in 0..n {
                    for p in s.offsets[i]..s.offsets[i + 1] {
                        out.set(i, s.cols[p], s.vals[p]);
                    }
                }
                out
            }
            Propagation::Dense(d) => d.norm.clone(),
        }
    }
}

impl<T: Scalar> DenseNorm<T> {
    /// Pulls `∂L/∂Â` back to `∂L/∂A`, treating every entry of `A` as free.
    pub fn adjacency_grad(&self, d_norm: &Matrix<T>) -> Matrix<T> {
        let n = self.norm.rows();
        let s = &self.inv_sqrt_deg;
        let b = &self.shifted;
        let half = T::lit(0.5);
        // ∂L/∂d̃_m, from both the row and the column factor of Â.
        let mut d_deg = vec![T::zero(); n];
        for i in 0..n {
            for j in 0..n {
                let g = d_norm.get(i, j) * b.get(i, j);
                if g == T::zero() {
                    continue;
                }
                // ∂(s_i b_ij s_j)/∂d̃_i = -½ d̃_i^{-3/2} b_ij s_j = -½ s_i³ b_ij s_j
                d_deg[i] -= half * g * s[i] * s[i] * s[i] * s[j];
                d_deg[j] -= half * g * s[i] * s[j] * s[j] * s[j];
            }
        }
        Matrix::from_fn(n, n, |i, j| d_norm.get(i, j) * s[i] * s[j] + d_deg[i])
    }
}
