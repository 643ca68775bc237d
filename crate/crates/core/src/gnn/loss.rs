//! Task losses and their gradients with respect to model outputs.

use crate::error::{FguError, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

use super::model::EmbeddingSpace;

/// Target for one class group of the prototype loss: the mean embedding of
/// `nodes` is pulled toward `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeTarget<T> {
    pub nodes: Vec<usize>,
    pub target: Vec<T>,
}

/// Loss against a single model's outputs.
#[derive(Clone, Debug)]
pub enum LossSpec<'a, T> {
    /// Mean cross-entropy against hard labels over `nodes`.
    CrossEntropy { labels: &'a [usize], nodes: &'a [usize] },
    /// Mean `KL(teacher ‖ softmax(logits))` over `nodes`.
    SoftTargetKl { teacher_probs: &'a Matrix<T>, nodes: &'a [usize] },
    /// Mean squared error against target logits over `nodes × classes`.
    Mse { target: &'a Matrix<T>, nodes: &'a [usize] },
    /// `Σ_g ‖mean_{i∈g} e_i − t_g‖² / d` over embedding rows.
    Prototype { groups: &'a [PrototypeTarget<T>], space: EmbeddingSpace },
    Scaled { factor: T, inner: &'a LossSpec<'a, T> },
}

/// Row-wise softmax.
pub fn softmax<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(row)`
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

fn check_nodes(nodes: &[usize], rows: usize, what: &str) -> Result<()> {
    if nodes.is_empty() {
        return Err(FguError::Empty(format!("{what} node set")));
    }
    if let Some(&n) = nodes.iter().find(|&&n| n >= rows) {
        return Err(FguError::DimensionMismatch(format!("{what} node {n} out of {rows}")));
    }
    Ok(())
}

/// Per-node cross-entropy `-log softmax(logits_i)[label_i]`.
pub fn node_cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize], node: usize) -> T {
    let row = logits.row(node);
    log_sum_exp(row) - row[labels[node]]
}

pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize], nodes: &[usize]) -> Result<(T, Matrix<T>)> {
    check_nodes(nodes, logits.rows(), "cross-entropy")?;
    let inv = T::from_count(nodes.len()).recip();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = T::zero();
    for &i in nodes {
        let row = logits.row(i);
        total += log_sum_exp(row) - row[labels[i]];
        let g = grad.row_mut(i);
        g.copy_from_slice(row);
        softmax_in_place(g);
        g[labels[i]] -= T::one();
        g.iter_mut().for_each(|x| *x *= inv);
    }
    Ok((total * inv, grad))
}

pub fn soft_target_kl<T: Scalar>(logits: &Matrix<T>, teacher: &Matrix<T>, nodes: &[usize]) -> Result<(T, Matrix<T>)> {
    check_nodes(nodes, logits.rows(), "KL")?;
    if teacher.shape() != logits.shape() {
        return Err(FguError::DimensionMismatch(format!("teacher {:?} vs logits {:?}", teacher.shape(), logits.shape())));
    }
    let inv = T::from_count(nodes.len()).recip();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = T::zero();
    for &i in nodes {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        let p = teacher.row(i);
        let g = grad.row_mut(i);
        g.copy_from_slice(row);
        softmax_in_place(g);
        // Logs of the same softmax the teacher went through, so equal
        // distributions give exactly zero; log-space only on underflow.
        for ((&pc, &qc), &z) in p.iter().zip(g.iter()).zip(row) {
            if pc > T::zero() {
                let log_q = if qc > T::zero() { qc.ln() } else { z - lse };
                total += pc * (pc.ln() - log_q);
            }
        }
        for (gc, &pc) in g.iter_mut().zip(p) {
            *gc = (*gc - pc) * inv;
        }
    }
    Ok((total * inv, grad))
}

pub fn mse<T: Scalar>(logits: &Matrix<T>, target: &Matrix<T>, nodes: &[usize]) -> Result<(T, Matrix<T>)> {
    check_nodes(nodes, logits.rows(), "MSE")?;
    if target.shape() != logits.shape() {
        return Err(FguError::DimensionMismatch(format!("target {:?} vs logits {:?}", target.shape(), logits.shape())));
    }
    let inv = T::from_count(nodes.len() * logits.cols()).recip();
    let two = T::lit(2.0);
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = T::zero();
    for &i in nodes {
        for ((g, &s), &t) in grad.row_mut(i).iter_mut().zip(logits.row(i)).zip(target.row(i)) {
            let d = s - t;
            total += d * d;
            *g = two * d * inv;
        }
    }
    Ok((total * inv, grad))
}

/// Mean embedding of `nodes`.
pub fn mean_rows<T: Scalar>(m: &Matrix<T>, nodes: &[usize]) -> Vec<T> {
    let mut acc = vec![T::zero(); m.cols()];
    for &i in nodes {
        for (a, &x) in acc.iter_mut().zip(m.row(i)) {
            *a += x;
        }
    }
    let inv = T::from_count(nodes.len()).recip();
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

pub fn prototype_mse<T: Scalar>(emb: &Matrix<T>, groups: &[PrototypeTarget<T>]) -> Result<(T, Matrix<T>)> {
    if groups.is_empty() {
        return Err(FguError::Empty("prototype loss groups".into()));
    }
    let d = emb.cols();
    let inv_d = T::from_count(d).recip();
    let two = T::lit(2.0);
    let mut grad = Matrix::zeros(emb.rows(), d);
    let mut total = T::zero();
    for g in groups {
        check_nodes(&g.nodes, emb.rows(), "prototype")?;
        if g.target.len() != d {
            return Err(FguError::DimensionMismatch(format!("prototype target dim {} vs {d}", g.target.len())));
        }
        let p = mean_rows(emb, &g.nodes);
        let coef = two * inv_d / T::from_count(g.nodes.len());
        let diff: Vec<T> = p.iter().zip(&g.target).map(|(&a, &b)| a - b).collect();
        total += diff.iter().map(|&x| x * x).sum::<T>() * inv_d;
        for &i in &g.nodes {
            for (gv, &dv) in grad.row_mut(i).iter_mut().zip(&diff) {
                *gv += coef * dv;
            }
        }
    }
    Ok((total, grad))
}

/// `mean_i KL(softmax(p_i) ‖ softmax(q_i))` over all rows, with gradients
/// for both arguments.
pub fn kl_logits<T: Scalar>(p_logits: &Matrix<T>, q_logits: &Matrix<T>) -> Result<(T, Matrix<T>, Matrix<T>)> {
    if p_logits.shape() != q_logits.shape() || p_logits.rows() == 0 {
        return Err(FguError::DimensionMismatch(format!("{:?} vs {:?}", p_logits.shape(), q_logits.shape())));
    }
    let (n, c) = p_logits.shape();
    let inv = T::from_count(n).recip();
    let mut gp = Matrix::zeros(n, c);
    let mut gq = Matrix::zeros(n, c);
    let mut total = T::zero();
    for i in 0..n {
        let a = p_logits.row(i);
        let b = q_logits.row(i);
        let (la, lb) = (log_sum_exp(a), log_sum_exp(b));
        let mut kl = T::zero();
        let logp: Vec<T> = a.iter().map(|&x| x - la).collect();
        let logq: Vec<T> = b.iter().map(|&x| x - lb).collect();
        for k in 0..c {
            kl += logp[k].exp() * (logp[k] - logq[k]);
        }
        total += kl;
        for k in 0..c {
            let p = logp[k].exp();
            let q = logq[k].exp();
            // ∂KL/∂a_k = p_k (log p_k − log q_k − KL);  ∂KL/∂b_k = q_k − p_k
            gp.set(i, k, p * (logp[k] - logq[k] - kl) * inv);
            gq.set(i, k, (q - p) * inv);
        }
    }
    Ok((total * inv, gp, gq))
}

/// `mean_i CE(softmax(p_i), softmax(q_i)) = mean_i −Σ_k p_ik log q_ik`.
pub fn soft_cross_entropy_logits<T: Scalar>(p_logits: &Matrix<T>, q_logits: &Matrix<T>) -> Result<(T, Matrix<T>, Matrix<T>)> {
    let (kl, gp_kl, gq) = kl_logits(p_logits, q_logits)?;
    // CE = KL + H(p); ∂H/∂a_k = −p_k (log p_k + H)
    let (n, c) = p_logits.shape();
    let inv = T::from_count(n).recip();
    let mut gp = gp_kl;
    let mut ent_total = T::zero();
    for i in 0..n {
        let a = p_logits.row(i);
        let la = log_sum_exp(a);
        let logp: Vec<T> = a.iter().map(|&x| x - la).collect();
        let h: T = -logp.iter().map(|&l| l.exp() * l).sum::<T>();
        ent_total += h;
        for k in 0..c {
            let p = logp[k].exp();
            *gp.get_mut(i, k) -= p * (logp[k] + h) * inv;
        }
    }
    Ok((kl + ent_total * inv, gp, gq))
}
