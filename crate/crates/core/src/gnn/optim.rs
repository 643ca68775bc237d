//! SGD and Adam (β = (0.9, 0.999), ε = 1e-8).

use super::ModelParams;
use crate::error::{FguError, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// `params − lr · grads`
pub fn sgd_step<T: Scalar>(params: &ModelParams<T>, grads: &ModelParams<T>, lr: f64) -> Result<ModelParams<T>> {
    let mut out = params.clone();
    out.axpy(-T::lit(lr), grads)?;
    Ok(out)
}

/// First and second moment estimates, one pair per optimized matrix.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: i32,
}

impl<T: Scalar> AdamState<T> {
    pub fn steps(&self) -> i32 {
        self.t
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: AdamState { m: Vec::new(), v: Vec::new(), t: 0 } }
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    /// One descent step on `vars` given `grads`, in matching order.
    pub fn step(&mut self, vars: &mut [&mut Matrix<T>], grads: &[&Matrix<T>]) -> Result<()> {
        if vars.len() != grads.len() {
            return Err(FguError::LayoutMismatch(format!("{} variables, {} gradients", vars.len(), grads.len())));
        }
        let st = &mut self.state;
        if st.t == 0 {
            st.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            st.v = st.m.clone();
        }
        if st.m.len() != grads.len() {
            return Err(FguError::LayoutMismatch("optimizer state tracks a different variable count".into()));
        }
        st.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let c1 = one - b1.powi(st.t);
        let c2 = one - b2.powi(st.t);
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (k, (var, g)) in vars.iter_mut().zip(grads).enumerate() {
            if var.shape() != g.shape() || st.m[k].shape() != g.shape() {
                return Err(FguError::LayoutMismatch(format!("variable {k}: {:?} vs gradient {:?}", var.shape(), g.shape())));
            }
            let m = st.m[k].as_mut_slice();
            let v = st.v[k].as_mut_slice();
            for (((x, &gi), mi), vi) in var.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step_params(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<()> {
        params.check_layout(grads)?;
        let g: Vec<&Matrix<T>> = grads.tensors().iter().map(|t| &t.value).collect();
        let mut v: Vec<&mut Matrix<T>> = params.tensors_mut().iter_mut().map(|t| &mut t.value).collect();
        self.step(&mut v, &g)
    }
}

/// Functional form of one Adam step; `opt` carries the moment state.
pub fn adam_step<T: Scalar>(params: &ModelParams<T>, grads: &ModelParams<T>, opt: &mut Adam<T>) -> Result<ModelParams<T>> {
    let mut out = params.clone();
    opt.step_params(&mut out, grads)?;
    Ok(out)
}
