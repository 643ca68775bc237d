//! Dense GNN backbones with explicit reverse-mode gradients.
//!
//! Two backbones are supported:
//!
//! * GCN: `Â · ReLU(Â · X · W1) · W2`
//! * SGC: `Âᵏ · X · W`
//!
//! Gradients are available with respect to the parameters and, on request,
//! the inputs (features and, for dense propagation, the raw adjacency).

pub mod loss;
mod model;
pub mod optim;
mod propagation;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FguError, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub use loss::LossSpec;
pub use model::{
    backward, backward_pass, embedding, forward, forward_pass, train_local, EmbeddingSpace, ForwardPass,
    GradBundle, GraphInput, OutputGrads,
};
pub use optim::{adam_step, sgd_step, Adam, AdamState};
pub use propagation::{DenseNorm, Propagation, SparseNorm};

/// Default hidden width for GCN.
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Backbone {
    Gcn,
    Sgc { hops: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub value: Matrix<T>,
}

/// Named weight tensors of one backbone. No biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    backbone: Backbone,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform initialization, deterministic per seed.
    pub fn init(backbone: Backbone, d_in: usize, hidden: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || num_classes == 0 {
            return Err(FguError::InvalidArgument(format!("d_in={d_in}, classes={num_classes} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |name: &str, fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new(-a, a).expect("finite bounds");
            let data = (0..fan_in * fan_out).map(|_| T::lit(dist.sample(&mut rng))).collect();
            Tensor { name: name.to_string(), value: Matrix::from_vec(fan_in, fan_out, data).unwrap() }
        };
        let tensors = match backbone {
            Backbone::Gcn => {
                if hidden == 0 {
                    return Err(FguError::InvalidArgument("GCN hidden size must be positive".into()));
                }
                vec![glorot("W1", d_in, hidden), glorot("W2", hidden, num_classes)]
            }
            Backbone::Sgc { hops } => {
                if hops == 0 {
                    return Err(FguError::InvalidArgument("SGC needs at least one propagation hop".into()));
                }
                vec![glorot("W", d_in, num_classes)]
            }
        };
        Ok(Self { backbone, tensors })
    }

    pub fn from_tensors(backbone: Backbone, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let names: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
        let ok = match backbone {
            Backbone::Gcn => {
                names == ["W1", "W2"] && tensors[0].value.cols() == tensors[1].value.rows()
            }
            Backbone::Sgc { .. } => names == ["W"],
        };
        if !ok {
            return Err(FguError::LayoutMismatch(format!("tensors {names:?} do not fit {backbone:?}")));
        }
        Ok(Self { backbone, tensors })
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix<T>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn d_in(&self) -> usize {
        self.tensors[0].value.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.tensors.last().unwrap().value.cols()
    }

    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        self.tensors.iter().map(|t| (t.name.clone(), t.value.shape())).collect()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.backbone == other.backbone && self.layout() == other.layout()
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(FguError::LayoutMismatch(format!("{:?} vs {:?}", self.layout(), other.layout())))
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { name: t.name.clone(), value: Matrix::zeros(t.value.rows(), t.value.cols()) })
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.value.as_slice().len()).sum()
    }

    /// All entries concatenated in tensor order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.value.as_slice().iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.all_finite())
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.value.axpy(alpha, &b.value)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for t in &mut self.tensors {
            t.value.scale(alpha);
        }
    }

    /// Flattened Euclidean distance.
    pub fn l2_distance(&self, other: &Self) -> Result<T> {
        self.check_layout(other)?;
        let mut acc = T::zero();
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            for (&x, &y) in a.value.as_slice().iter().zip(b.value.as_slice()) {
                acc += (x - y) * (x - y);
            }
        }
        Ok(acc.sqrt())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            backbone: self.backbone,
            tensors: self.tensors.iter().map(|t| Tensor { name: t.name.clone(), value: t.value.cast() }).collect(),
        }
    }

    /// Bit patterns of every entry, for exact reproducibility checks.
    pub fn bit_fingerprint(&self) -> Vec<u64> {
        self.flatten().into_iter().map(|x| x.as_f64().to_bits()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = ModelParams::<f64>::init(Backbone::Gcn, 1433, 64, 7, 3).unwrap();
        let b = ModelParams::<f64>::init(Backbone::Gcn, 1433, 64, 7, 3).unwrap();
        assert_eq!(a.bit_fingerprint(), b.bit_fingerprint());
        assert_eq!(a.tensor("W1").unwrap().shape(), (1433, 64));
        assert_eq!(a.tensor("W2").unwrap().shape(), (64, 7));
        let c = ModelParams::<f64>::init(Backbone::Gcn, 1433, 64, 7, 4).unwrap();
        assert_ne!(a, c);
        let bound = (6.0f64 / (1433.0 + 64.0)).sqrt();
        assert!(a.tensor("W1").unwrap().max_abs() <= bound);
    }

    #[test]
    fn invalid_shapes() {
        assert!(ModelParams::<f64>::init(Backbone::Gcn, 4, 0, 2, 0).is_err());
        assert!(ModelParams::<f64>::init(Backbone::Sgc { hops: 0 }, 4, 0, 2, 0).is_err());
        let sgc = ModelParams::<f64>::init(Backbone::Sgc { hops: 2 }, 4, 0, 3, 0).unwrap();
        assert_eq!(sgc.layout(), vec![("W".to_string(), (4, 3))]);
    }

    #[test]
    fn distance_of_single_bump() {
        let a = ModelParams::<f64>::init(Backbone::Gcn, 3, 2, 2, 0).unwrap();
        let mut b = a.clone();
        *b.tensors_mut()[1].value.get_mut(0, 1) += 1.0;
        assert!((a.l2_distance(&b).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(a.l2_distance(&a).unwrap(), 0.0);
    }
}
