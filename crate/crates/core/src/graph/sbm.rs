//! Stochastic block model generator with class-separable Gaussian features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Graph, Masks};
use crate::error::{FguError, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmConfig {
    /// `(size, class id)` per block.
    pub blocks: Vec<(usize, usize)>,
    pub p_in: f64,
    pub p_out: f64,
    pub d_in: usize,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of the per-class mean vectors.
    #[serde(default = "one")]
    pub feature_signal: f64,
    /// Standard deviation of per-node noise around the class mean.
    #[serde(default = "one")]
    pub feature_noise: f64,
    /// Train and validation fractions; the remainder is test.
    #[serde(default = "default_split")]
    pub split: (f64, f64),
}

fn one() -> f64 {
    1.0
}

fn default_split() -> (f64, f64) {
    (0.2, 0.4)
}

impl SbmConfig {
    pub fn new(blocks: Vec<(usize, usize)>, p_in: f64, p_out: f64, d_in: usize, seed: u64) -> Self {
        Self { blocks, p_in, p_out, d_in, seed, feature_signal: 1.0, feature_noise: 1.0, split: default_split() }
    }
}

/// Generates an undirected SBM graph.
///
/// Pairs inside a block connect with `p_in`, across blocks with `p_out`.
/// Node features are `mean[class] + noise`, so blocks sharing a class share a
/// feature distribution. Masks are a seeded random split. Bitwise
/// deterministic for a fixed config.
pub fn sbm_generate<T: Scalar>(cfg: &SbmConfig) -> Result<Graph<T>> {
    for (name, p) in [("p_in", cfg.p_in), ("p_out", cfg.p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(FguError::InvalidArgument(format!("{name} = {p} outside [0,1]")));
        }
    }
    if cfg.blocks.is_empty() || cfg.blocks.iter().any(|&(s, _)| s == 0) {
        return Err(FguError::InvalidArgument("SBM blocks must be non-empty with size >= 1".into()));
    }
    let (train_frac, val_frac) = cfg.split;
    if train_frac < 0.0 || val_frac < 0.0 || train_frac + val_frac > 1.0 {
        return Err(FguError::InvalidArgument(format!("invalid split {:?}", cfg.split)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let num_classes = cfg.blocks.iter().map(|&(_, c)| c).max().unwrap() + 1;
    let block_of: Vec<usize> = cfg.blocks.iter().enumerate().flat_map(|(b, &(s, _))| std::iter::repeat_n(b, s)).collect();
    let labels: Vec<usize> = block_of.iter().map(|&b| cfg.blocks[b].1).collect();
    let n = labels.len();

    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..cfg.d_in).map(|_| cfg.feature_signal * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut features = Matrix::zeros(n, cfg.d_in);
    for (i, &c) in labels.iter().enumerate() {
        for (j, x) in features.row_mut(i).iter_mut().enumerate() {
            *x = T::lit(means[c][j] + cfg.feature_noise * rng.sample::<f64, _>(StandardNormal));
        }
    }

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block_of[u] == block_of[v] { cfg.p_in } else { cfg.p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (train_frac * n as f64).round() as usize;
    let n_val = ((val_frac * n as f64).round() as usize).min(n - n_train);
    let masks = Masks {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    Graph::new(features, labels, num_classes, edges, masks)
}
