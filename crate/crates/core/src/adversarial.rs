//! Adversarial graph synthesis: a small graph on which the model before and
//! after unlearning disagree as much as possible.
//!
//! The relaxed adjacency is `σ(A_var)` with a masked diagonal, symmetrized.
//! Features stay in an `eps` box around their random start. After the ascent
//! the `K` upper-triangle entries that moved furthest from the start are
//! hard-flipped and the result is thresholded at 0.5.

use std::fs;
use std::path::Path;

use rand::distr::{Bernoulli, Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, FguError, Result};
use crate::gnn::loss::{kl_logits, soft_cross_entropy_logits};
use crate::gnn::{backward_pass, forward, forward_pass, Adam, GraphInput, ModelParams, OutputGrads, Propagation};
use crate::graph::{save_graph, Edge, FeatureStorage, Graph, Masks};
use crate::linalg::{argmax, Matrix};
use crate::scalar::Scalar;

/// Probability of each initial edge.
pub const INIT_EDGE_PROB: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    /// `KL(softmax(teacher) ‖ softmax(student))`
    #[default]
    Kl,
    /// Cross-entropy with the teacher's softmax as target.
    CrossEntropy,
}

/// Matrix compared against `A_init` when choosing edges to flip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipScore {
    /// `|A_sym − A_init|`
    #[default]
    Relaxed,
    /// `|A_var − A_init|` on raw logits.
    Logits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvConfig {
    pub nodes: usize,
    pub lambda: f64,
    pub eps: f64,
    pub flips: usize,
    pub max_iters: usize,
    /// Minimum per-iteration gain of the objective that resets the plateau counter.
    pub tol: f64,
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    pub divergence: Divergence,
    pub flip_score: FlipScore,
    /// Treat the original model's output as a constant during ascent.
    pub detach_target: bool,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            nodes: 64,
            lambda: 0.1,
            eps: 0.1,
            flips: 5,
            max_iters: 200,
            tol: 1e-4,
            patience: 10,
            lr: 0.01,
            seed: 0,
            divergence: Divergence::Kl,
            flip_score: FlipScore::Relaxed,
            detach_target: true,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        let pairs = self.nodes * self.nodes.saturating_sub(1) / 2;
        if self.nodes < 2 {
            return Err(FguError::InvalidArgument(format!("adversarial graph needs at least 2 nodes, got {}", self.nodes)));
        }
        if !(self.lambda >= 0.0) || !(self.eps > 0.0) || !(self.lr > 0.0) {
            return Err(FguError::InvalidArgument(format!(
                "lambda={} eps={} lr={} out of range",
                self.lambda, self.eps, self.lr
            )));
        }
        if self.flips == 0 || self.flips > pairs {
            return Err(FguError::InvalidArgument(format!("flip budget {} not in 1..={pairs}", self.flips)));
        }
        Ok(())
    }
}

/// Starting point and optimization variables.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvVariables<T> {
    pub x_init: Matrix<T>,
    pub a_init: Matrix<T>,
    pub x_var: Matrix<T>,
    pub a_var: Matrix<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvLosses {
    pub l_diff: f64,
    pub l_reg: f64,
    pub l_adv: f64,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Random features in `[0,1)` and a symmetric Bernoulli adjacency.
pub fn init_adv<T: Scalar>(config: &AdvConfig, d_in: usize) -> Result<AdvVariables<T>> {
    config.validate()?;
    let n = config.nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Uniform::new(0.0f64, 1.0).expect("valid range");
    let x_init = Matrix::from_fn(n, d_in, |_, _| T::lit(unit.sample(&mut rng)));
    let coin = Bernoulli::new(INIT_EDGE_PROB).expect("valid probability");
    let mut a_init = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if coin.sample(&mut rng) {
                a_init.set(i, j, T::one());
                a_init.set(j, i, T::one());
            }
        }
    }
    let a_var = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            T::zero()
        } else {
            T::lit(logit(a_init.get(i, j).as_f64().clamp(0.05, 0.95)))
        }
    });
    Ok(AdvVariables { x_var: x_init.clone(), x_init, a_init, a_var })
}

/// `(σ(A_var) + σ(A_var)ᵀ)/2` with a zero diagonal, plus `σ` itself.
fn relaxed<T: Scalar>(a_var: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
    let n = a_var.rows();
    let tilde = Matrix::from_fn(n, n, |i, j| if i == j { T::zero() } else { sigmoid(a_var.get(i, j)) });
    let half = T::lit(0.5);
    let sym = Matrix::from_fn(n, n, |i, j| (tilde.get(i, j) + tilde.get(j, i)) * half);
    (tilde, sym)
}

/// Relaxed symmetric adjacency of the current variables.
pub fn relaxed_adjacency<T: Scalar>(vars: &AdvVariables<T>) -> Matrix<T> {
    relaxed(&vars.a_var).1
}

fn l1_distance<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> T {
    a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| (x - y).abs()).sum()
}

/// Objective at `vars`; with `grads` also `∂L_adv/∂A_var` and `∂L_adv/∂X_var`.
pub fn objective<T: Scalar>(
    original: &ModelParams<T>,
    unlearned: &ModelParams<T>,
    vars: &AdvVariables<T>,
    config: &AdvConfig,
    grads: bool,
) -> Result<(AdvLosses, Option<(Matrix<T>, Matrix<T>)>)> {
    original.check_layout(unlearned)?;
    let (tilde, sym) = relaxed(&vars.a_var);
    let prop = Propagation::dense(&sym)?;
    let input = GraphInput::new(&vars.x_var, &prop)?;
    let pass_o = forward_pass(original, &input, None)?;
    let pass_u = forward_pass(unlearned, &input, None)?;
    let (l_diff, g_o, g_u) = match config.divergence {
        Divergence::Kl => kl_logits(&pass_o.logits, &pass_u.logits)?,
        Divergence::CrossEntropy => soft_cross_entropy_logits(&pass_o.logits, &pass_u.logits)?,
    };
    let l_reg = l1_distance(&sym, &vars.a_init);
    let lambda = T::lit(config.lambda);
    let l_adv = l_diff - lambda * l_reg;
    let losses = AdvLosses { l_diff: l_diff.as_f64(), l_reg: l_reg.as_f64(), l_adv: l_adv.as_f64() };
    check_finite(losses.l_adv, || "adversarial objective".into())?;
    if !grads {
        return Ok((losses, None));
    }

    let gu = backward_pass(unlearned, &input, &pass_u, OutputGrads { logits: Some(&g_u), embedding: None }, true)?;
    let mut d_x = gu.features.expect("input grads requested");
    let mut d_sym = gu.adjacency.expect("dense input");
    if !config.detach_target {
        let go = backward_pass(original, &input, &pass_o, OutputGrads { logits: Some(&g_o), embedding: None }, true)?;
        d_x.add_assign(&go.features.expect("input grads requested"))?;
        d_sym.add_assign(&go.adjacency.expect("dense input"))?;
    }
    let n = sym.rows();
    for i in 0..n {
        for j in 0..n {
            let diff = sym.get(i, j) - vars.a_init.get(i, j);
            let sign = if diff > T::zero() {
                T::one()
            } else if diff < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            *d_sym.get_mut(i, j) -= lambda * sign;
        }
    }
    let half = T::lit(0.5);
    let d_var = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            T::zero()
        } else {
            let s = tilde.get(i, j);
            (d_sym.get(i, j) + d_sym.get(j, i)) * half * s * (T::one() - s)
        }
    });
    Ok((losses, Some((d_var, d_x))))
}

/// Pulls `x_var` back into the `eps` box around `x_init`.
fn clip_features<T: Scalar>(vars: &mut AdvVariables<T>, eps: f64) {
    let eps = T::lit(eps);
    let shrink = T::one() - T::epsilon();
    for (x, &x0) in vars.x_var.as_mut_slice().iter_mut().zip(vars.x_init.as_slice()) {
        let mut d = (*x - x0).max(-eps).min(eps);
        // `x0 + d` can round past the box edge.
        while (x0 + d - x0).abs() > eps {
            d *= shrink;
        }
        *x = x0 + d;
    }
}

/// One Adam ascent step on `L_adv`; returns the losses before the step.
pub fn adv_step<T: Scalar>(
    original: &ModelParams<T>,
    unlearned: &ModelParams<T>,
    vars: &mut AdvVariables<T>,
    adam: &mut Adam<T>,
    config: &AdvConfig,
) -> Result<AdvLosses> {
    let (losses, g) = objective(original, unlearned, vars, config, true)?;
    let (d_var, d_x) = g.expect("gradients requested");
    let neg_a = d_var.scaled(-T::one());
    let neg_x = d_x.scaled(-T::one());
    adam.step(&mut [&mut vars.a_var, &mut vars.x_var], &[&neg_a, &neg_x])?;
    clip_features(vars, config.eps);
    Ok(losses)
}

/// Output of a generation run.
#[derive(Clone, Debug)]
pub struct AdversarialGraph<T> {
    /// Final features, binarized edges, labels from the original model's argmax.
    pub graph: Graph<T>,
    pub x_init: Matrix<T>,
    pub a_init: Matrix<T>,
    pub a_final: Matrix<T>,
    /// Hard-flipped upper-triangle pairs, in selection order.
    pub flipped: Vec<Edge>,
    pub initial: AdvLosses,
    pub final_losses: AdvLosses,
    pub iterations: usize,
    pub trace: Vec<AdvLosses>,
}

/// Provenance record written next to the adversarial graph file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: AdvConfig,
    pub iterations: usize,
    pub initial: AdvLosses,
    #[serde(rename = "final")]
    pub final_losses: AdvLosses,
    pub flipped: Vec<Edge>,
    pub num_edges: usize,
    pub init_edges: Vec<Edge>,
    pub x_init: Vec<Vec<f64>>,
}

/// Upper-triangle pairs ranked by score, highest first, ties by lowest `(i,j)`.
fn top_pairs<T: Scalar>(score: &Matrix<T>, k: usize) -> Vec<Edge> {
    let n = score.rows();
    let mut pairs: Vec<(f64, Edge)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((score.get(i, j).as_f64(), (i, j)));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    pairs.into_iter().take(k).map(|(_, e)| e).collect()
}

/// Flips the top entries, keeps the relaxed values elsewhere, and returns
/// `(A_final, flipped pairs, edges above 0.5)`.
pub fn post_process<T: Scalar>(vars: &AdvVariables<T>, config: &AdvConfig) -> (Matrix<T>, Vec<Edge>, Vec<Edge>) {
    let sym = relaxed_adjacency(vars);
    let reference = match config.flip_score {
        FlipScore::Relaxed => &sym,
        FlipScore::Logits => &vars.a_var,
    };
    let score = reference.zip_map(&vars.a_init, |a, b| (a - b).abs()).expect("same shape");
    let flipped = top_pairs(&score, config.flips);
    let mut a_final = sym;
    for i in 0..a_final.rows() {
        a_final.set(i, i, T::zero());
    }
    for &(i, j) in &flipped {
        let v = T::one() - vars.a_init.get(i, j);
        a_final.set(i, j, v);
        a_final.set(j, i, v);
    }
    let half = T::lit(0.5);
    let n = a_final.rows();
    let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| a_final.get(i, j) > half).collect();
    (a_final, flipped, edges)
}

/// Runs the ascent to convergence and post-processes the result.
pub fn generate<T: Scalar>(
    original: &ModelParams<T>,
    unlearned: &ModelParams<T>,
    config: &AdvConfig,
) -> Result<AdversarialGraph<T>> {
    original.check_layout(unlearned)?;
    let mut vars = init_adv::<T>(config, original.d_in())?;
    let initial = objective(original, unlearned, &vars, config, false)?.0;
    let mut adam = Adam::new(config.lr);
    let mut trace = Vec::new();
    let mut stall = 0;
    let mut iterations = 0;
    for it in 0..config.max_iters {
        let losses = adv_step(original, unlearned, &mut vars, &mut adam, config)
            .map_err(|e| match e {
                FguError::NonFinite { value, context } => FguError::NonFinite { value, context: format!("{context}, iteration {it}") },
                other => other,
            })?;
        if let Some(prev) = trace.last().map(|l: &AdvLosses| l.l_adv) {
            if losses.l_adv - prev < config.tol {
                stall += 1;
            } else {
                stall = 0;
            }
        }
        trace.push(losses);
        iterations = it + 1;
        if stall >= config.patience {
            break;
        }
    }
    clip_features(&mut vars, config.eps);
    let final_losses = objective(original, unlearned, &vars, config, false)?.0;
    let (a_final, flipped, edges) = post_process(&vars, config);

    let n = config.nodes;
    let feats = vars.x_var.clone();
    let labels = {
        let prop = Propagation::dense(&a_final)?;
        let logits = forward(original, &GraphInput::new(&feats, &prop)?)?;
        (0..n).map(|i| argmax(logits.row(i))).collect()
    };
    let graph = Graph::new(feats, labels, original.num_classes(), edges, Masks::default())?;
    Ok(AdversarialGraph {
        graph,
        x_init: vars.x_init,
        a_init: vars.a_init,
        a_final,
        flipped,
        initial,
        final_losses,
        iterations,
        trace,
    })
}

impl<T: Scalar> AdversarialGraph<T> {
    pub fn provenance(&self, config: &AdvConfig) -> Provenance {
        let n = self.a_init.rows();
        let init_edges = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.a_init.get(i, j) > T::lit(0.5))
            .collect();
        Provenance {
            config: config.clone(),
            iterations: self.iterations,
            initial: self.initial,
            final_losses: self.final_losses,
            flipped: self.flipped.clone(),
            num_edges: self.graph.edges().len(),
            init_edges,
            x_init: (0..self.x_init.rows()).map(|i| self.x_init.row(i).iter().map(|x| x.as_f64()).collect()).collect(),
        }
    }

    /// Writes `<dir>/<stem>.json` (graph file) and `<dir>/<stem>.provenance.json`.
    pub fn save(&self, config: &AdvConfig, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| FguError::io(dir, e))?;
        save_graph(&self.graph, dir.join(format!("{stem}.json")), FeatureStorage::Inline)?;
        let path = dir.join(format!("{stem}.provenance.json"));
        let text = serde_json::to_string_pretty(&self.provenance(config)).map_err(|e| FguError::json(&path, e))?;
        fs::write(&path, text).map_err(|e| FguError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::Backbone;

    #[test]
    fn config_bounds() {
        assert!(AdvConfig::default().validate().is_ok());
        assert!(AdvConfig { nodes: 1, ..Default::default() }.validate().is_err());
        assert!(AdvConfig { nodes: 3, flips: 4, ..Default::default() }.validate().is_err());
        assert!(AdvConfig { eps: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn two_node_init() {
        for seed in 0..20 {
            let cfg = AdvConfig { nodes: 2, flips: 1, seed, ..Default::default() };
            let v = init_adv::<f64>(&cfg, 3).unwrap();
            assert_eq!(v.a_init.get(0, 0), 0.0);
            assert_eq!(v.a_init.get(1, 1), 0.0);
            assert_eq!(v.a_init.get(0, 1), v.a_init.get(1, 0));
        }
    }

    #[test]
    fn ties_go_to_lowest_pair() {
        let s = Matrix::<f64>::filled(4, 4, 1.0);
        assert_eq!(top_pairs(&s, 3), vec![(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn identical_models_do_not_move() {
        let p = ModelParams::<f64>::init(Backbone::Gcn, 3, 4, 2, 5).unwrap();
        let cfg = AdvConfig { nodes: 6, lambda: 0.0, ..Default::default() };
        let mut vars = init_adv::<f64>(&cfg, 3).unwrap();
        let before = vars.clone();
        let mut adam = Adam::new(cfg.lr);
        let l = adv_step(&p, &p, &mut vars, &mut adam, &cfg).unwrap();
        assert!(l.l_diff.abs() < 1e-15);
        assert_eq!(vars, before);
    }
}
