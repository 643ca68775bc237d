//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use fgu_core::gnn::loss::PrototypeTarget;
use fgu_core::gnn::{backward, forward, Backbone, EmbeddingSpace, GraphInput, LossSpec, ModelParams, Propagation};
use fgu_core::graph::{Graph, Masks};
use fgu_core::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small random instance for gradient checks.
pub struct Instance {
    pub graph: Graph<f64>,
    pub dense_adj: Matrix<f64>,
    pub params: ModelParams<f64>,
    pub teacher_probs: Matrix<f64>,
    pub target_logits: Matrix<f64>,
    pub groups_hidden: Vec<PrototypeTarget<f64>>,
    pub groups_logits: Vec<PrototypeTarget<f64>>,
}

impl Instance {
    pub fn groups(&self, space: EmbeddingSpace) -> &[PrototypeTarget<f64>] {
        match space {
            EmbeddingSpace::Hidden => &self.groups_hidden,
            EmbeddingSpace::Logits => &self.groups_logits,
        }
    }
}

pub fn random_instance(seed: u64, backbone: Backbone) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=8usize);
    let d = rng.random_range(1..=4usize);
    let h = rng.random_range(1..=4usize);
    let c = rng.random_range(2..=3usize);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < 0.4 {
                edges.push((u, v));
            }
        }
    }
    let feats = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let masks = Masks { train: (0..n).collect(), val: vec![], test: vec![] };
    let graph = Graph::new(feats, labels, c, edges, masks).unwrap();

    // Relaxed symmetric adjacency in (0.05, 0.95), zero diagonal.
    let mut dense_adj = Matrix::zeros(n, n);
    for u in 0..n {
        for v in u + 1..n {
            let w = rng.random_range(0.05..0.95);
            dense_adj.set(u, v, w);
            dense_adj.set(v, u, w);
        }
    }
    let mut params = ModelParams::init(backbone, d, h, c, seed ^ 0xabcd).unwrap();
    // Larger weights make the check more demanding than Glorot scale.
    params.scale(2.0);
    let teacher_logits = Matrix::from_fn(n, c, |_, _| rng.random_range(-2.0..2.0));
    let teacher_probs = softmax_rows(&teacher_logits);
    let target_logits = Matrix::from_fn(n, c, |_, _| rng.random_range(-1.0..1.0));

    let k = n.min(3);
    let emb_dim = match backbone {
        Backbone::Gcn => h,
        Backbone::Sgc { .. } => d,
    };
    let mut groups = |dim: usize| {
        vec![
            PrototypeTarget { nodes: (0..k).collect(), target: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect() },
            PrototypeTarget { nodes: vec![n - 1], target: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect() },
        ]
    };
    let groups_hidden = groups(emb_dim);
    let groups_logits = groups(c);
    Instance { graph, dense_adj, params, teacher_probs, target_logits, groups_hidden, groups_logits }
}

pub fn softmax_rows(m: &Matrix<f64>) -> Matrix<f64> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
        let s: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        row.iter_mut().for_each(|x| *x = (*x - mx).exp() / s);
    }
    out
}

/// Relative error with an absolute floor, as used by every gradient check.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-8 || diff <= 1e-6 * analytic.abs().max(numeric.abs())
}

pub const FD_STEP: f64 = 1e-5;

/// Central difference of `f` with respect to the entry at `idx` of `x`.
pub fn central_diff(x: &mut [f64], idx: usize, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[idx];
    x[idx] = orig + FD_STEP;
    let up = f(x);
    x[idx] = orig - FD_STEP;
    let down = f(x);
    x[idx] = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// Outcome of checking every partial of one loss on one instance.
#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub failures: Vec<String>,
}

impl GradReport {
    fn record(&mut self, what: &str, analytic: f64, numeric: f64) {
        self.checked += 1;
        if !grad_close(analytic, numeric) {
            self.failures.push(format!("{what}: analytic {analytic:e} numeric {numeric:e}"));
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum LossKind {
    CrossEntropy,
    SoftKl,
    Mse,
    Prototype(EmbeddingSpace),
}

pub const ALL_LOSSES: [LossKind; 5] = [
    LossKind::CrossEntropy,
    LossKind::SoftKl,
    LossKind::Mse,
    LossKind::Prototype(EmbeddingSpace::Hidden),
    LossKind::Prototype(EmbeddingSpace::Logits),
];

fn spec<'a>(inst: &'a Instance, kind: LossKind, nodes: &'a [usize]) -> LossSpec<'a, f64> {
    match kind {
        LossKind::CrossEntropy => LossSpec::CrossEntropy { labels: inst.graph.labels(), nodes },
        LossKind::SoftKl => LossSpec::SoftTargetKl { teacher_probs: &inst.teacher_probs, nodes },
        LossKind::Mse => LossSpec::Mse { target: &inst.target_logits, nodes },
        LossKind::Prototype(space) => LossSpec::Prototype { groups: inst.groups(space), space },
    }
}

/// Independent loss evaluation from logits/embeddings (does not use the
/// library's loss code).
fn oracle_loss(inst: &Instance, kind: LossKind, params: &ModelParams<f64>, input: &GraphInput<'_, f64>) -> f64 {
    let nodes: Vec<usize> = (0..inst.graph.num_nodes()).collect();
    match kind {
        LossKind::Prototype(space) => {
            let emb = fgu_core::gnn::embedding(params, input, space).unwrap();
            let d = emb.cols() as f64;
            inst.groups(space)
                .iter()
                .map(|g| {
                    let mut mean = vec![0.0; emb.cols()];
                    for &i in &g.nodes {
                        for (m, x) in mean.iter_mut().zip(emb.row(i)) {
                            *m += x / g.nodes.len() as f64;
                        }
                    }
                    mean.iter().zip(&g.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d
                })
                .sum()
        }
        _ => {
            let logits = forward(params, input).unwrap();
            let probs = softmax_rows(&logits);
            let c = logits.cols();
            let per_node: f64 = nodes
                .iter()
                .map(|&i| match kind {
                    LossKind::CrossEntropy => -probs.get(i, inst.graph.labels()[i]).ln(),
                    LossKind::SoftKl => (0..c)
                        .map(|k| {
                            let p = inst.teacher_probs.get(i, k);
                            p * (p.ln() - probs.get(i, k).ln())
                        })
                        .sum(),
                    LossKind::Mse => {
                        (0..c).map(|k| (logits.get(i, k) - inst.target_logits.get(i, k)).powi(2)).sum::<f64>() / c as f64
                    }
                    LossKind::Prototype(_) => unreachable!(),
                })
                .sum();
            per_node / nodes.len() as f64
        }
    }
}

/// Checks parameter, feature and (dense) adjacency partials of one loss.
pub fn check_gradients(inst: &Instance, kind: LossKind, dense: bool) -> GradReport {
    let mut report = GradReport::default();
    let nodes: Vec<usize> = (0..inst.graph.num_nodes()).collect();
    let build_prop = |adj: &Matrix<f64>| if dense { Propagation::dense(adj).unwrap() } else { Propagation::from_graph(&inst.graph) };
    let prop = build_prop(&inst.dense_adj);
    let x = inst.graph.features().clone();
    let input = GraphInput::new(&x, &prop).unwrap();
    let spec = spec(inst, kind, &nodes);
    let (value, grads) = backward(&inst.params, &input, &spec, true).unwrap();
    let oracle_value = oracle_loss(inst, kind, &inst.params, &input);
    if (value - oracle_value).abs() > 1e-10 * (1.0 + oracle_value.abs()) {
        report.failures.push(format!("loss value {value} vs oracle {oracle_value}"));
    }

    // Parameters.
    for (t_idx, tensor) in inst.params.tensors().iter().enumerate() {
        let mut flat = tensor.value.as_slice().to_vec();
        for e in 0..flat.len() {
            let mut f = |v: &[f64]| {
                let mut p = inst.params.clone();
                p.tensors_mut()[t_idx].value.as_mut_slice().copy_from_slice(v);
                oracle_loss(inst, kind, &p, &input)
            };
            let numeric = central_diff(&mut flat, e, &mut f);
            let analytic = grads.params.tensors()[t_idx].value.as_slice()[e];
            report.record(&format!("{}[{e}]", tensor.name), analytic, numeric);
        }
    }

    // Features.
    let dx = grads.features.as_ref().expect("feature grads requested");
    let mut flat = x.as_slice().to_vec();
    for e in 0..flat.len() {
        let mut f = |v: &[f64]| {
            let xm = Matrix::from_vec(x.rows(), x.cols(), v.to_vec()).unwrap();
            let inp = GraphInput::new(&xm, &prop).unwrap();
            oracle_loss(inst, kind, &inst.params, &inp)
        };
        let numeric = central_diff(&mut flat, e, &mut f);
        report.record(&format!("X[{e}]"), dx.as_slice()[e], numeric);
    }

    // Adjacency (dense path only), every entry perturbed independently.
    if dense {
        let da = grads.adjacency.as_ref().expect("adjacency grads for dense input");
        let n = inst.dense_adj.rows();
        let mut flat = inst.dense_adj.as_slice().to_vec();
        for e in 0..flat.len() {
            if e / n == e % n {
                continue;
            }
            let mut f = |v: &[f64]| {
                let am = Matrix::from_vec(n, n, v.to_vec()).unwrap();
                let p = Propagation::dense(&am).unwrap();
                let inp = GraphInput::new(&x, &p).unwrap();
                oracle_loss(inst, kind, &inst.params, &inp)
            };
            let numeric = central_diff(&mut flat, e, &mut f);
            report.record(&format!("A[{},{}]", e / n, e % n), da.as_slice()[e], numeric);
        }
    }
    report
}
