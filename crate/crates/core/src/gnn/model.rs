use serde::{Deserialize, Serialize};

use super::loss::{self, LossSpec};
use super::optim::Adam;
use super::propagation::Propagation;
use super::{Backbone, ModelParams};
use crate::error::{check_finite, FguError, Result};
use crate::graph::Graph;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Which node representation prototypes are taken from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSpace {
    /// GCN: post-ReLU first layer. SGC: propagated features `Âᵏ X`.
    #[default]
    Hidden,
    Logits,
}

/// Features plus a propagation operator (sparse from a [`Graph`] or dense
/// from a relaxed adjacency).
#[derive(Clone, Copy, Debug)]
pub struct GraphInput<'a, T> {
    pub features: &'a Matrix<T>,
    pub prop: &'a Propagation<T>,
}

impl<'a, T: Scalar> GraphInput<'a, T> {
    pub fn new(features: &'a Matrix<T>, prop: &'a Propagation<T>) -> Result<Self> {
        if features.rows() != prop.num_nodes() {
            return Err(FguError::DimensionMismatch(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                prop.num_nodes()
            )));
        }
        Ok(Self { features, prop })
    }
}

/// Intermediates of one forward evaluation.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    pub logits: Matrix<T>,
    // GCN: q1 = X W1, z1 = Â q1, h1 = ReLU(z1), q2 = h1 W2
    gcn: Option<[Matrix<T>; 4]>,
    // SGC: steps[j] = Âʲ X W
    sgc_steps: Vec<Matrix<T>>,
    // SGC hidden embedding chain: emb[j] = Âʲ X
    sgc_emb: Vec<Matrix<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn embedding(&self, space: EmbeddingSpace) -> Option<&Matrix<T>> {
        match space {
            EmbeddingSpace::Logits => Some(&self.logits),
            EmbeddingSpace::Hidden => match &self.gcn {
                Some(g) => Some(&g[2]),
                None => self.sgc_emb.last(),
            },
        }
    }
}

/// Gradients carried out of a backward pass.
#[derive(Clone, Debug)]
pub struct GradBundle<T> {
    pub params: ModelParams<T>,
    /// `∂L/∂X`
    pub features: Option<Matrix<T>>,
    /// `∂L/∂A` for dense propagation, every entry treated as free.
    pub adjacency: Option<Matrix<T>>,
}

/// Upstream gradients for a backward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct OutputGrads<'a, T> {
    pub logits: Option<&'a Matrix<T>>,
    pub embedding: Option<(&'a Matrix<T>, EmbeddingSpace)>,
}

fn check_input<T: Scalar>(params: &ModelParams<T>, input: &GraphInput<'_, T>) -> Result<()> {
    if input.features.cols() != params.d_in() {
        return Err(FguError::DimensionMismatch(format!(
            "features have {} columns, model expects {}",
            input.features.cols(),
            params.d_in()
        )));
    }
    if input.features.rows() != input.prop.num_nodes() {
        return Err(FguError::DimensionMismatch(format!(
            "{} feature rows for {} nodes",
            input.features.rows(),
            input.prop.num_nodes()
        )));
    }
    Ok(())
}

/// Runs the backbone. `embedding_space` requests the SGC hidden chain, which
/// is otherwise skipped; GCN hidden rows are always kept.
pub fn forward_pass<T: Scalar>(
    params: &ModelParams<T>,
    input: &GraphInput<'_, T>,
    embedding_space: Option<EmbeddingSpace>,
) -> Result<ForwardPass<T>> {
    check_input(params, input)?;
    let x = input.features;
    let prop = input.prop;
    match params.backbone() {
        Backbone::Gcn => {
            let w1 = &params.tensors()[0].value;
            let w2 = &params.tensors()[1].value;
            let q1 = x.matmul(w1)?;
            let z1 = prop.apply(&q1)?;
            let h1 = z1.map(|v| v.max(T::zero()));
            let q2 = h1.matmul(w2)?;
            let logits = prop.apply(&q2)?;
            Ok(ForwardPass { logits, gcn: Some([q1, z1, h1, q2]), sgc_steps: Vec::new(), sgc_emb: Vec::new() })
        }
        Backbone::Sgc { hops } => {
            let w = &params.tensors()[0].value;
            let mut steps = vec![x.matmul(w)?];
            for _ in 0..hops {
                let next = prop.apply(steps.last().unwrap())?;
                steps.push(next);
            }
            let mut emb = Vec::new();
            if embedding_space == Some(EmbeddingSpace::Hidden) {
                emb.push(x.clone());
                for _ in 0..hops {
                    let next = prop.apply(emb.last().unwrap())?;
                    emb.push(next);
                }
            }
            Ok(ForwardPass { logits: steps.last().unwrap().clone(), gcn: None, sgc_steps: steps, sgc_emb: emb })
        }
    }
}

/// Logits `[N × C]`.
pub fn forward<T: Scalar>(params: &ModelParams<T>, input: &GraphInput<'_, T>) -> Result<Matrix<T>> {
    Ok(forward_pass(params, input, None)?.logits)
}

/// Node representations in `space`.
pub fn embedding<T: Scalar>(params: &ModelParams<T>, input: &GraphInput<'_, T>, space: EmbeddingSpace) -> Result<Matrix<T>> {
    let pass = forward_pass(params, input, Some(space))?;
    Ok(pass.embedding(space).unwrap().clone())
}

fn accumulate<T: Scalar>(slot: &mut Option<Matrix<T>>, value: Matrix<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&value),
        None => {
            *slot = Some(value);
            Ok(())
        }
    }
}

/// Reverse pass from upstream output gradients.
pub fn backward_pass<T: Scalar>(
    params: &ModelParams<T>,
    input: &GraphInput<'_, T>,
    pass: &ForwardPass<T>,
    upstream: OutputGrads<'_, T>,
    need_input_grads: bool,
) -> Result<GradBundle<T>> {
    let x = input.features;
    let prop = input.prop;
    let want_adj = need_input_grads && matches!(prop, Propagation::Dense(_));
    let (n, c) = pass.logits.shape();

    let mut d_logits = upstream.logits.cloned().unwrap_or_else(|| Matrix::zeros(n, c));
    let mut d_hidden = None;
    match upstream.embedding {
        Some((g, EmbeddingSpace::Logits)) => d_logits.add_assign(g)?,
        Some((g, EmbeddingSpace::Hidden)) => d_hidden = Some(g),
        None => {}
    }

    let mut d_norm: Option<Matrix<T>> = None;
    let mut grads = params.zeros_like();
    let d_x;
    match params.backbone() {
        Backbone::Gcn => {
            let [q1, z1, h1, q2] = pass.gcn.as_ref().ok_or_else(|| FguError::LayoutMismatch("pass is not GCN".into()))?;
            let w1 = &params.tensors()[0].value;
            let w2 = &params.tensors()[1].value;
            let d_q2 = prop.apply_t(&d_logits)?;
            if want_adj {
                accumulate(&mut d_norm, d_logits.matmul_t(q2)?)?;
            }
            grads.tensors_mut()[1].value = h1.t_matmul(&d_q2)?;
            let mut d_h1 = d_q2.matmul_t(w2)?;
            if let Some(g) = d_hidden {
                d_h1.add_assign(g)?;
            }
            let d_z1 = d_h1.zip_map(z1, |g, z| if z > T::zero() { g } else { T::zero() })?;
            let d_q1 = prop.apply_t(&d_z1)?;
            if want_adj {
                accumulate(&mut d_norm, d_z1.matmul_t(q1)?)?;
            }
            grads.tensors_mut()[0].value = x.t_matmul(&d_q1)?;
            d_x = need_input_grads.then(|| d_q1.matmul_t(w1)).transpose()?;
        }
        Backbone::Sgc { hops } => {
            let w = &params.tensors()[0].value;
            let mut d_p = d_logits;
            for j in (1..=hops).rev() {
                if want_adj {
                    accumulate(&mut d_norm, d_p.matmul_t(&pass.sgc_steps[j - 1])?)?;
                }
                d_p = prop.apply_t(&d_p)?;
            }
            grads.tensors_mut()[0].value = x.t_matmul(&d_p)?;
            let mut dx = if need_input_grads { Some(d_p.matmul_t(w)?) } else { None };
            if let Some(g) = d_hidden {
                if pass.sgc_emb.len() != hops + 1 {
                    return Err(FguError::InvalidArgument("SGC hidden gradient needs the embedding chain".into()));
                }
                if need_input_grads {
                    let mut d_e = g.clone();
                    for j in (1..=hops).rev() {
                        if want_adj {
                            accumulate(&mut d_norm, d_e.matmul_t(&pass.sgc_emb[j - 1])?)?;
                        }
                        d_e = prop.apply_t(&d_e)?;
                    }
                    if let Some(dx) = dx.as_mut() {
                        dx.add_assign(&d_e)?;
                    }
                }
            }
            d_x = dx;
        }
    }

    let adjacency = match (prop, d_norm) {
        (Propagation::Dense(dense), Some(g)) => Some(dense.adjacency_grad(&g)),
        (Propagation::Dense(_), None) if want_adj => Some(Matrix::zeros(n, n)),
        _ => None,
    };
    Ok(GradBundle { params: grads, features: d_x, adjacency })
}

struct LossEval<T> {
    value: T,
    d_logits: Option<Matrix<T>>,
    d_emb: Option<(Matrix<T>, EmbeddingSpace)>,
}

fn eval_loss<T: Scalar>(spec: &LossSpec<'_, T>, pass: &ForwardPass<T>, labels_len: usize) -> Result<LossEval<T>> {
    Ok(match spec {
        LossSpec::CrossEntropy { labels, nodes } => {
            if labels.len() != labels_len {
                return Err(FguError::DimensionMismatch(format!("{} labels for {labels_len} nodes", labels.len())));
            }
            let (v, g) = loss::cross_entropy(&pass.logits, labels, nodes)?;
            LossEval { value: v, d_logits: Some(g), d_emb: None }
        }
        LossSpec::SoftTargetKl { teacher_probs, nodes } => {
            let (v, g) = loss::soft_target_kl(&pass.logits, teacher_probs, nodes)?;
            LossEval { value: v, d_logits: Some(g), d_emb: None }
        }
        LossSpec::Mse { target, nodes } => {
            let (v, g) = loss::mse(&pass.logits, target, nodes)?;
            LossEval { value: v, d_logits: Some(g), d_emb: None }
        }
        LossSpec::Prototype { groups, space } => {
            let emb = pass
                .embedding(*space)
                .ok_or_else(|| FguError::InvalidArgument("embedding not computed".into()))?;
            let (v, g) = loss::prototype_mse(emb, groups)?;
            LossEval { value: v, d_logits: None, d_emb: Some((g, *space)) }
        }
        LossSpec::Scaled { factor, inner } => {
            let mut e = eval_loss(inner, pass, labels_len)?;
            e.value *= *factor;
            if let Some(g) = e.d_logits.as_mut() {
                g.scale(*factor);
            }
            if let Some((g, _)) = e.d_emb.as_mut() {
                g.scale(*factor);
            }
            e
        }
    })
}

fn embedding_space_of<T>(spec: &LossSpec<'_, T>) -> Option<EmbeddingSpace> {
    match spec {
        LossSpec::Prototype { space, .. } => Some(*space),
        LossSpec::Scaled { inner, .. } => embedding_space_of(inner),
        _ => None,
    }
}

/// Loss value and exact gradients for a single-model loss.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    input: &GraphInput<'_, T>,
    spec: &LossSpec<'_, T>,
    need_input_grads: bool,
) -> Result<(T, GradBundle<T>)> {
    let pass = forward_pass(params, input, embedding_space_of(spec))?;
    let e = eval_loss(spec, &pass, input.features.rows())?;
    check_finite(e.value.as_f64(), || "loss evaluation".to_string())?;
    let upstream = OutputGrads { logits: e.d_logits.as_ref(), embedding: e.d_emb.as_ref().map(|(g, s)| (g, *s)) };
    let grads = backward_pass(params, input, &pass, upstream, need_input_grads)?;
    Ok((e.value, grads))
}

/// Full-batch Adam on cross-entropy over the train mask.
///
/// Returns the trained params and the loss observed before each step.
pub fn train_local<T: Scalar>(
    params: &ModelParams<T>,
    graph: &Graph<T>,
    epochs: usize,
    lr: f64,
) -> Result<(ModelParams<T>, Vec<f64>)> {
    let train = &graph.masks().train;
    if train.is_empty() {
        return Err(FguError::Empty("train mask".into()));
    }
    let prop = Propagation::from_graph(graph);
    let input = GraphInput::new(graph.features(), &prop)?;
    let mut current = params.clone();
    let mut adam = Adam::new(lr);
    let mut losses = Vec::with_capacity(epochs);
    let spec = LossSpec::CrossEntropy { labels: graph.labels(), nodes: train };
    for epoch in 0..epochs {
        let (value, grads) = backward(&current, &input, &spec, false)
            .map_err(|e| with_epoch(e, epoch))?;
        losses.push(value.as_f64());
        adam.step_params(&mut current, &grads.params)?;
    }
    Ok((current, losses))
}

fn with_epoch(e: FguError, epoch: usize) -> FguError {
    match e {
        FguError::NonFinite { value, context } => FguError::NonFinite { value, context: format!("{context}, epoch {epoch}") },
        other => other,
    }
}
