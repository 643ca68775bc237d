//! Negative knowledge distillation on influenced clients.
//!
//! The student starts at the client's own params. It keeps matching its
//! frozen starting outputs on the local graph while also matching the
//! unlearned model's logits on the adversarial graph.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{FguError, Result};
use crate::federation::{parallel_map, FederationState};
use crate::gnn::loss::softmax;
use crate::gnn::{backward, forward, Adam, GraphInput, LossSpec, ModelParams, Propagation};
use crate::graph::Graph;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveLoss {
    /// KL against the frozen teacher's soft labels.
    #[default]
    Kl,
    /// Cross-entropy against the true labels.
    HardLabels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub lr: f64,
    pub positive: PositiveLoss,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { alpha: 5.0, epochs: 2, lr: 1e-3, positive: PositiveLoss::Kl }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillLosses {
    pub l_pos: f64,
    pub l_neg: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome<T> {
    pub params: ModelParams<T>,
    /// Losses before each step, then at the returned params.
    pub trace: Vec<DistillLosses>,
}

/// Distills `student` on its local graph with the unlearned model as the
/// negative teacher on `adv`.
pub fn distill<T: Scalar>(
    student: &ModelParams<T>,
    unlearned: &ModelParams<T>,
    local: &Graph<T>,
    adv: &Graph<T>,
    config: &DistillConfig,
) -> Result<DistillOutcome<T>> {
    if !(config.alpha >= 0.0) {
        return Err(FguError::InvalidArgument(format!("alpha {} must be non-negative", config.alpha)));
    }
    student.check_layout(unlearned)?;
    if adv.num_features() != student.d_in() {
        return Err(FguError::DimensionMismatch(format!(
            "adversarial graph has {} features, model expects {}",
            adv.num_features(),
            student.d_in()
        )));
    }
    let train = &local.masks().train;
    if train.is_empty() {
        return Err(FguError::Empty("train mask of distilled client".into()));
    }
    let local_prop = Propagation::from_graph(local);
    let local_in = GraphInput::new(local.features(), &local_prop)?;
    let adv_prop = Propagation::from_graph(adv);
    let adv_in = GraphInput::new(adv.features(), &adv_prop)?;

    let teacher_probs = softmax(&forward(student, &local_in)?);
    let negative_target = forward(unlearned, &adv_in)?;
    let adv_nodes: Vec<usize> = (0..adv.num_nodes()).collect();

    let pos = match config.positive {
        PositiveLoss::Kl => LossSpec::SoftTargetKl { teacher_probs: &teacher_probs, nodes: train },
        PositiveLoss::HardLabels => LossSpec::CrossEntropy { labels: local.labels(), nodes: train },
    };
    let neg = LossSpec::Mse { target: &negative_target, nodes: &adv_nodes };
    let alpha = T::lit(config.alpha);
    let use_neg = config.alpha > 0.0;

    let eval = |p: &ModelParams<T>, with_grads: bool| -> Result<(DistillLosses, Option<ModelParams<T>>)> {
        let (lp, gp) = backward(p, &local_in, &pos, false)?;
        let mut grads = gp.params;
        let (ln, gn) = backward(p, &adv_in, &neg, false)?;
        if use_neg {
            grads.axpy(alpha, &gn.params)?;
        }
        let losses = DistillLosses { l_pos: lp.as_f64(), l_neg: ln.as_f64(), total: (lp + alpha * ln).as_f64() };
        Ok((losses, with_grads.then_some(grads)))
    };

    let mut current = student.clone();
    let mut adam = Adam::new(config.lr);
    let mut trace = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (losses, grads) = eval(&current, true).map_err(|e| match e {
            FguError::NonFinite { value, context } => {
                FguError::NonFinite { value, context: format!("{context}, distill epoch {epoch}") }
            }
            other => other,
        })?;
        trace.push(losses);
        adam.step_params(&mut current, &grads.expect("requested"))?;
    }
    let (last, _) = eval(&current, false)?;
    trace.push(last);
    if !current.all_finite() {
        return Err(FguError::NonFinite { value: f64::NAN, context: "distilled params".into() });
    }
    Ok(DistillOutcome { params: current, trace })
}

/// Distills every influenced client in place. Returns each client's trace.
pub fn distill_round<T: Scalar>(
    state: &mut FederationState<T>,
    influenced: &[usize],
    unlearned: &ModelParams<T>,
    adv: &Graph<T>,
    config: &DistillConfig,
    workers: Option<usize>,
) -> Result<Vec<(usize, Vec<DistillLosses>)>> {
    let idx: Vec<usize> = influenced.iter().map(|&id| state.client_index(id)).collect::<Result<_>>()?;
    let clients = &state.clients;
    let outcomes = parallel_map(workers, &idx, |&i| distill(&clients[i].params, unlearned, &clients[i].graph, adv, config))?;
    let mut traces = Vec::with_capacity(idx.len());
    for (i, out) in idx.into_iter().zip(outcomes) {
        let c = &mut state.clients[i];
        debug!("distilled client {}: {:?}", c.id, out.trace);
        c.params.check_layout(&out.params)?;
        c.params = out.params;
        traces.push((c.id, out.trace));
    }
    Ok(traces)
}
