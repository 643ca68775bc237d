//! End-to-end unlearning pipelines and the retrain oracle.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::adversarial::{generate, AdvConfig, AdvLosses, AdversarialGraph};
use crate::distill::{distill_round, DistillConfig, DistillLosses};
use crate::error::{FguError, Result};
use crate::federation::FederationState;
use crate::gnn::{EmbeddingSpace, ModelParams};
use crate::graph::{apply_meta_removal, Edge, Graph, MetaRemoval};
use crate::prototype::{
    basis_inputs, compute_prototypes, gram_schmidt, local_unlearn, project_private, select_influenced, OrthonormalBasis,
    PrototypeRecord, DEFAULT_TAU,
};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UnlearnRequest {
    /// Node, edge or feature removals inside clients. Ids are client-local.
    Meta { removals: Vec<MetaRemoval> },
    /// Whole clients leaving the federation.
    Client { departing: Vec<usize> },
}

impl UnlearnRequest {
    pub fn is_empty(&self) -> bool {
        match self {
            UnlearnRequest::Meta { removals } => removals.iter().all(MetaRemoval::is_empty),
            UnlearnRequest::Client { departing } => departing.is_empty(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub tau: f64,
    pub space: EmbeddingSpace,
    pub unlearn_epochs: usize,
    pub unlearn_lr: f64,
    pub adv: AdvConfig,
    pub distill: DistillConfig,
    /// Base seed of the random stand-in for a departing client's model.
    pub noise_seed: u64,
    /// FedAvg rounds run after the post-unlearn aggregation.
    pub extra_rounds: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            space: EmbeddingSpace::Hidden,
            unlearn_epochs: 1,
            unlearn_lr: 1e-3,
            adv: AdvConfig::default(),
            distill: DistillConfig::default(),
            noise_seed: 0,
            extra_rounds: 0,
        }
    }
}

/// Wall-clock seconds per stage; zero when the stage did not run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess: f64,
    pub local_unlearn: f64,
    pub adversarial: f64,
    pub distill: f64,
    pub removal: f64,
    pub aggregate: f64,
}

impl StageTimings {
    pub fn entries(&self) -> [(&'static str, f64); 6] {
        [
            ("preprocess", self.preprocess),
            ("local_unlearn", self.local_unlearn),
            ("adversarial", self.adversarial),
            ("distill", self.distill),
            ("removal", self.removal),
            ("aggregate", self.aggregate),
        ]
    }
}

fn timed<R>(slot: &mut f64, f: impl FnOnce() -> Result<R>) -> Result<R> {
    let start = Instant::now();
    let out = f();
    *slot += start.elapsed().as_secs_f64();
    out
}

/// Per-requester diagnostics, serializable into `outcome.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RequesterReport {
    pub client: usize,
    pub unlearn_nodes: usize,
    pub basis_size: usize,
    pub orthogonality_error: f64,
    pub unlearn_losses: Vec<f64>,
    pub influenced: Vec<usize>,
    pub adv_initial: AdvLosses,
    pub adv_final: AdvLosses,
    pub adv_iterations: usize,
    pub flipped: Vec<Edge>,
    pub distill: Vec<(usize, Vec<DistillLosses>)>,
    pub prototypes: Vec<PrototypeRecord>,
}

#[derive(Clone, Debug)]
pub struct RequesterArtifacts<T> {
    pub client: usize,
    /// Locally unlearned params, or the random stand-in for a departing client.
    pub unlearned: ModelParams<T>,
    pub adversarial: AdversarialGraph<T>,
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome<T> {
    /// Unlearned global params.
    pub global: ModelParams<T>,
    /// Federation after unlearning; `state.global` equals `global`.
    pub state: FederationState<T>,
    /// Union over requesters, ascending.
    pub influenced: Vec<usize>,
    pub requesters: Vec<RequesterReport>,
    pub artifacts: Vec<RequesterArtifacts<T>>,
    /// Clients left out of the final aggregation for lack of training nodes.
    pub excluded: Vec<usize>,
    pub timings: StageTimings,
}

fn offset_seed(base: u64, client: usize) -> u64 {
    base.wrapping_add(client as u64)
}

fn basis_for<T: Scalar>(inputs: &[Vec<T>], dim: usize) -> OrthonormalBasis<T> {
    if inputs.is_empty() {
        return OrthonormalBasis::empty(dim);
    }
    gram_schmidt(inputs).unwrap_or_else(|_| OrthonormalBasis::empty(dim))
}

fn finish<T: Scalar>(
    mut state: FederationState<T>,
    config: &StageConfig,
    mut timings: StageTimings,
    requesters: Vec<RequesterReport>,
    artifacts: Vec<RequesterArtifacts<T>>,
    workers: Option<usize>,
) -> Result<UnlearnOutcome<T>> {
    let weighting = state.config.weighting;
    let excluded: Vec<usize> = state.clients.iter().filter(|c| c.data_size(weighting) == 0).map(|c| c.id).collect();
    for id in &excluded {
        warn!("client {id} has no training nodes left and is excluded from aggregation");
    }
    let global = timed(&mut timings.aggregate, || state.aggregate_clients())?;
    state.global = global;
    if config.extra_rounds > 0 {
        state.run_training(config.extra_rounds, workers)?;
    }
    let mut influenced: Vec<usize> = requesters.iter().flat_map(|r| r.influenced.iter().copied()).collect();
    influenced.sort_unstable();
    influenced.dedup();
    Ok(UnlearnOutcome { global: state.global.clone(), state, influenced, requesters, artifacts, excluded, timings })
}

/// Prototype-guided local unlearning, adversarial probe and negative
/// distillation for every non-empty removal, in ascending client order.
pub fn meta_unlearn_pipeline<T: Scalar>(
    trained: &FederationState<T>,
    removals: &[MetaRemoval],
    config: &StageConfig,
    workers: Option<usize>,
) -> Result<UnlearnOutcome<T>> {
    let mut state = trained.clone();
    let mut timings = StageTimings::default();
    let mut ordered: Vec<&MetaRemoval> = removals.iter().filter(|r| !r.is_empty()).collect();
    ordered.sort_by_key(|r| r.client_id);
    for w in ordered.windows(2) {
        if w[0].client_id == w[1].client_id {
            return Err(FguError::InvalidArgument(format!("two removals for client {}", w[0].client_id)));
        }
    }
    for r in &ordered {
        let idx = state.client_index(r.client_id)?;
        // Validate up front so a bad request fails before any stage runs.
        apply_meta_removal(&state.clients[idx].graph, r)?;
    }

    let mut requesters = Vec::new();
    let mut artifacts = Vec::new();
    for r in ordered {
        let u = r.client_id;
        let idx = state.client_index(u)?;
        let nodes = r.affected_nodes();
        info!("meta unlearn for client {u}: {} affected nodes", nodes.len());

        timed(&mut timings.preprocess, || state.collect_prototypes(config.space, workers))?;
        let sets = state.prototype_sets();
        let original = state.clients[idx].params.clone();
        let graph = state.clients[idx].graph.clone();

        let (unlearned, report_base) = timed(&mut timings.local_unlearn, || {
            let p_del = compute_prototypes(&original, &graph, &nodes, config.space, u)?;
            let basis = basis_for(&basis_inputs(&sets, u), p_del.dim());
            let direction = project_private(&p_del, &basis)?;
            let (theta, losses) =
                local_unlearn(&original, &graph, &nodes, &direction, config.space, config.unlearn_epochs, config.unlearn_lr)?;
            let report = RequesterReport {
                client: u,
                unlearn_nodes: nodes.len(),
                basis_size: basis.len(),
                orthogonality_error: direction.orthogonality_error(&basis),
                unlearn_losses: losses,
                prototypes: p_del.records(),
                ..Default::default()
            };
            Ok((theta, report))
        })?;

        let adv_cfg = AdvConfig { seed: offset_seed(config.adv.seed, u), ..config.adv.clone() };
        let adv = timed(&mut timings.adversarial, || generate(&original, &unlearned, &adv_cfg))?;

        let (influenced, traces) = timed(&mut timings.distill, || {
            let influenced = select_influenced(&sets, u, config.tau);
            let traces = distill_round(&mut state, &influenced, &unlearned, &adv.graph, &config.distill, workers)?;
            Ok((influenced, traces))
        })?;

        timed(&mut timings.removal, || {
            let c = &mut state.clients[idx];
            c.graph = apply_meta_removal(&c.graph, r)?;
            c.params = unlearned.clone();
            c.prototypes = None;
            Ok(())
        })?;

        requesters.push(RequesterReport {
            influenced,
            adv_initial: adv.initial,
            adv_final: adv.final_losses,
            adv_iterations: adv.iterations,
            flipped: adv.flipped.clone(),
            distill: traces,
            ..report_base
        });
        artifacts.push(RequesterArtifacts { client: u, unlearned, adversarial: adv });
    }
    finish(state, config, timings, requesters, artifacts, workers)
}

/// Removes whole clients. Each departing client's model is replaced by a
/// freshly initialized one, which serves as the negative teacher.
pub fn client_unlearn_pipeline<T: Scalar>(
    trained: &FederationState<T>,
    departing: &[usize],
    config: &StageConfig,
    workers: Option<usize>,
) -> Result<UnlearnOutcome<T>> {
    let mut departing = departing.to_vec();
    departing.sort_unstable();
    departing.dedup();
    if departing.is_empty() {
        return Err(FguError::InvalidArgument("client unlearning needs at least one departing client".into()));
    }
    for &id in &departing {
        trained.client_index(id)?;
    }
    if departing.len() >= trained.num_clients() {
        return Err(FguError::InvalidArgument("cannot remove every client".into()));
    }

    let mut state = trained.clone();
    let mut timings = StageTimings::default();
    timed(&mut timings.preprocess, || state.collect_prototypes(config.space, workers))?;
    let all_sets = state.prototype_sets();
    let fed = state.config.clone();
    let mut requesters = Vec::new();
    let mut artifacts = Vec::new();
    for &u in &departing {
        let idx = state.client_index(u)?;
        let original = state.clients[idx].params.clone();
        let noise = ModelParams::init(
            fed.backbone,
            original.d_in(),
            fed.hidden,
            original.num_classes(),
            offset_seed(config.noise_seed, u),
        )?;
        let adv_cfg = AdvConfig { seed: offset_seed(config.adv.seed, u), ..config.adv.clone() };
        let adv = timed(&mut timings.adversarial, || generate(&original, &noise, &adv_cfg))?;
        let candidates: Vec<_> =
            all_sets.iter().filter(|s| s.client_id == u || departing.binary_search(&s.client_id).is_err()).cloned().collect();
        let (influenced, traces) = timed(&mut timings.distill, || {
            let influenced = select_influenced(&candidates, u, config.tau);
            let traces = distill_round(&mut state, &influenced, &noise, &adv.graph, &config.distill, workers)?;
            Ok((influenced, traces))
        })?;
        requesters.push(RequesterReport {
            client: u,
            unlearn_nodes: state.clients[idx].graph.num_nodes(),
            influenced,
            adv_initial: adv.initial,
            adv_final: adv.final_losses,
            adv_iterations: adv.iterations,
            flipped: adv.flipped.clone(),
            distill: traces,
            ..Default::default()
        });
        artifacts.push(RequesterArtifacts { client: u, unlearned: noise, adversarial: adv });
    }
    timed(&mut timings.removal, || {
        state.clients.retain(|c| departing.binary_search(&c.id).is_err());
        Ok(())
    })?;
    finish(state, config, timings, requesters, artifacts, workers)
}

/// Client graphs with the request applied: removals for meta requests,
/// departing clients dropped for client requests.
pub fn retained_graphs<T: Scalar>(state: &FederationState<T>, request: &UnlearnRequest) -> Result<Vec<(usize, Graph<T>)>> {
    match request {
        UnlearnRequest::Meta { removals } => {
            for r in removals {
                state.client_index(r.client_id)?;
            }
            state
                .clients
                .iter()
                .map(|c| {
                    let mut g = c.graph.clone();
                    for r in removals.iter().filter(|r| r.client_id == c.id) {
                        g = apply_meta_removal(&g, r)?;
                    }
                    Ok((c.id, g))
                })
                .collect()
        }
        UnlearnRequest::Client { departing } => {
            for &id in departing {
                state.client_index(id)?;
            }
            let kept: Vec<(usize, Graph<T>)> =
                state.clients.iter().filter(|c| !departing.contains(&c.id)).map(|c| (c.id, c.graph.clone())).collect();
            if kept.is_empty() {
                return Err(FguError::InvalidArgument("request removes every client".into()));
            }
            Ok(kept)
        }
    }
}

/// Trains from the same initial params on the retained data only.
pub fn retrain_oracle<T: Scalar>(
    trained: &FederationState<T>,
    request: &UnlearnRequest,
    workers: Option<usize>,
) -> Result<FederationState<T>> {
    let graphs = retained_graphs(trained, request)?;
    let mut state = FederationState::with_ids(graphs, trained.config.clone())?;
    state.run_training(trained.config.rounds, workers)?;
    Ok(state)
}

/// Dispatches on the request kind.
pub fn run_unlearn<T: Scalar>(
    trained: &FederationState<T>,
    request: &UnlearnRequest,
    config: &StageConfig,
    workers: Option<usize>,
) -> Result<UnlearnOutcome<T>> {
    match request {
        UnlearnRequest::Meta { removals } => meta_unlearn_pipeline(trained, removals, config, workers),
        UnlearnRequest::Client { departing } => client_unlearn_pipeline(trained, departing, config, workers),
    }
}
