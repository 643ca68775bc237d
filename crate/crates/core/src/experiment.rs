//! Experiment configuration and the train, unlearn and attack drivers shared
//! by the command line and the acceptance suite.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FguError, Result};
use crate::eval::{
    agreement_over, inject_edge_attack, membership_scores, mia_from_scores, pooled_test_accuracy, AccuracyBlock, AttackBlock, ClientAccuracy,
    ClientEdges, DistanceBlock, MetricsReport, MiaEntry, Seeds,
};
use crate::federation::{FederationConfig, FederationState};
use crate::gnn::ModelParams;
use crate::graph::{client_subgraph, load_graph, louvain_partition, sbm_generate, Edge, Graph, MetaRemoval, Partition, SbmConfig};
use crate::pipeline::{retrain_oracle, run_unlearn as run_pipeline, StageConfig, UnlearnOutcome, UnlearnRequest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSpec {
    /// Graph JSON as written by `save_graph`.
    File { path: PathBuf },
    /// Generated graph. Its seed is replaced by the data seed.
    Sbm(SbmConfig),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Sbm(default_sbm())
    }
}

/// 500 nodes, 20 blocks of 25, five classes. Block `b` carries class
/// `(b + b/5) mod 5` so every run of five consecutive blocks covers all classes
/// and communities of the same class sit on different clients.
pub fn default_sbm() -> SbmConfig {
    let blocks = (0..20).map(|b| (25, (b + b / 5) % 5)).collect();
    SbmConfig { feature_noise: 3.0, split: (0.5, 0.1), ..SbmConfig::new(blocks, 0.3, 0.004, 64, 0) }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestMode {
    #[default]
    Meta,
    Client,
}

/// What a sampled meta request removes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaLevel {
    #[default]
    Node,
    Edge,
    Feature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequestSpec {
    pub mode: RequestMode,
    /// Fraction of the requester's nodes (meta) or of all clients (client).
    /// Defaults to 0.1 and 0.2 respectively.
    pub ratio: Option<f64>,
    /// Number of requesting clients for sampled meta requests.
    pub requesters: usize,
    pub level: MetaLevel,
    /// Used verbatim instead of sampling when present.
    pub explicit: Option<UnlearnRequest>,
}

impl Default for RequestSpec {
    fn default() -> Self {
        Self { mode: RequestMode::Meta, ratio: None, requesters: 1, level: MetaLevel::Node, explicit: None }
    }
}

impl RequestSpec {
    pub fn ratio_for(&self, mode: RequestMode) -> f64 {
        self.ratio.unwrap_or(match mode {
            RequestMode::Meta => 0.1,
            RequestMode::Client => 0.2,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalToggles {
    pub retrain: bool,
    pub mia: bool,
    pub distance: bool,
}

impl Default for EvalToggles {
    fn default() -> Self {
        Self { retrain: true, mia: true, distance: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub clients: usize,
    pub seeds: Seeds,
    pub federation: FederationConfig,
    pub stages: StageConfig,
    pub request: RequestSpec,
    /// Poison ratio of the edge attack.
    pub attack_ratio: f64,
    pub eval: EvalToggles,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            clients: 5,
            seeds: Seeds::default(),
            federation: FederationConfig::default(),
            stages: StageConfig::default(),
            request: RequestSpec::default(),
            attack_ratio: 0.3,
            eval: EvalToggles::default(),
            workers: None,
            out: None,
        }
    }
}

fn check_ratio(name: &str, r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(FguError::InvalidArgument(format!("{name} {r} must lie in (0, 1]")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients < 2 {
            return Err(FguError::InvalidArgument(format!("need at least 2 clients, got {}", self.clients)));
        }
        if let DatasetSpec::File { path } = &self.dataset {
            if !path.exists() {
                return Err(FguError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file does not exist")));
            }
        }
        if let Some(r) = self.request.ratio {
            check_ratio("request ratio", r)?;
        }
        if !(0.0..=1.0).contains(&self.attack_ratio) {
            return Err(FguError::InvalidArgument(format!("attack ratio {} not in [0,1]", self.attack_ratio)));
        }
        if self.request.requesters == 0 {
            return Err(FguError::InvalidArgument("requesters must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(FguError::InvalidArgument("workers must be at least 1".into()));
        }
        self.stages.adv.validate()
    }

    /// Federation settings with the training seed applied.
    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig { seed: self.seeds.train, ..self.federation.clone() }
    }

    /// Stage settings with the training and request seeds applied.
    pub fn stage_config(&self) -> StageConfig {
        let mut stages = self.stages.clone();
        stages.noise_seed = self.seeds.train;
        stages.adv.seed = self.seeds.request;
        stages
    }

    /// The config as actually run, for echoing into reports.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.federation = self.federation_config();
        cfg.stages = self.stage_config();
        if let DatasetSpec::Sbm(s) = &mut cfg.dataset {
            s.seed = self.seeds.data;
        }
        cfg
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self.resolved()).unwrap_or(serde_json::Value::Null)
    }
}

/// The global graph and its split across clients.
#[derive(Clone, Debug)]
pub struct FederatedData {
    pub graph: Graph<f64>,
    pub partition: Partition,
    pub clients: Vec<Graph<f64>>,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Graph<f64>> {
    match &cfg.dataset {
        DatasetSpec::File { path } => load_graph(path),
        DatasetSpec::Sbm(s) => sbm_generate(&SbmConfig { seed: cfg.seeds.data, ..s.clone() }),
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<FederatedData> {
    cfg.validate()?;
    partition_dataset(cfg)
}

/// Loads and splits the dataset without the training-time checks, so a
/// single-client split is allowed.
pub fn partition_dataset(cfg: &ExperimentConfig) -> Result<FederatedData> {
    if cfg.clients == 0 {
        return Err(FguError::InvalidArgument("need at least 1 client".into()));
    }
    let graph = load_dataset(cfg)?;
    let partition = louvain_partition(&graph, cfg.clients, cfg.seeds.data)?;
    let clients = (0..cfg.clients).map(|c| client_subgraph(&graph, &partition, c)).collect::<Result<_>>()?;
    Ok(FederatedData { graph, partition, clients })
}

pub fn train_federation(cfg: &ExperimentConfig, clients: Vec<Graph<f64>>) -> Result<FederationState<f64>> {
    let fed = cfg.federation_config();
    let rounds = fed.rounds;
    let mut state = FederationState::new(clients, fed)?;
    state.run_training(rounds, cfg.workers)?;
    Ok(state)
}

fn client_views(state: &FederationState<f64>) -> Vec<(usize, &Graph<f64>)> {
    state.clients.iter().map(|c| (c.id, &c.graph)).collect()
}

fn secs(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

/// Trains the federation and reports the trained model's accuracy.
pub fn run_train(cfg: &ExperimentConfig, data: &FederatedData) -> Result<(FederationState<f64>, MetricsReport)> {
    let start = Instant::now();
    let state = train_federation(cfg, data.clients.clone())?;
    let mut report = base_report(cfg, "train");
    report.accuracy.insert("original".into(), AccuracyBlock::measure(&state.global, &client_views(&state))?);
    report.timings.insert("train".into(), secs(start));
    Ok((state, report))
}

fn base_report(cfg: &ExperimentConfig, run: &str) -> MetricsReport {
    MetricsReport { run: run.into(), seeds: cfg.seeds, config: cfg.echo(), ..Default::default() }
}

fn sample_sorted<T: Copy + Ord>(pool: &[T], count: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut picked: Vec<T> = pool.choose_multiple(rng, count.min(pool.len())).copied().collect();
    picked.sort_unstable();
    picked
}

fn ceil_count(ratio: f64, of: usize) -> usize {
    // Guards products like 0.1 * 30 = 3.0000000000000004.
    ((ratio * of as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Samples a request from the request seed, or returns the explicit one.
pub fn build_request(cfg: &ExperimentConfig, state: &FederationState<f64>, mode: RequestMode) -> Result<UnlearnRequest> {
    if let Some(explicit) = &cfg.request.explicit {
        return Ok(explicit.clone());
    }
    let ratio = cfg.request.ratio_for(mode);
    check_ratio("request ratio", ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.request);
    let ids = state.client_ids();
    match mode {
        RequestMode::Client => {
            let count = ceil_count(ratio, ids.len()).max(1);
            if count >= ids.len() {
                return Err(FguError::InvalidArgument(format!(
                    "client ratio {ratio} would remove {count} of {} clients",
                    ids.len()
                )));
            }
            Ok(UnlearnRequest::Client { departing: sample_sorted(&ids, count, &mut rng) })
        }
        RequestMode::Meta => {
            let eligible: Vec<usize> =
                state.clients.iter().filter(|c| !c.graph.masks().train.is_empty()).map(|c| c.id).collect();
            let requesters = sample_sorted(&eligible, cfg.request.requesters, &mut rng);
            let mut removals = Vec::new();
            for u in requesters {
                let g = &state.clients[state.client_index(u)?].graph;
                let mut r = MetaRemoval::new(u);
                match cfg.request.level {
                    MetaLevel::Node | MetaLevel::Feature => {
                        let picked = sample_sorted(&g.masks().train, ceil_count(ratio, g.num_nodes()), &mut rng);
                        if cfg.request.level == MetaLevel::Node {
                            r.removed_nodes = picked;
                        } else {
                            r.feature_masked_nodes = picked;
                        }
                    }
                    MetaLevel::Edge => {
                        r.removed_edges = sample_sorted(g.edges(), ceil_count(ratio, g.edges().len()), &mut rng);
                    }
                }
                removals.push(r);
            }
            Ok(UnlearnRequest::Meta { removals })
        }
    }
}

/// Forgotten training nodes of each requester, with its test nodes as the
/// non-member pool. Ids refer to the requester's pre-request graph.
pub fn membership_sets(state: &FederationState<f64>, request: &UnlearnRequest) -> Result<Vec<(usize, Vec<usize>, Vec<usize>)>> {
    let mut out = Vec::new();
    let mut push = |u: usize, members: Vec<usize>| -> Result<()> {
        let g = &state.clients[state.client_index(u)?].graph;
        let non: Vec<usize> = g.masks().test.iter().copied().filter(|v| members.binary_search(v).is_err()).collect();
        if !members.is_empty() && !non.is_empty() {
            out.push((u, members, non));
        }
        Ok(())
    };
    match request {
        UnlearnRequest::Meta { removals } => {
            for r in removals {
                let g = &state.clients[state.client_index(r.client_id)?].graph;
                let train = &g.masks().train;
                let members: Vec<usize> =
                    r.affected_nodes().into_iter().filter(|v| train.binary_search(v).is_ok()).collect();
                push(r.client_id, members)?;
            }
        }
        UnlearnRequest::Client { departing } => {
            for &u in departing {
                let g = &state.clients[state.client_index(u)?].graph;
                push(u, g.masks().train.clone())?;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct UnlearnRun {
    pub request: UnlearnRequest,
    pub outcome: UnlearnOutcome<f64>,
    pub retrain: Option<FederationState<f64>>,
    pub report: MetricsReport,
}

/// Accuracy of each client's own params on its own graph.
fn own_params_block(state: &FederationState<f64>) -> Result<AccuracyBlock> {
    let mut per_client = Vec::new();
    let (mut correct, mut total, mut sum, mut count) = (0usize, 0usize, 0.0, 0usize);
    for c in &state.clients {
        let test = &c.graph.masks().test;
        let acc = if test.is_empty() {
            None
        } else {
            let hits = crate::eval::correct_count(&c.params, &c.graph, test)?;
            correct += hits;
            total += test.len();
            let a = hits as f64 / test.len() as f64;
            sum += a;
            count += 1;
            Some(a)
        };
        per_client.push(ClientAccuracy { client: c.id, test: acc });
    }
    if total == 0 {
        return Err(FguError::Empty("no test nodes".into()));
    }
    Ok(AccuracyBlock { global_test: correct as f64 / total as f64, mean_local_test: sum / count as f64, per_client })
}

/// Runs the pipeline and, when enabled, the retrain oracle, MIA and distance
/// diagnostics. Every model is scored on the retained clients' graphs.
pub fn run_unlearn(cfg: &ExperimentConfig, trained: &FederationState<f64>, request: UnlearnRequest) -> Result<UnlearnRun> {
    let stages = cfg.stage_config();
    let mut report = base_report(cfg, "unlearn");
    report.request = Some(serde_json::to_value(&request).map_err(|e| FguError::json("request", e))?);

    let start = Instant::now();
    let outcome = run_pipeline(trained, &request, &stages, cfg.workers)?;
    report.timings.insert("unlearn".into(), secs(start));
    for (stage, t) in outcome.timings.entries() {
        report.timings.insert(format!("stage_{stage}"), t);
    }

    let retrain = if cfg.eval.retrain {
        let start = Instant::now();
        let r = retrain_oracle(trained, &request, cfg.workers)?;
        report.timings.insert("retrain".into(), secs(start));
        Some(r)
    } else {
        None
    };

    let views = client_views(&outcome.state);
    report.accuracy.insert("original".into(), AccuracyBlock::measure(&trained.global, &views)?);
    report.accuracy.insert("unlearned".into(), AccuracyBlock::measure(&outcome.global, &views)?);
    report.accuracy.insert("unlearned_local".into(), own_params_block(&outcome.state)?);
    if let Some(r) = &retrain {
        report.accuracy.insert("retrain".into(), AccuracyBlock::measure(&r.global, &views)?);
    }

    if cfg.eval.mia {
        let mut models: Vec<(&str, &ModelParams<f64>)> = vec![("original", &trained.global), ("unlearned", &outcome.global)];
        if let Some(r) = &retrain {
            models.push(("retrain", &r.global));
        }
        let sets = membership_sets(trained, &request)?;
        for (name, params) in &models {
            let (mut pooled_m, mut pooled_n) = (Vec::new(), Vec::new());
            for (u, members, non) in &sets {
                let g = &trained.clients[trained.client_index(*u)?].graph;
                let ms = membership_scores(params, members, g)?;
                let ns = membership_scores(params, non, g)?;
                report.mia.push(MiaEntry {
                    model: name.to_string(),
                    client: Some(*u),
                    members: ms.len(),
                    non_members: ns.len(),
                    result: mia_from_scores(&ms, &ns)?,
                });
                pooled_m.extend(ms);
                pooled_n.extend(ns);
            }
            if !sets.is_empty() {
                report.mia.push(MiaEntry {
                    model: name.to_string(),
                    client: None,
                    members: pooled_m.len(),
                    non_members: pooled_n.len(),
                    result: mia_from_scores(&pooled_m, &pooled_n)?,
                });
            }
        }
    }

    if cfg.eval.distance {
        if let Some(r) = &retrain {
            let graphs: Vec<&Graph<f64>> = views.iter().map(|v| v.1).collect();
            let init = &trained.history[0];
            report.distance = Some(DistanceBlock {
                l2: outcome.global.l2_distance(&r.global)?,
                agreement: agreement_over(&outcome.global, &r.global, graphs.iter().copied())?,
                random_l2: init.l2_distance(&r.global)?,
                random_agreement: agreement_over(init, &r.global, graphs.iter().copied())?,
            });
        }
    }

    report.influenced = outcome.influenced.clone();
    report.prototypes = outcome.requesters.iter().flat_map(|r| r.prototypes.iter().cloned()).collect();
    info!("unlearn done: influenced {:?}", report.influenced);
    Ok(UnlearnRun { request, outcome, retrain, report })
}

#[derive(Clone, Debug)]
pub struct AttackRun {
    pub clean: FederationState<f64>,
    pub poisoned: FederationState<f64>,
    pub poison: Vec<Vec<Edge>>,
    pub outcome: UnlearnOutcome<f64>,
    pub report: MetricsReport,
}

/// Poisons every client with heterophilous edges, trains, then unlearns the
/// poison as an edge-level meta request. Accuracies are pooled test
/// accuracies of the global model on the graphs each model is deployed on.
pub fn run_attack(cfg: &ExperimentConfig, data: &FederatedData) -> Result<AttackRun> {
    let mut report = base_report(cfg, "attack");
    let start = Instant::now();
    let clean = train_federation(cfg, data.clients.clone())?;
    report.timings.insert("train_clean".into(), secs(start));

    let (poisoned_graphs, poison) = inject_edge_attack(&data.clients, cfg.attack_ratio, cfg.seeds.data)?;
    let start = Instant::now();
    let poisoned = train_federation(cfg, poisoned_graphs)?;
    report.timings.insert("train_poisoned".into(), secs(start));

    let removals: Vec<MetaRemoval> = poisoned
        .clients
        .iter()
        .zip(&poison)
        .filter(|(_, e)| !e.is_empty())
        .map(|(c, e)| MetaRemoval { removed_edges: e.clone(), ..MetaRemoval::new(c.id) })
        .collect();
    let request = UnlearnRequest::Meta { removals };
    report.request = Some(serde_json::to_value(&request).map_err(|e| FguError::json("request", e))?);

    let start = Instant::now();
    let outcome = run_pipeline(&poisoned, &request, &cfg.stage_config(), cfg.workers)?;
    report.timings.insert("unlearn".into(), secs(start));
    for (stage, t) in outcome.timings.entries() {
        report.timings.insert(format!("stage_{stage}"), t);
    }

    let clean_views = client_views(&clean);
    let clean_accuracy = pooled_test_accuracy(&clean.global, clean_views.iter().map(|v| v.1))?;
    let poisoned_accuracy = pooled_test_accuracy(&poisoned.global, poisoned.clients.iter().map(|c| &c.graph))?;
    let recovered_accuracy = pooled_test_accuracy(&outcome.global, outcome.state.clients.iter().map(|c| &c.graph))?;
    report.accuracy.insert("clean".into(), AccuracyBlock::measure(&clean.global, &clean_views)?);
    report.accuracy.insert("poisoned".into(), AccuracyBlock::measure(&poisoned.global, &client_views(&poisoned))?);
    report.accuracy.insert("recovered".into(), AccuracyBlock::measure(&outcome.global, &client_views(&outcome.state))?);
    report.attack = Some(AttackBlock {
        ratio: cfg.attack_ratio,
        injected: poisoned.clients.iter().zip(&poison).map(|(c, e)| ClientEdges { client: c.id, edges: e.clone() }).collect(),
        clean_accuracy,
        poisoned_accuracy,
        recovered_accuracy,
    });
    report.influenced = outcome.influenced.clone();
    Ok(AttackRun { clean, poisoned, poison, outcome, report })
}

/// Accuracy of stored params on every client of a state.
pub fn evaluate_params(
    cfg: &ExperimentConfig,
    models: &BTreeMap<String, ModelParams<f64>>,
    state: &FederationState<f64>,
) -> Result<MetricsReport> {
    let mut report = base_report(cfg, "evaluate");
    let views = client_views(state);
    for (name, params) in models {
        report.accuracy.insert(name.clone(), AccuracyBlock::measure(params, &views)?);
    }
    Ok(report)
}
