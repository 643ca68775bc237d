//! FedAvg round protocol over in-process clients.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{FguError, Result};
use crate::gnn::loss::cross_entropy;
use crate::gnn::{forward, train_local, Backbone, EmbeddingSpace, GraphInput, ModelParams, Propagation, DEFAULT_HIDDEN};
use crate::graph::{load_graph, save_graph, FeatureStorage, Graph};
use crate::prototype::{compute_prototypes, PrototypeSet};
use crate::scalar::Scalar;

/// What counts as a client's data size in the weighted average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeWeighting {
    #[default]
    TrainNodes,
    AllNodes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub backbone: Backbone,
    pub hidden: usize,
    /// Seed of the initial global params.
    pub seed: u64,
    pub weighting: SizeWeighting,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            local_epochs: 3,
            lr: 1e-3,
            backbone: Backbone::Gcn,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
            weighting: SizeWeighting::TrainNodes,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Client<T> {
    /// Stable id; survives removal of other clients.
    pub id: usize,
    pub graph: Graph<T>,
    pub params: ModelParams<T>,
    pub prototypes: Option<PrototypeSet<T>>,
}

impl<T: Scalar> Client<T> {
    pub fn data_size(&self, weighting: SizeWeighting) -> usize {
        match weighting {
            SizeWeighting::TrainNodes => self.graph.masks().train.len(),
            SizeWeighting::AllNodes => self.graph.num_nodes(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FederationState<T> {
    pub round: usize,
    pub global: ModelParams<T>,
    pub clients: Vec<Client<T>>,
    pub config: FederationConfig,
    /// Global params after each round; entry 0 is the initialization.
    pub history: Vec<ModelParams<T>>,
}

/// Weighted parameter average `Σ (n_i / Σ n_j) θ_i`.
///
/// Zero-weight entries are skipped. Each output entry is formed as
/// `a + Σ w_i (θ_i − a)` with `a` the smallest contributing value and the
/// terms summed in sorted order, so the result does not depend on client
/// order and identical inputs come back unchanged.
pub fn aggregate<T: Scalar>(entries: &[(&ModelParams<T>, f64)]) -> Result<ModelParams<T>> {
    let first = entries.first().ok_or_else(|| FguError::Empty("no client params to aggregate".into()))?;
    for (i, (p, w)) in entries.iter().enumerate() {
        first.0.check_layout(p)?;
        if !(w.is_finite() && *w >= 0.0) {
            return Err(FguError::InvalidArgument(format!("client {i} weight {w}")));
        }
    }
    let mut live: Vec<(&ModelParams<T>, f64)> = entries.iter().filter(|(_, w)| *w > 0.0).copied().collect();
    if live.is_empty() {
        return Err(FguError::InvalidArgument("all aggregation weights are zero".into()));
    }
    let mut ws: Vec<f64> = live.iter().map(|e| e.1).collect();
    ws.sort_by(f64::total_cmp);
    let total: f64 = ws.iter().sum();
    for e in &mut live {
        e.1 /= total;
    }

    let mut out = first.0.clone();
    let mut terms: Vec<T> = Vec::with_capacity(live.len());
    for (t, tensor) in out.tensors_mut().iter_mut().enumerate() {
        for (k, slot) in tensor.value.as_mut_slice().iter_mut().enumerate() {
            let anchor = live
                .iter()
                .map(|(p, _)| p.tensors()[t].value.as_slice()[k])
                .fold(T::infinity(), |m, x| if x < m { x } else { m });
            terms.clear();
            terms.extend(live.iter().map(|(p, w)| T::lit(*w) * (p.tensors()[t].value.as_slice()[k] - anchor)));
            terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            *slot = anchor + terms.iter().copied().sum::<T>();
        }
    }
    Ok(out)
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| FguError::InvalidArgument(format!("worker pool: {e}")))
}

/// Runs `f` over `items` on a pool bounded by `workers`, keeping input order.
pub fn parallel_map<I: Sync, O: Send>(
    workers: Option<usize>,
    items: &[I],
    f: impl Fn(&I) -> Result<O> + Sync + Send,
) -> Result<Vec<O>> {
    if workers == Some(1) || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    pool(workers)?.install(|| items.par_iter().map(f).collect())
}

impl<T: Scalar> FederationState<T> {
    /// Fresh federation with random global params broadcast to every client.
    pub fn new(graphs: Vec<Graph<T>>, config: FederationConfig) -> Result<Self> {
        Self::with_ids(graphs.into_iter().enumerate().collect(), config)
    }

    /// Like [`FederationState::new`] with explicit client ids.
    pub fn with_ids(graphs: Vec<(usize, Graph<T>)>, config: FederationConfig) -> Result<Self> {
        let first = &graphs.first().ok_or_else(|| FguError::Empty("no clients".into()))?.1;
        let (d_in, c) = (first.num_features(), first.num_classes());
        for (i, g) in &graphs {
            if g.num_features() != d_in || g.num_classes() != c {
                return Err(FguError::DimensionMismatch(format!(
                    "client {i} has {} features / {} classes, the first client has {d_in} / {c}",
                    g.num_features(),
                    g.num_classes()
                )));
            }
        }
        let global = ModelParams::init(config.backbone, d_in, config.hidden, c, config.seed)?;
        let clients: Vec<Client<T>> = graphs
            .into_iter()
            .map(|(id, graph)| Client { id, graph, params: global.clone(), prototypes: None })
            .collect();
        let state = Self { round: 0, history: vec![global.clone()], global, clients, config };
        if state.total_size() == 0 {
            return Err(FguError::InvalidArgument("no client has training data".into()));
        }
        Ok(state)
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, id: usize) -> Option<&Client<T>> {
        self.clients.iter().find(|c| c.id == id)
    }

    pub fn client_index(&self, id: usize) -> Result<usize> {
        self.clients
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| FguError::InvalidArgument(format!("no client with id {id}")))
    }

    pub fn client_ids(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.id).collect()
    }

    pub fn total_size(&self) -> usize {
        self.clients.iter().map(|c| c.data_size(self.config.weighting)).sum()
    }

    /// Aggregates the current client params into a global model.
    pub fn aggregate_clients(&self) -> Result<ModelParams<T>> {
        let entries: Vec<(&ModelParams<T>, f64)> =
            self.clients.iter().map(|c| (&c.params, c.data_size(self.config.weighting) as f64)).collect();
        aggregate(&entries)
    }

    /// One FedAvg round: broadcast, local training, weighted aggregation.
    /// Clients without training nodes keep the broadcast params.
    pub fn run_round(&mut self, workers: Option<usize>) -> Result<()> {
        let global = &self.global;
        let (epochs, lr) = (self.config.local_epochs, self.config.lr);
        let trained = parallel_map(workers, &self.clients, |c| {
            if c.graph.masks().train.is_empty() || epochs == 0 {
                return Ok(global.clone());
            }
            train_local(global, &c.graph, epochs, lr).map(|(p, losses)| {
                debug!("client {} local losses {:?}", c.id, losses);
                p
            })
        })?;
        for (c, p) in self.clients.iter_mut().zip(trained) {
            self.global.check_layout(&p)?;
            c.params = p;
        }
        let next = self.aggregate_clients()?;
        self.global.check_layout(&next)?;
        self.global = next;
        self.round += 1;
        self.history.push(self.global.clone());
        info!("round {} done", self.round);
        Ok(())
    }

    pub fn run_training(&mut self, rounds: usize, workers: Option<usize>) -> Result<()> {
        for _ in 0..rounds {
            self.run_round(workers)?;
        }
        Ok(())
    }

    /// Mean train cross-entropy of the global model, weighted by data size.
    pub fn weighted_train_loss(&self) -> Result<f64> {
        let mut acc = 0.0;
        let mut total = 0.0;
        for c in &self.clients {
            let train = &c.graph.masks().train;
            if train.is_empty() {
                continue;
            }
            let prop = Propagation::from_graph(&c.graph);
            let logits = forward(&self.global, &GraphInput::new(c.graph.features(), &prop)?)?;
            let (l, _) = cross_entropy(&logits, c.graph.labels(), train)?;
            let w = c.data_size(self.config.weighting) as f64;
            acc += w * l.as_f64();
            total += w;
        }
        if total == 0.0 {
            return Err(FguError::Empty("no training nodes".into()));
        }
        Ok(acc / total)
    }

    /// Recomputes every client's train-node prototypes with its current params.
    pub fn collect_prototypes(&mut self, space: EmbeddingSpace, workers: Option<usize>) -> Result<()> {
        let sets = parallel_map(workers, &self.clients, |c| {
            let train = &c.graph.masks().train;
            if train.is_empty() {
                return Ok(None);
            }
            compute_prototypes(&c.params, &c.graph, train, space, c.id).map(Some)
        })?;
        for (c, s) in self.clients.iter_mut().zip(sets) {
            c.prototypes = s;
        }
        Ok(())
    }

    pub fn prototype_sets(&self) -> Vec<PrototypeSet<T>> {
        self.clients.iter().filter_map(|c| c.prototypes.clone()).collect()
    }
}

/// `state.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub round: usize,
    pub config: FederationConfig,
    pub client_ids: Vec<usize>,
    pub data_sizes: Vec<usize>,
}

fn round_dir(dir: &Path, t: usize) -> std::path::PathBuf {
    dir.join(format!("round_{t}"))
}

/// Writes `round_<t>/global.{json,bin}` for every round, the latest client
/// params and graphs under `clients/<id>/`, and `state.json`.
pub fn save_state<T: Scalar>(state: &FederationState<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FguError::io(dir, e))?;
    for (t, p) in state.history.iter().enumerate() {
        save_checkpoint(p, round_dir(dir, t).join("global.json"))?;
    }
    for c in &state.clients {
        let cdir = dir.join("clients").join(c.id.to_string());
        save_checkpoint(&c.params, cdir.join("theta.json"))?;
        save_graph(&c.graph, cdir.join("graph.json"), FeatureStorage::Blob)?;
    }
    let file = StateFile {
        round: state.round,
        config: state.config.clone(),
        client_ids: state.client_ids(),
        data_sizes: state.clients.iter().map(|c| c.data_size(state.config.weighting)).collect(),
    };
    let path = dir.join("state.json");
    let text = serde_json::to_string_pretty(&file).map_err(|e| FguError::json(&path, e))?;
    fs::write(&path, text).map_err(|e| FguError::io(&path, e))
}

pub fn load_state<T: Scalar>(dir: &Path) -> Result<FederationState<T>> {
    let path = dir.join("state.json");
    let text = fs::read_to_string(&path).map_err(|e| FguError::io(&path, e))?;
    let file: StateFile = serde_json::from_str(&text).map_err(|e| FguError::json(&path, e))?;
    let mut history = Vec::with_capacity(file.round + 1);
    for t in 0..=file.round {
        history.push(load_checkpoint(round_dir(dir, t).join("global.json"))?);
    }
    let mut clients = Vec::with_capacity(file.client_ids.len());
    for &id in &file.client_ids {
        let cdir = dir.join("clients").join(id.to_string());
        clients.push(Client {
            id,
            graph: load_graph(cdir.join("graph.json"))?,
            params: load_checkpoint(cdir.join("theta.json"))?,
            prototypes: None,
        });
    }
    let global = history.last().cloned().ok_or_else(|| FguError::Load("empty round history".into()))?;
    Ok(FederationState { round: file.round, global, clients, config: file.config, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::Tensor;
    use crate::linalg::Matrix;

    fn scalar(v: f64) -> ModelParams<f64> {
        ModelParams::from_tensors(
            Backbone::Sgc { hops: 1 },
            vec![Tensor { name: "W".into(), value: Matrix::from_vec(1, 1, vec![v]).unwrap() }],
        )
        .unwrap()
    }

    #[test]
    fn hand_weighted_mean() {
        let (a, b) = (scalar(0.0), scalar(4.0));
        let m = aggregate(&[(&a, 1.0), (&b, 3.0)]).unwrap();
        assert_eq!(m.flatten(), vec![3.0]);
    }

    #[test]
    fn degenerate_and_invalid_weights() {
        let (a, b) = (scalar(0.3), scalar(-7.1));
        assert_eq!(aggregate(&[(&a, 5.0), (&b, 0.0)]).unwrap(), a);
        assert!(aggregate(&[(&a, 0.0), (&b, 0.0)]).is_err());
        assert!(aggregate::<f64>(&[]).is_err());
        let other = ModelParams::<f64>::init(Backbone::Gcn, 1, 1, 1, 0).unwrap();
        assert!(aggregate(&[(&a, 1.0), (&other, 1.0)]).is_err());
    }
}
