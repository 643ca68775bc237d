//! Accuracy, membership inference, edge poisoning and model comparison.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FguError, Result};
use crate::gnn::loss::node_cross_entropy;
use crate::gnn::{forward, GraphInput, ModelParams, Propagation};
use crate::graph::{Edge, Graph};
use crate::linalg::{argmax, Matrix};
use crate::prototype::PrototypeRecord;
use crate::scalar::Scalar;

pub fn logits<T: Scalar>(params: &ModelParams<T>, graph: &Graph<T>) -> Result<Matrix<T>> {
    let prop = Propagation::from_graph(graph);
    forward(params, &GraphInput::new(graph.features(), &prop)?)
}

/// Argmax class per node, lowest class on ties.
pub fn predictions<T: Scalar>(params: &ModelParams<T>, graph: &Graph<T>) -> Result<Vec<usize>> {
    let z = logits(params, graph)?;
    Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
}

/// Number of `mask` nodes predicted correctly.
pub fn correct_count<T: Scalar>(params: &ModelParams<T>, graph: &Graph<T>, mask: &[usize]) -> Result<usize> {
    let pred = predictions(params, graph)?;
    let labels = graph.labels();
    Ok(mask.iter().filter(|&&i| pred[i] == labels[i]).count())
}

pub fn accuracy<T: Scalar>(params: &ModelParams<T>, graph: &Graph<T>, mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(FguError::Empty("accuracy mask".into()));
    }
    if let Some(&n) = mask.iter().find(|&&n| n >= graph.num_nodes()) {
        return Err(FguError::InvalidArgument(format!("mask node {n} of {}", graph.num_nodes())));
    }
    Ok(correct_count(params, graph, mask)? as f64 / mask.len() as f64)
}

/// Test accuracy pooled over every graph's test mask.
pub fn pooled_test_accuracy<'a, T: Scalar + 'a>(
    params: &ModelParams<T>,
    graphs: impl IntoIterator<Item = &'a Graph<T>>,
) -> Result<f64> {
    let (mut hit, mut total) = (0, 0);
    for g in graphs {
        let test = &g.masks().test;
        if test.is_empty() {
            continue;
        }
        hit += correct_count(params, g, test)?;
        total += test.len();
    }
    if total == 0 {
        return Err(FguError::Empty("no test nodes".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Per-graph test accuracy (`None` for empty test masks) and their mean.
pub fn local_test_accuracies<'a, T: Scalar + 'a>(
    params: &ModelParams<T>,
    graphs: impl IntoIterator<Item = &'a Graph<T>>,
) -> Result<(Vec<Option<f64>>, f64)> {
    let mut per = Vec::new();
    for g in graphs {
        let test = &g.masks().test;
        per.push(if test.is_empty() { None } else { Some(accuracy(params, g, test)?) });
    }
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(FguError::Empty("no client has test nodes".into()));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    Ok((per, mean))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaResult {
    /// Balanced accuracy `(TPR + TNR)/2` at the Youden threshold.
    pub accuracy: f64,
    pub auc: f64,
    /// Nodes scoring at or above this are called members.
    pub threshold: f64,
}

/// `P(member > non-member) + ½ P(tie)`, by ranks.
pub fn rank_auc(members: &[f64], non_members: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = members.iter().map(|&s| (s, true)).chain(non_members.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += mean_rank * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (m, n) = (members.len() as f64, non_members.len() as f64);
    (rank_sum - m * (m + 1.0) / 2.0) / (m * n)
}

/// ROC points `(FPR, TPR)` for thresholds at every distinct score, descending.
fn roc_points(members: &[f64], non_members: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut thresholds: Vec<f64> = members.iter().chain(non_members).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (m, n) = (members.len() as f64, non_members.len() as f64);
    let mut pts = vec![(0.0, 0.0, f64::INFINITY)];
    for t in thresholds {
        let tpr = members.iter().filter(|&&s| s >= t).count() as f64 / m;
        let fpr = non_members.iter().filter(|&&s| s >= t).count() as f64 / n;
        pts.push((fpr, tpr, t));
    }
    pts
}

/// Area under the ROC polyline by the trapezoid rule.
pub fn trapezoid_auc(members: &[f64], non_members: &[f64]) -> f64 {
    roc_points(members, non_members).windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Threshold attack on precomputed membership scores (higher = member).
pub fn mia_from_scores(members: &[f64], non_members: &[f64]) -> Result<MiaResult> {
    if members.is_empty() || non_members.is_empty() {
        return Err(FguError::Empty("membership inference needs members and non-members".into()));
    }
    let auc = rank_auc(members, non_members);
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for (fpr, tpr, t) in roc_points(members, non_members) {
        if tpr - fpr > best.0 {
            best = (tpr - fpr, t);
        }
    }
    Ok(MiaResult { accuracy: (1.0 + best.0) / 2.0, auc, threshold: best.1 })
}

/// Loss-threshold membership inference: score = −CE at the true label.
pub fn mia_attack<T: Scalar>(
    params: &ModelParams<T>,
    members: &[usize],
    non_members: &[usize],
    graph: &Graph<T>,
) -> Result<MiaResult> {
    let m: HashSet<usize> = members.iter().copied().collect();
    if non_members.iter().any(|n| m.contains(n)) {
        return Err(FguError::InvalidArgument("member and non-member sets overlap".into()));
    }
    if let Some(&n) = members.iter().chain(non_members).find(|&&n| n >= graph.num_nodes()) {
        return Err(FguError::InvalidArgument(format!("node {n} of {}", graph.num_nodes())));
    }
    let ms = membership_scores(params, members, graph)?;
    let ns = membership_scores(params, non_members, graph)?;
    mia_from_scores(&ms, &ns)
}

/// Attack score of each node: −CE at its label.
pub fn membership_scores<T: Scalar>(params: &ModelParams<T>, nodes: &[usize], graph: &Graph<T>) -> Result<Vec<f64>> {
    if let Some(&n) = nodes.iter().find(|&&n| n >= graph.num_nodes()) {
        return Err(FguError::InvalidArgument(format!("node {n} of {}", graph.num_nodes())));
    }
    let z = logits(params, graph)?;
    Ok(nodes.iter().map(|&i| -node_cross_entropy(&z, graph.labels(), i).as_f64()).collect())
}

/// Adds `⌈ratio·|E_i|⌉` new edges to every graph, heterophilous pairs first.
pub fn inject_edge_attack<T: Scalar>(graphs: &[Graph<T>], ratio: f64, seed: u64) -> Result<(Vec<Graph<T>>, Vec<Vec<Edge>>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(FguError::InvalidArgument(format!("poison ratio {ratio} not in [0,1]")));
    }
    let mut out = Vec::with_capacity(graphs.len());
    let mut lists = Vec::with_capacity(graphs.len());
    for (ci, g) in graphs.iter().enumerate() {
        let want = (ratio * g.edges().len() as f64).ceil() as usize;
        if want == 0 {
            out.push(g.clone());
            lists.push(Vec::new());
            continue;
        }
        let n = g.num_nodes();
        let labels = g.labels();
        let (mut hetero, mut homo) = (Vec::new(), Vec::new());
        for u in 0..n {
            for v in u + 1..n {
                if g.has_edge(u, v) {
                    continue;
                }
                if labels[u] != labels[v] {
                    hetero.push((u, v));
                } else {
                    homo.push((u, v));
                }
            }
        }
        if hetero.len() + homo.len() < want {
            return Err(FguError::InvalidArgument(format!(
                "client {ci}: {want} poison edges requested but only {} free pairs",
                hetero.len() + homo.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64));
        hetero.shuffle(&mut rng);
        homo.shuffle(&mut rng);
        let mut chosen: Vec<Edge> = hetero.into_iter().chain(homo).take(want).collect();
        chosen.sort_unstable();
        out.push(g.with_added_edges(&chosen)?);
        lists.push(chosen);
    }
    Ok((out, lists))
}

/// Flattened L2 distance and argmax agreement on `probe`.
pub fn model_distance<T: Scalar>(a: &ModelParams<T>, b: &ModelParams<T>, probe: &Graph<T>) -> Result<(f64, f64)> {
    let l2 = a.l2_distance(b)?.as_f64();
    let (pa, pb) = (predictions(a, probe)?, predictions(b, probe)?);
    if pa.is_empty() {
        return Err(FguError::Empty("probe graph".into()));
    }
    let agree = pa.iter().zip(&pb).filter(|(x, y)| x == y).count() as f64 / pa.len() as f64;
    Ok((l2, agree))
}

/// Mean agreement over several probe graphs, weighted by node count.
pub fn agreement_over<'a, T: Scalar + 'a>(
    a: &ModelParams<T>,
    b: &ModelParams<T>,
    probes: impl IntoIterator<Item = &'a Graph<T>>,
) -> Result<f64> {
    let (mut same, mut total) = (0, 0);
    for g in probes {
        let (pa, pb) = (predictions(a, g)?, predictions(b, g)?);
        same += pa.iter().zip(&pb).filter(|(x, y)| x == y).count();
        total += pa.len();
    }
    if total == 0 {
        return Err(FguError::Empty("probe graphs".into()));
    }
    Ok(same as f64 / total as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientAccuracy {
    pub client: usize,
    pub test: Option<f64>,
}

/// Accuracy of one model across the federation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBlock {
    /// Pooled over every client's test nodes.
    pub global_test: f64,
    /// Mean of per-client test accuracies.
    pub mean_local_test: f64,
    pub per_client: Vec<ClientAccuracy>,
}

impl AccuracyBlock {
    pub fn measure<T: Scalar>(params: &ModelParams<T>, clients: &[(usize, &Graph<T>)]) -> Result<Self> {
        let global_test = pooled_test_accuracy(params, clients.iter().map(|c| c.1))?;
        let (per, mean_local_test) = local_test_accuracies(params, clients.iter().map(|c| c.1))?;
        let per_client = clients.iter().zip(per).map(|(c, test)| ClientAccuracy { client: c.0, test }).collect();
        Ok(Self { global_test, mean_local_test, per_client })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaEntry {
    pub model: String,
    /// `None` pools the forgotten nodes of every requester.
    pub client: Option<usize>,
    pub members: usize,
    pub non_members: usize,
    #[serde(flatten)]
    pub result: MiaResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceBlock {
    /// L2 distance between the unlearned and retrained params.
    pub l2: f64,
    pub agreement: f64,
    /// Same measures for a freshly initialized model against the retrain oracle.
    pub random_l2: f64,
    pub random_agreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEdges {
    pub client: usize,
    pub edges: Vec<Edge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackBlock {
    pub ratio: f64,
    pub injected: Vec<ClientEdges>,
    pub clean_accuracy: f64,
    pub poisoned_accuracy: f64,
    pub recovered_accuracy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub request: u64,
}

/// Everything a run reports. `timings` are wall-clock seconds and are the
/// only non-deterministic values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run: String,
    pub seeds: Seeds,
    pub config: serde_json::Value,
    pub accuracy: BTreeMap<String, AccuracyBlock>,
    pub mia: Vec<MiaEntry>,
    pub distance: Option<DistanceBlock>,
    pub influenced: Vec<usize>,
    pub request: Option<serde_json::Value>,
    pub prototypes: Vec<PrototypeRecord>,
    pub attack: Option<AttackBlock>,
    pub timings: BTreeMap<String, f64>,
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run: String,
    pub phase: String,
    pub metric: String,
    pub value: f64,
}

impl MetricsReport {
    /// Flat `(phase, metric, value)` view, excluding timings.
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        let mut push = |phase: &str, metric: String, value: f64| {
            rows.push(MetricRow { run: self.run.clone(), phase: phase.to_string(), metric, value })
        };
        for (model, a) in &self.accuracy {
            push(model, "global_test_accuracy".into(), a.global_test);
            push(model, "mean_local_test_accuracy".into(), a.mean_local_test);
            for c in &a.per_client {
                if let Some(v) = c.test {
                    push(model, format!("client_{}_test_accuracy", c.client), v);
                }
            }
        }
        for m in &self.mia {
            let scope = m.client.map_or("pooled".to_string(), |c| format!("client_{c}"));
            push(&m.model, format!("mia_auc_{scope}"), m.result.auc);
            push(&m.model, format!("mia_accuracy_{scope}"), m.result.accuracy);
        }
        if let Some(d) = &self.distance {
            push("distance", "l2".into(), d.l2);
            push("distance", "agreement".into(), d.agreement);
            push("distance", "random_l2".into(), d.random_l2);
            push("distance", "random_agreement".into(), d.random_agreement);
        }
        if let Some(a) = &self.attack {
            push("attack", "clean_accuracy".into(), a.clean_accuracy);
            push("attack", "poisoned_accuracy".into(), a.poisoned_accuracy);
            push("attack", "recovered_accuracy".into(), a.recovered_accuracy);
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,phase,metric,value\n");
        for r in self.metric_rows() {
            s.push_str(&format!("{},{},{},{:?}\n", r.run, r.phase, r.metric, r.value));
        }
        s
    }

    /// Bit patterns of every metric value, for reproducibility checks.
    pub fn metric_bits(&self) -> Vec<(String, u64)> {
        self.metric_rows().into_iter().map(|r| (format!("{}/{}", r.phase, r.metric), r.value.to_bits())).collect()
    }
}
