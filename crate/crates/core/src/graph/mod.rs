//! Undirected attributed graphs, client partitions and unlearning mutations.

mod io;
mod louvain;
mod sbm;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{FguError, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub use io::{load_graph, save_graph, FeatureStorage};
pub use louvain::{louvain_communities, louvain_partition, modularity, LouvainTrace};
pub use sbm::{sbm_generate, SbmConfig};

/// Unordered node pair stored with `u < v`.
pub type Edge = (usize, usize);

/// Disjoint train/val/test node-id sets, each sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Masks {
    #[serde(default)]
    pub train: Vec<usize>,
    #[serde(default)]
    pub val: Vec<usize>,
    #[serde(default)]
    pub test: Vec<usize>,
}

impl Masks {
    fn normalized(mut self, num_nodes: usize) -> Result<Self> {
        let mut seen = vec![false; num_nodes];
        for (name, set) in [("train", &mut self.train), ("val", &mut self.val), ("test", &mut self.test)] {
            set.sort_unstable();
            for &n in set.iter() {
                if n >= num_nodes {
                    return Err(FguError::InvalidGraph(format!(
                        "{name} mask references node {n} but graph has {num_nodes} nodes"
                    )));
                }
                if seen[n] {
                    return Err(FguError::InvalidGraph(format!(
                        "node {n} appears twice across masks ({name})"
                    )));
                }
                seen[n] = true;
            }
        }
        Ok(self)
    }

    fn remap(&self, map: &[Option<usize>]) -> Masks {
        let f = |v: &Vec<usize>| -> Vec<usize> {
            let mut out: Vec<usize> = v.iter().filter_map(|&n| map[n]).collect();
            out.sort_unstable();
            out
        };
        Masks { train: f(&self.train), val: f(&self.val), test: f(&self.test) }
    }
}

/// Compressed neighbor lists, built on demand from the sorted edge list.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl NeighborIndex {
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.targets[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }
}

/// A client's (or the global) attributed graph.
///
/// Invariants: edge endpoints are in range, stored once as `(u, v)` with
/// `u < v` in sorted order, masks are disjoint and sorted, and the feature
/// matrix has one row per node. `node_ids` carries each node's id in the
/// graph it was derived from, so partitions and removals stay auditable.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph<T> {
    num_classes: usize,
    features: Matrix<T>,
    labels: Vec<usize>,
    edges: Vec<Edge>,
    masks: Masks,
    node_ids: Vec<usize>,
}

impl<T: Scalar> Graph<T> {
    pub fn new(
        features: Matrix<T>,
        labels: Vec<usize>,
        num_classes: usize,
        edges: Vec<Edge>,
        masks: Masks,
    ) -> Result<Self> {
        let n = labels.len();
        let ids = (0..n).collect();
        Self::with_node_ids(features, labels, num_classes, edges, masks, ids)
    }

    pub fn with_node_ids(
        features: Matrix<T>,
        labels: Vec<usize>,
        num_classes: usize,
        edges: Vec<Edge>,
        masks: Masks,
        node_ids: Vec<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        if features.rows() != n {
            return Err(FguError::InvalidGraph(format!(
                "feature matrix has {} rows for {n} nodes",
                features.rows()
            )));
        }
        if node_ids.len() != n {
            return Err(FguError::InvalidGraph(format!("{} node ids for {n} nodes", node_ids.len())));
        }
        if let Some((i, &c)) = labels.iter().enumerate().find(|(_, &c)| c >= num_classes) {
            return Err(FguError::InvalidGraph(format!(
                "node {i} has label {c} but num_classes is {num_classes}"
            )));
        }
        let edges = canonical_edges(edges, n)?;
        let masks = masks.normalized(n)?;
        Ok(Self { num_classes, features, labels, edges, masks, node_ids })
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    pub fn node_ids(&self) -> &[usize] {
        &self.node_ids
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let e = if u < v { (u, v) } else { (v, u) };
        self.edges.binary_search(&e).is_ok()
    }

    pub fn neighbor_index(&self) -> NeighborIndex {
        let n = self.num_nodes();
        let mut deg = vec![0usize; n];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &deg {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..n].to_vec();
        let mut targets = vec![0; offsets[n]];
        for &(u, v) in &self.edges {
            targets[fill[u]] = v;
            fill[u] += 1;
            targets[fill[v]] = u;
            fill[v] += 1;
        }
        for i in 0..n {
            targets[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        NeighborIndex { offsets, targets }
    }

    /// Returns a copy with `extra` edges added. Fails on duplicates.
    pub fn with_added_edges(&self, extra: &[Edge]) -> Result<Self> {
        let mut edges = self.edges.clone();
        edges.extend_from_slice(extra);
        Self::with_node_ids(
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
            edges,
            self.masks.clone(),
            self.node_ids.clone(),
        )
    }

    pub fn with_masks(&self, masks: Masks) -> Result<Self> {
        Self::with_node_ids(
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
            self.edges.clone(),
            masks,
            self.node_ids.clone(),
        )
    }

    /// Dense 0/1 adjacency without self-loops.
    pub fn dense_adjacency(&self) -> Matrix<T> {
        let n = self.num_nodes();
        let mut a = Matrix::zeros(n, n);
        for &(u, v) in &self.edges {
            a.set(u, v, T::one());
            a.set(v, u, T::one());
        }
        a
    }

    /// Induced subgraph on `keep` (must be sorted, unique); nodes re-indexed
    /// densely in ascending order.
    fn induced(&self, keep: &[usize]) -> Result<Self> {
        let mut map = vec![None; self.num_nodes()];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = Some(new);
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|&(u, v)| Some((map[u]?, map[v]?)))
            .collect();
        Self::with_node_ids(
            self.features.select_rows(keep),
            keep.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            edges,
            self.masks.remap(&map),
            keep.iter().map(|&i| self.node_ids[i]).collect(),
        )
    }
}

fn canonical_edges(edges: Vec<Edge>, n: usize) -> Result<Vec<Edge>> {
    let mut out = Vec::with_capacity(edges.len());
    for (u, v) in edges {
        if u >= n || v >= n {
            return Err(FguError::InvalidGraph(format!(
                "edge ({u},{v}) out of range for {n} nodes"
            )));
        }
        if u == v {
            return Err(FguError::InvalidGraph(format!("self-loop ({u},{u})")));
        }
        out.push(if u < v { (u, v) } else { (v, u) });
    }
    out.sort_unstable();
    if let Some(w) = out.windows(2).find(|w| w[0] == w[1]) {
        return Err(FguError::InvalidGraph(format!("duplicate edge ({},{})", w[0].0, w[0].1)));
    }
    Ok(out)
}

/// Assignment of every node of a graph to one of `num_clients` clients.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    assignments: Vec<usize>,
    num_clients: usize,
}

impl Partition {
    pub fn new(assignments: Vec<usize>, num_clients: usize) -> Result<Self> {
        let mut used = vec![false; num_clients];
        for (node, &c) in assignments.iter().enumerate() {
            if c >= num_clients {
                return Err(FguError::InvalidArgument(format!(
                    "node {node} assigned to client {c} of {num_clients}"
                )));
            }
            used[c] = true;
        }
        if let Some(c) = used.iter().position(|u| !u) {
            return Err(FguError::InvalidArgument(format!("client {c} has no nodes")));
        }
        Ok(Self { assignments, num_clients })
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    /// Global node ids assigned to `client`, ascending.
    pub fn members(&self, client: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == client)
            .map(|(n, _)| n)
            .collect()
    }
}

/// Induced subgraph of one client. Cross-client edges are dropped.
pub fn client_subgraph<T: Scalar>(graph: &Graph<T>, partition: &Partition, client: usize) -> Result<Graph<T>> {
    if partition.assignments.len() != graph.num_nodes() {
        return Err(FguError::DimensionMismatch(format!(
            "partition covers {} nodes, graph has {}",
            partition.assignments.len(),
            graph.num_nodes()
        )));
    }
    if client >= partition.num_clients {
        return Err(FguError::InvalidArgument(format!(
            "client {client} of {}",
            partition.num_clients
        )));
    }
    graph.induced(&partition.members(client))
}

/// A node/edge/feature-level unlearning request against one client's graph.
/// Ids are local to that client's graph.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaRemoval {
    pub client_id: usize,
    #[serde(default)]
    pub removed_nodes: Vec<usize>,
    #[serde(default)]
    pub removed_edges: Vec<Edge>,
    #[serde(default)]
    pub feature_masked_nodes: Vec<usize>,
}

impl MetaRemoval {
    pub fn new(client_id: usize) -> Self {
        Self { client_id, ..Default::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.removed_nodes.is_empty() && self.removed_edges.is_empty() && self.feature_masked_nodes.is_empty()
    }

    /// Every node touched by the request: removed nodes, endpoints of
    /// removed edges and feature-masked nodes. Sorted, unique.
    pub fn affected_nodes(&self) -> Vec<usize> {
        let mut set: BTreeSet<usize> = self.removed_nodes.iter().copied().collect();
        for &(u, v) in &self.removed_edges {
            set.insert(u);
            set.insert(v);
        }
        set.extend(self.feature_masked_nodes.iter().copied());
        set.into_iter().collect()
    }
}

/// Applies a removal and returns the retained graph.
///
/// Feature masking zeroes rows, edge removal deletes the listed pairs and
/// node removal deletes nodes with their incident edges; surviving nodes are
/// re-indexed in ascending order.
pub fn apply_meta_removal<T: Scalar>(graph: &Graph<T>, removal: &MetaRemoval) -> Result<Graph<T>> {
    let n = graph.num_nodes();
    for &v in removal.removed_nodes.iter().chain(&removal.feature_masked_nodes) {
        if v >= n {
            return Err(FguError::InvalidArgument(format!(
                "removal references node {v} but client {} has {n} nodes",
                removal.client_id
            )));
        }
    }
    let mut drop_edges: Vec<Edge> = Vec::with_capacity(removal.removed_edges.len());
    for &(u, v) in &removal.removed_edges {
        if !graph.has_edge(u, v) {
            return Err(FguError::InvalidArgument(format!(
                "removal references missing edge ({u},{v}) in client {}",
                removal.client_id
            )));
        }
        drop_edges.push(if u < v { (u, v) } else { (v, u) });
    }
    if removal.is_empty() {
        return Ok(graph.clone());
    }
    drop_edges.sort_unstable();

    let mut features = graph.features.clone();
    for &v in &removal.feature_masked_nodes {
        features.row_mut(v).iter_mut().for_each(|x| *x = T::zero());
    }
    let edges = graph
        .edges
        .iter()
        .copied()
        .filter(|e| drop_edges.binary_search(e).is_err())
        .collect();
    let edited = Graph::with_node_ids(
        features,
        graph.labels.clone(),
        graph.num_classes,
        edges,
        graph.masks.clone(),
        graph.node_ids.clone(),
    )?;
    let removed: BTreeSet<usize> = removal.removed_nodes.iter().copied().collect();
    if removed.is_empty() {
        return Ok(edited);
    }
    let keep: Vec<usize> = (0..n).filter(|v| !removed.contains(v)).collect();
    edited.induced(&keep)
}
