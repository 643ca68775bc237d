//! JSON graph files with inline or external little-endian `f64` features.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Graph, Masks};
use crate::error::{FguError, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Serialize, Deserialize)]
struct GraphFile {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
    edges: Vec<[usize; 2]>,
    labels: Vec<usize>,
    #[serde(default)]
    masks: Masks,
    features: FeatureField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_ids: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FeatureField {
    Tagged(FeatureSource),
    Bare(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FeatureSource {
    Inline(Vec<Vec<f64>>),
    Blob(String),
}

/// Where [`save_graph`] puts the feature matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureStorage {
    Inline,
    /// Sibling `<stem>.features.bin` file.
    Blob,
}

fn load_err(path: &Path, msg: impl std::fmt::Display) -> FguError {
    FguError::Load(format!("{}: {msg}", path.display()))
}

/// Reads and validates a graph file.
pub fn load_graph<T: Scalar>(path: impl AsRef<Path>) -> Result<Graph<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| FguError::io(path, e))?;
    let file: GraphFile = serde_json::from_str(&text).map_err(|e| load_err(path, format!("malformed header: {e}")))?;
    let n = file.num_nodes;

    if file.labels.len() != n {
        return Err(load_err(path, format!("labels has {} entries, num_nodes is {n}", file.labels.len())));
    }
    if let Some((i, &c)) = file.labels.iter().enumerate().find(|(_, &c)| c >= file.num_classes) {
        return Err(load_err(path, format!("labels[{i}] = {c} out of range (num_classes {})", file.num_classes)));
    }

    let mut seen = std::collections::HashMap::with_capacity(file.edges.len());
    let mut edges = Vec::with_capacity(file.edges.len());
    for (i, &[u, v]) in file.edges.iter().enumerate() {
        if u >= n || v >= n {
            return Err(load_err(path, format!("edges[{i}] = [{u},{v}]: index out of range (num_nodes {n})")));
        }
        if u == v {
            return Err(load_err(path, format!("edges[{i}] = [{u},{v}]: self-loop")));
        }
        let key = (u.min(v), u.max(v));
        if let Some(first) = seen.insert(key, i) {
            return Err(load_err(path, format!("edges[{i}] = [{u},{v}]: duplicate edge (first at edges[{first}])")));
        }
        edges.push(key);
    }

    let d = file.num_features;
    let values: Vec<f64> = match file.features {
        FeatureField::Bare(rows) | FeatureField::Tagged(FeatureSource::Inline(rows)) => {
            if rows.len() != n {
                return Err(load_err(path, format!("features has {} rows, num_nodes is {n}", rows.len())));
            }
            let mut flat = Vec::with_capacity(n * d);
            for (i, r) in rows.into_iter().enumerate() {
                if r.len() != d {
                    return Err(load_err(path, format!("features[{i}] has {} values, num_features is {d}", r.len())));
                }
                flat.extend(r);
            }
            flat
        }
        FeatureField::Tagged(FeatureSource::Blob(rel)) => {
            let blob = path.parent().unwrap_or(Path::new(".")).join(&rel);
            let bytes = fs::read(&blob).map_err(|e| FguError::io(&blob, e))?;
            if bytes.len() != n * d * 8 {
                return Err(load_err(
                    path,
                    format!("blob {rel} has {} bytes, expected {} ({n}x{d} f64)", bytes.len(), n * d * 8),
                ));
            }
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        }
    };
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        return Err(load_err(path, format!("features[{}][{}] is not finite", i / d.max(1), i % d.max(1))));
    }
    let features = Matrix::from_vec(n, d, values.into_iter().map(T::lit).collect())?;
    let node_ids = file.node_ids.unwrap_or_else(|| (0..n).collect());
    Graph::with_node_ids(features, file.labels, file.num_classes, edges, file.masks, node_ids)
        .map_err(|e| load_err(path, e))
}

/// Writes `graph` in the graph file format.
pub fn save_graph<T: Scalar>(graph: &Graph<T>, path: impl AsRef<Path>, storage: FeatureStorage) -> Result<()> {
    let path = path.as_ref();
    let n = graph.num_nodes();
    let d = graph.num_features();
    let features = match storage {
        FeatureStorage::Inline => FeatureSource::Inline(
            (0..n).map(|i| graph.features().row(i).iter().map(|x| x.as_f64()).collect()).collect(),
        ),
        FeatureStorage::Blob => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("graph");
            let rel = format!("{stem}.features.bin");
            let blob = path.parent().unwrap_or(Path::new(".")).join(&rel);
            let mut bytes = Vec::with_capacity(n * d * 8);
            for x in graph.features().as_slice() {
                bytes.extend_from_slice(&x.as_f64().to_le_bytes());
            }
            fs::write(&blob, bytes).map_err(|e| FguError::io(&blob, e))?;
            FeatureSource::Blob(rel)
        }
    };
    let identity = graph.node_ids().iter().enumerate().all(|(i, &id)| i == id);
    let file = GraphFile {
        num_nodes: n,
        num_features: d,
        num_classes: graph.num_classes(),
        edges: graph.edges().iter().map(|&(u, v)| [u, v]).collect(),
        labels: graph.labels().to_vec(),
        masks: graph.masks().clone(),
        features: FeatureField::Tagged(features),
        node_ids: (!identity).then(|| graph.node_ids().to_vec()),
    };
    let text = serde_json::to_string(&file).map_err(|e| FguError::json(path, e))?;
    fs::write(path, text).map_err(|e| FguError::io(path, e))
}
