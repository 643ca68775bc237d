//! Class prototypes, their orthonormal span, and prototype-guided unlearning.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, FguError, Result};
use crate::gnn::loss::PrototypeTarget;
use crate::gnn::{backward, embedding, Adam, EmbeddingSpace, GraphInput, LossSpec, ModelParams, Propagation};
use crate::graph::Graph;
use crate::linalg::{dot, norm2};
use crate::scalar::Scalar;

/// Residual norm below which a Gram-Schmidt candidate counts as dependent.
pub const RANK_TOL: f64 = 1e-8;

/// Default cosine threshold for marking a client as influenced.
pub const DEFAULT_TAU: f64 = 0.8;

/// Mean embedding per class for one client. Absent classes are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<T> {
    pub client_id: usize,
    dim: usize,
    vectors: Vec<Option<Vec<T>>>,
}

/// Flat audit record of one prototype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub client: usize,
    pub class: usize,
    pub vector: Vec<f64>,
}

impl<T: Scalar> PrototypeSet<T> {
    pub fn new(client_id: usize, dim: usize, num_classes: usize) -> Self {
        Self { client_id, dim, vectors: vec![None; num_classes] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn get(&self, class: usize) -> Option<&[T]> {
        self.vectors.get(class).and_then(|v| v.as_deref())
    }

    pub fn set(&mut self, class: usize, vector: Vec<T>) -> Result<()> {
        if class >= self.vectors.len() {
            return Err(FguError::InvalidArgument(format!("class {class} of {}", self.vectors.len())));
        }
        if vector.len() != self.dim {
            return Err(FguError::DimensionMismatch(format!("prototype of length {} in dimension {}", vector.len(), self.dim)));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(FguError::NonFinite { value: f64::NAN, context: format!("prototype of class {class}") });
        }
        self.vectors[class] = Some(vector);
        Ok(())
    }

    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.vectors.len()).filter(|&c| self.vectors[c].is_some()).collect()
    }

    /// `(class, vector)` pairs in ascending class order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.vectors.iter().enumerate().filter_map(|(c, v)| v.as_deref().map(|v| (c, v)))
    }

    pub fn records(&self) -> Vec<PrototypeRecord> {
        self.iter()
            .map(|(class, v)| PrototypeRecord { client: self.client_id, class, vector: v.iter().map(|x| x.as_f64()).collect() })
            .collect()
    }
}

/// Groups `nodes` by label, classes ascending and nodes in the given order.
fn nodes_by_class(labels: &[usize], num_classes: usize, nodes: &[usize]) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); num_classes];
    for &n in nodes {
        groups[labels[n]].push(n);
    }
    groups
}

/// Per-class mean embedding of `nodes`, computed on the full graph.
pub fn compute_prototypes<T: Scalar>(
    params: &ModelParams<T>,
    graph: &Graph<T>,
    nodes: &[usize],
    space: EmbeddingSpace,
    client_id: usize,
) -> Result<PrototypeSet<T>> {
    if nodes.is_empty() {
        return Err(FguError::Empty("prototype node subset".into()));
    }
    if let Some(&n) = nodes.iter().find(|&&n| n >= graph.num_nodes()) {
        return Err(FguError::InvalidArgument(format!("node {n} of {}", graph.num_nodes())));
    }
    let prop = Propagation::from_graph(graph);
    let emb = embedding(params, &GraphInput::new(graph.features(), &prop)?, space)?;
    let mut set = PrototypeSet::new(client_id, emb.cols(), graph.num_classes());
    // Sorting first keeps the sum order independent of how `nodes` is ordered.
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable();
    for (class, members) in nodes_by_class(graph.labels(), graph.num_classes(), &sorted).into_iter().enumerate() {
        if !members.is_empty() {
            set.set(class, crate::gnn::loss::mean_rows(&emb, &members))?;
        }
    }
    Ok(set)
}

/// Unit columns `ṽ_1 … ṽ_M` spanning a prototype space.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthonormalBasis<T> {
    dim: usize,
    vectors: Vec<Vec<T>>,
}

impl<T: Scalar> OrthonormalBasis<T> {
    /// Basis of the zero subspace; projections onto it vanish.
    pub fn empty(dim: usize) -> Self {
        Self { dim, vectors: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<T>] {
        &self.vectors
    }

    /// `max |VᵀV − I|`
    pub fn gram_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.vectors.iter().enumerate() {
            for (j, b) in self.vectors.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(a, b).as_f64() - target).abs());
            }
        }
        worst
    }

    /// `V Vᵀ p`
    pub fn project(&self, p: &[T]) -> Result<Vec<T>> {
        if p.len() != self.dim {
            return Err(FguError::DimensionMismatch(format!("vector of length {} against basis in dimension {}", p.len(), self.dim)));
        }
        let mut out = vec![T::zero(); self.dim];
        for v in &self.vectors {
            let c = dot(p, v);
            for (o, &x) in out.iter_mut().zip(v) {
                *o += c * x;
            }
        }
        Ok(out)
    }
}

/// Classical Gram-Schmidt in input order with one reorthogonalization pass.
/// Candidates whose residual norm falls below [`RANK_TOL`] are dropped.
pub fn gram_schmidt<T: Scalar>(vectors: &[Vec<T>]) -> Result<OrthonormalBasis<T>> {
    let dim = match vectors.first() {
        Some(v) => v.len(),
        None => return Err(FguError::Empty("no vectors for Gram-Schmidt".into())),
    };
    let mut basis: Vec<Vec<T>> = Vec::new();
    for (k, p) in vectors.iter().enumerate() {
        if p.len() != dim {
            return Err(FguError::DimensionMismatch(format!("vector {k} has length {}, expected {dim}", p.len())));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(FguError::NonFinite { value: f64::NAN, context: format!("Gram-Schmidt input {k}") });
        }
        if basis.len() == dim {
            continue;
        }
        let mut r = p.clone();
        for _ in 0..2 {
            let coeffs: Vec<T> = basis.iter().map(|v| dot(&r, v)).collect();
            for (v, &c) in basis.iter().zip(&coeffs) {
                for (ri, &vi) in r.iter_mut().zip(v) {
                    *ri -= c * vi;
                }
            }
        }
        let norm = norm2(&r);
        if norm.as_f64() < RANK_TOL {
            continue;
        }
        r.iter_mut().for_each(|x| *x /= norm);
        basis.push(r);
    }
    if basis.is_empty() {
        return Err(FguError::Empty("Gram-Schmidt produced an empty basis".into()));
    }
    Ok(OrthonormalBasis { dim, vectors: basis })
}

/// Decomposition of one class's unlearn prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDirection<T> {
    pub class: usize,
    pub p_del: Vec<T>,
    /// Component inside the retained clients' span.
    pub p_com: Vec<T>,
    /// `p_com − p_del`, orthogonal to the span.
    pub p_priv: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrivateDirection<T> {
    pub classes: Vec<ClassDirection<T>>,
    pub basis_size: usize,
}

impl<T: Scalar> PrivateDirection<T> {
    /// `max_{class,i} |⟨p_priv, ṽ_i⟩|`
    pub fn orthogonality_error(&self, basis: &OrthonormalBasis<T>) -> f64 {
        self.classes
            .iter()
            .flat_map(|c| basis.vectors().iter().map(move |v| dot(&c.p_priv, v).as_f64().abs()))
            .fold(0.0, f64::max)
    }
}

pub fn project_private<T: Scalar>(p_del: &PrototypeSet<T>, basis: &OrthonormalBasis<T>) -> Result<PrivateDirection<T>> {
    if p_del.dim() != basis.dim() {
        return Err(FguError::DimensionMismatch(format!(
            "prototypes in dimension {}, basis in dimension {}",
            p_del.dim(),
            basis.dim()
        )));
    }
    let mut classes = Vec::new();
    for (class, p) in p_del.iter() {
        let p_com = basis.project(p)?;
        let p_priv = p_com.iter().zip(p).map(|(&c, &d)| c - d).collect();
        classes.push(ClassDirection { class, p_del: p.to_vec(), p_com, p_priv });
    }
    Ok(PrivateDirection { classes, basis_size: basis.len() })
}

/// Fine-tunes `params` so the per-class mean embedding of `nodes` moves to
/// the frozen `p_priv` targets.
///
/// Returns the new params and the loss before each step followed by the loss
/// at the returned params.
pub fn local_unlearn<T: Scalar>(
    params: &ModelParams<T>,
    graph: &Graph<T>,
    nodes: &[usize],
    direction: &PrivateDirection<T>,
    space: EmbeddingSpace,
    epochs: usize,
    lr: f64,
) -> Result<(ModelParams<T>, Vec<f64>)> {
    if nodes.is_empty() {
        return Err(FguError::Empty("unlearn node set".into()));
    }
    if let Some(&n) = nodes.iter().find(|&&n| n >= graph.num_nodes()) {
        return Err(FguError::InvalidArgument(format!("node {n} of {}", graph.num_nodes())));
    }
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable();
    let by_class = nodes_by_class(graph.labels(), graph.num_classes(), &sorted);
    let mut groups = Vec::with_capacity(direction.classes.len());
    for cd in &direction.classes {
        let members = by_class.get(cd.class).filter(|m| !m.is_empty()).ok_or_else(|| {
            FguError::InvalidArgument(format!("direction has class {} but no unlearn node carries it", cd.class))
        })?;
        groups.push(PrototypeTarget { nodes: members.clone(), target: cd.p_priv.clone() });
    }
    if groups.is_empty() {
        return Err(FguError::Empty("private direction has no classes".into()));
    }

    let prop = Propagation::from_graph(graph);
    let input = GraphInput::new(graph.features(), &prop)?;
    let spec = LossSpec::Prototype { groups: &groups, space };
    let mut current = params.clone();
    let mut adam = Adam::new(lr);
    let mut losses = Vec::with_capacity(epochs + 1);
    for epoch in 0..epochs {
        let (value, grads) = backward(&current, &input, &spec, false).map_err(|e| match e {
            FguError::NonFinite { value, context } => {
                FguError::NonFinite { value, context: format!("{context}, unlearn epoch {epoch}") }
            }
            other => other,
        })?;
        losses.push(value.as_f64());
        adam.step_params(&mut current, &grads.params)?;
    }
    let (last, _) = backward(&current, &input, &spec, false)?;
    check_finite(last.as_f64(), || format!("unlearn epoch {epochs}"))?;
    if !current.all_finite() {
        return Err(FguError::NonFinite { value: f64::NAN, context: "unlearned params".into() });
    }
    losses.push(last.as_f64());
    Ok((current, losses))
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let na = norm2(a).as_f64();
    let nb = norm2(b).as_f64();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b).as_f64() / (na * nb)
}

/// Ids of clients whose prototype for some shared class has cosine at least
/// `tau` with the unlearning client's. Sorted ascending.
pub fn select_influenced<T: Scalar>(sets: &[PrototypeSet<T>], unlearn_client: usize, tau: f64) -> Vec<usize> {
    let Some(target) = sets.iter().find(|s| s.client_id == unlearn_client) else {
        return Vec::new();
    };
    let mut out: Vec<usize> = sets
        .iter()
        .filter(|s| s.client_id != unlearn_client)
        .filter(|s| {
            target
                .iter()
                .filter_map(|(c, pu)| s.get(c).map(|pj| cosine(pj, pu)))
                .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
                .is_some_and(|best| best >= tau)
        })
        .map(|s| s.client_id)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Stacks prototypes of every set except `exclude`, in ascending (client, class)
/// order, as Gram-Schmidt input.
pub fn basis_inputs<T: Scalar>(sets: &[PrototypeSet<T>], exclude: usize) -> Vec<Vec<T>> {
    let mut ordered: Vec<&PrototypeSet<T>> = sets.iter().filter(|s| s.client_id != exclude).collect();
    ordered.sort_by_key(|s| s.client_id);
    ordered.into_iter().flat_map(|s| s.iter().map(|(_, v)| v.to_vec())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_input_keeps_one_vector() {
        let e = vec![0.6f64, 0.8, 0.0];
        let b = gram_schmidt(&[e.clone(), e.iter().map(|x| 2.0 * x).collect()]).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b.vectors()[0].iter().zip(&e).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn zero_inputs_are_an_error() {
        assert!(gram_schmidt(&[vec![0.0f64; 3], vec![0.0; 3]]).is_err());
        assert!(gram_schmidt::<f64>(&[]).is_err());
    }

    #[test]
    fn orthogonal_case() {
        let b = gram_schmidt(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let mut p = PrototypeSet::new(0, 3, 1);
        p.set(0, vec![0.0, 2.0, -1.0]).unwrap();
        let d = project_private(&p, &b).unwrap();
        assert_eq!(d.classes[0].p_com, vec![0.0, 0.0, 0.0]);
        assert_eq!(d.classes[0].p_priv, vec![0.0, -2.0, 1.0]);
    }

    #[test]
    fn cosine_of_zero_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn thresholds() {
        let mk = |id: usize, v: Vec<f64>| {
            let mut s = PrototypeSet::new(id, 2, 2);
            s.set(0, v).unwrap();
            s
        };
        let sets = vec![mk(0, vec![1.0, 0.0]), mk(1, vec![0.0, 1.0]), mk(2, vec![-1.0, 0.1])];
        assert_eq!(select_influenced(&sets, 0, -1.0), vec![1, 2]);
        assert!(select_influenced(&sets, 0, 1.0 + 1e-9).is_empty());
        // Clients that share no class are never influenced.
        let mut lone = PrototypeSet::new(3, 2, 2);
        lone.set(1, vec![1.0, 0.0]).unwrap();
        let sets = vec![mk(0, vec![1.0, 0.0]), lone];
        assert!(select_influenced(&sets, 0, -1.0).is_empty());
    }
}
