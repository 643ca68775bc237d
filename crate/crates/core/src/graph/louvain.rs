//! Two-phase Louvain community detection and community-to-client packing.

use super::{Graph, Partition};
use crate::error::{FguError, Result};
use crate::scalar::Scalar;

/// Weighted graph for one Louvain level. `adj[i]` excludes `i` itself; the
/// self-loop weight lives in `self_w[i]` and counts toward `k_i` once.
struct Level {
    adj: Vec<Vec<(usize, f64)>>,
    self_w: Vec<f64>,
}

impl Level {
    fn from_graph<T: Scalar>(g: &Graph<T>) -> Self {
        let n = g.num_nodes();
        let mut adj = vec![Vec::new(); n];
        for &(u, v) in g.edges() {
            adj[u].push((v, 1.0));
            adj[v].push((u, 1.0));
        }
        Self { adj, self_w: vec![0.0; n] }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn strengths(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.self_w[i] + self.adj[i].iter().map(|&(_, w)| w).sum::<f64>()).collect()
    }

    fn modularity(&self, comm: &[usize]) -> f64 {
        let k = self.strengths();
        let two_m: f64 = k.iter().sum();
        if two_m == 0.0 {
            return 0.0;
        }
        let nc = comm.iter().max().map_or(0, |&c| c + 1);
        let mut inside = vec![0.0; nc];
        let mut tot = vec![0.0; nc];
        for i in 0..self.len() {
            tot[comm[i]] += k[i];
            inside[comm[i]] += self.self_w[i];
            for &(j, w) in &self.adj[i] {
                if comm[j] == comm[i] {
                    inside[comm[i]] += w;
                }
            }
        }
        inside.iter().zip(&tot).map(|(&a, &t)| a / two_m - (t / two_m).powi(2)).sum()
    }

    /// Repeated sweeps in node-id order until no node moves. Returns the
    /// community of each node and whether anything moved.
    fn local_moves(&self, trace: &mut LouvainTrace) -> (Vec<usize>, bool) {
        let n = self.len();
        let k = self.strengths();
        let two_m: f64 = k.iter().sum();
        let mut comm: Vec<usize> = (0..n).collect();
        if two_m == 0.0 {
            return (comm, false);
        }
        let mut tot = k.clone();
        let mut link = vec![0.0f64; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut moved_any = false;
        let mut last_q = self.modularity(&comm);
        loop {
            let mut moved = false;
            for i in 0..n {
                let own = comm[i];
                tot[own] -= k[i];
                for &(j, w) in &self.adj[i] {
                    let c = comm[j];
                    if link[c] == 0.0 && !touched.contains(&c) {
                        touched.push(c);
                    }
                    link[c] += w;
                }
                let gain = |c: usize, link_c: f64| link_c - tot[c] * k[i] / two_m;
                let mut best = own;
                let mut best_gain = gain(own, link[own]);
                touched.sort_unstable();
                for &c in &touched {
                    if c == own {
                        continue;
                    }
                    let g = gain(c, link[c]);
                    if g > best_gain {
                        best_gain = g;
                        best = c;
                    }
                }
                for &c in &touched {
                    link[c] = 0.0;
                }
                touched.clear();
                tot[best] += k[i];
                if best != own {
                    comm[i] = best;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
            moved_any = true;
            let q = self.modularity(&comm);
            assert!(q >= last_q - 1e-10, "modularity decreased across a local-move pass: {last_q} -> {q}");
            trace.pass_modularity.push(q);
            last_q = q;
        }
        (compact(&comm), moved_any)
    }

    fn aggregate(&self, comm: &[usize]) -> Level {
        let nc = comm.iter().max().map_or(0, |&c| c + 1);
        let mut weights: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); nc];
        let mut self_w = vec![0.0; nc];
        for i in 0..self.len() {
            let ci = comm[i];
            self_w[ci] += self.self_w[i];
            for &(j, w) in &self.adj[i] {
                let cj = comm[j];
                if ci == cj {
                    self_w[ci] += w;
                } else {
                    *weights[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        Level { adj: weights.into_iter().map(|m| m.into_iter().collect()).collect(), self_w }
    }
}

/// Renumbers community labels by first appearance in node order.
fn compact(comm: &[usize]) -> Vec<usize> {
    let mut map = vec![usize::MAX; comm.len().max(comm.iter().max().map_or(0, |&c| c + 1))];
    let mut next = 0;
    comm.iter()
        .map(|&c| {
            if map[c] == usize::MAX {
                map[c] = next;
                next += 1;
            }
            map[c]
        })
        .collect()
}

/// Modularity after each local-move pass, across all levels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LouvainTrace {
    pub pass_modularity: Vec<f64>,
    pub levels: usize,
    pub modularity: f64,
}

/// Modularity of a node-to-community assignment. Zero for edgeless graphs.
pub fn modularity<T: Scalar>(graph: &Graph<T>, communities: &[usize]) -> f64 {
    Level::from_graph(graph).modularity(communities)
}

/// Runs Louvain to convergence. Communities are numbered by their smallest
/// node id. Ties in modularity gain go to the lowest community id; a node
/// leaves its community only for a strictly better one.
pub fn louvain_communities<T: Scalar>(graph: &Graph<T>) -> (Vec<usize>, LouvainTrace) {
    let mut trace = LouvainTrace::default();
    let mut level = Level::from_graph(graph);
    let mut membership: Vec<usize> = (0..graph.num_nodes()).collect();
    loop {
        let (comm, moved) = level.local_moves(&mut trace);
        if !moved {
            break;
        }
        trace.levels += 1;
        for m in &mut membership {
            *m = comm[*m];
        }
        level = level.aggregate(&comm);
    }
    let membership = compact(&membership);
    trace.modularity = modularity(graph, &membership);
    (membership, trace)
}

/// Louvain communities packed into `k` clients.
///
/// Communities are taken largest first (ties by smallest node id) and each
/// is given to the client currently holding the fewest nodes (ties by lowest
/// client id). When Louvain finds fewer than `k` communities the largest one
/// is split in half by node order until there are `k`. The procedure is
/// fully deterministic; `_seed` is accepted so callers can thread the data
/// seed uniformly.
pub fn louvain_partition<T: Scalar>(graph: &Graph<T>, k: usize, _seed: u64) -> Result<Partition> {
    let n = graph.num_nodes();
    if k == 0 || k > n {
        return Err(FguError::InvalidArgument(format!("cannot split {n} nodes into {k} clients")));
    }
    let (membership, _) = louvain_communities(graph);
    let nc = membership.iter().max().map_or(0, |&c| c + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for (node, &c) in membership.iter().enumerate() {
        groups[c].push(node);
    }
    while groups.len() < k {
        let (idx, _) = groups
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
            .unwrap();
        let big = &mut groups[idx];
        let tail = big.split_off(big.len() / 2);
        groups.push(tail);
    }
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));

    let mut load = vec![0usize; k];
    let mut assignments = vec![0usize; n];
    for g in &groups {
        let client = (0..k).min_by_key(|&c| (load[c], c)).unwrap();
        load[client] += g.len();
        for &node in g {
            assignments[node] = client;
        }
    }
    Partition::new(assignments, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Masks;
    use crate::linalg::Matrix;

    fn graph(n: usize, edges: Vec<(usize, usize)>) -> Graph<f64> {
        Graph::new(Matrix::zeros(n, 1), vec![0; n], 1, edges, Masks::default()).unwrap()
    }

    fn two_cliques(size: usize) -> Graph<f64> {
        let mut edges = Vec::new();
        for base in [0, size] {
            for u in 0..size {
                for v in u + 1..size {
                    edges.push((base + u, base + v));
                }
            }
        }
        graph(2 * size, edges)
    }

    #[test]
    fn two_cliques_limit_is_the_optimum_bipartition() {
        let g = two_cliques(10);
        // Exhaustive oracle over all bipartitions (node 0 pinned to side 0).
        let mut best = f64::MIN;
        let mut best_mask = 0u32;
        let mut comm = vec![0usize; 20];
        for mask in 0u32..(1 << 19) {
            for (i, c) in comm.iter_mut().enumerate().skip(1) {
                *c = ((mask >> (i - 1)) & 1) as usize;
            }
            let q = modularity(&g, &comm);
            if q > best + 1e-12 {
                best = q;
                best_mask = mask;
            }
        }
        assert_eq!(best_mask, 0b1111111111 << 9);

        let (found, trace) = louvain_communities(&g);
        assert!((trace.modularity - best).abs() < 1e-12);
        assert!(found[..10].iter().all(|&c| c == found[0]));
        assert!(found[10..].iter().all(|&c| c == found[10]));
        assert_ne!(found[0], found[10]);

        let p = louvain_partition(&g, 2, 0).unwrap();
        assert!(p.assignments()[..10].iter().all(|&c| c == p.assignments()[0]));
        assert!(p.assignments()[10..].iter().all(|&c| c == p.assignments()[10]));
        assert_ne!(p.assignments()[0], p.assignments()[10]);
    }

    #[test]
    fn single_client_takes_everything() {
        let g = two_cliques(4);
        assert_eq!(louvain_partition(&g, 1, 3).unwrap().assignments(), &[0; 8]);
    }

    #[test]
    fn edgeless_graph_balances_singletons() {
        let g = graph(6, vec![]);
        let p = louvain_partition(&g, 3, 0).unwrap();
        for c in 0..3 {
            assert_eq!(p.members(c).len(), 2);
        }
    }

    #[test]
    fn too_many_clients() {
        assert!(louvain_partition(&graph(3, vec![]), 4, 0).is_err());
    }

    #[test]
    fn fewer_communities_than_clients_are_split() {
        let g = two_cliques(5);
        let p = louvain_partition(&g, 4, 0).unwrap();
        let mut sizes: Vec<usize> = (0..4).map(|c| p.members(c).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes.iter().sum::<usize>(), 10);
        assert!(sizes[0] >= 2);
    }

    #[test]
    fn modularity_non_decreasing_on_sbm() {
        use crate::graph::{sbm_generate, SbmConfig};
        for seed in 0..4 {
            let cfg = SbmConfig::new(vec![(30, 0), (30, 1), (30, 2)], 0.3, 0.02, 2, seed);
            let g: Graph<f64> = sbm_generate(&cfg).unwrap();
            let (comm, trace) = louvain_communities(&g);
            assert!(trace.pass_modularity.windows(2).all(|w| w[1] >= w[0] - 1e-10));
            assert!((modularity(&g, &comm) - trace.modularity).abs() < 1e-12);
            assert!(trace.modularity > 0.3);
        }
    }
}
