use fgu_core::graph::{
    apply_meta_removal, client_subgraph, load_graph, louvain_partition, save_graph, sbm_generate, FeatureStorage, Graph,
    Masks, MetaRemoval, SbmConfig,
};
use fgu_core::linalg::Matrix;
use proptest::prelude::*;

fn two_cliques() -> Graph<f64> {
    let mut edges = Vec::new();
    for base in [0, 10] {
        for u in base..base + 10 {
            for v in u + 1..base + 10 {
                edges.push((u, v));
            }
        }
    }
    let masks = Masks { train: (0..20).step_by(2).collect(), val: vec![], test: (1..20).step_by(2).collect() };
    Graph::new(Matrix::from_fn(20, 3, |i, j| (i * 3 + j) as f64), vec![0; 20], 1, edges, masks).unwrap()
}

#[test]
fn clique_partition_and_subgraphs() {
    let g = two_cliques();
    let p = louvain_partition(&g, 2, 0).unwrap();
    let a = p.assignments();
    assert!(a[..10].iter().all(|&c| c == a[0]));
    assert!(a[10..].iter().all(|&c| c == a[10]));
    assert_ne!(a[0], a[10]);
    let subs: Vec<_> = (0..2).map(|c| client_subgraph(&g, &p, c).unwrap()).collect();
    for s in &subs {
        assert_eq!(s.num_nodes(), 10);
        assert_eq!(s.edges().len(), 45);
    }
    // Node ids point back into the global graph.
    let mut ids: Vec<usize> = subs.iter().flat_map(|s| s.node_ids().to_vec()).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..20).collect::<Vec<_>>());
    let s0 = &subs[0];
    for (local, &global) in s0.node_ids().iter().enumerate() {
        assert_eq!(s0.features().row(local), g.features().row(global));
    }
}

#[test]
fn file_round_trip_both_storages() {
    let g = sbm_generate::<f64>(&SbmConfig::new(vec![(6, 0), (5, 1)], 0.6, 0.1, 4, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, storage) in [("inline.json", FeatureStorage::Inline), ("blob.json", FeatureStorage::Blob)] {
        let path = dir.path().join(name);
        save_graph(&g, &path, storage).unwrap();
        let back: Graph<f64> = load_graph(&path).unwrap();
        assert_eq!(back, g);
    }
}

#[test]
fn removal_scan_leaves_no_trace() {
    let g = two_cliques();
    let r = MetaRemoval { removed_nodes: vec![2, 4, 15], ..MetaRemoval::new(0) };
    let out = apply_meta_removal(&g, &r).unwrap();
    assert_eq!(out.num_nodes(), 17);
    for id in [2, 4, 15] {
        assert!(!out.node_ids().contains(&id));
    }
    // An 8-clique (28 edges) and a 9-clique (36 edges) remain.
    assert_eq!(out.edges().len(), 28 + 36);
    let m = out.masks();
    for set in [&m.train, &m.val, &m.test] {
        assert!(set.iter().all(|&v| v < 17));
    }
}

proptest! {
    #[test]
    fn subgraphs_partition_the_nodes(seed in 0u64..500, k in 1usize..5) {
        let g = sbm_generate::<f64>(&SbmConfig::new(vec![(8, 0), (8, 1), (6, 2)], 0.5, 0.05, 3, seed)).unwrap();
        let p = louvain_partition(&g, k, seed).unwrap();
        let total: usize = (0..k).map(|c| client_subgraph(&g, &p, c).unwrap().num_nodes()).sum();
        prop_assert_eq!(total, g.num_nodes());
    }

    #[test]
    fn sbm_is_bitwise_deterministic(seed in 0u64..1000) {
        let cfg = SbmConfig::new(vec![(7, 0), (5, 1)], 0.4, 0.1, 3, seed);
        let a = sbm_generate::<f64>(&cfg).unwrap();
        let b = sbm_generate::<f64>(&cfg).unwrap();
        prop_assert_eq!(a.edges(), b.edges());
        let bits = |g: &Graph<f64>| g.features().as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }
}
