use fgu_core::gnn::{embedding, Backbone, EmbeddingSpace, GraphInput, ModelParams, Propagation};
use fgu_core::graph::{sbm_generate, Graph, SbmConfig};
use fgu_core::prototype::{
    compute_prototypes, cosine, gram_schmidt, local_unlearn, project_private, select_influenced, OrthonormalBasis,
    PrototypeSet,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(seed: u64, classes: usize) -> (Graph<f64>, ModelParams<f64>) {
    let blocks = (0..classes).map(|c| (3, c)).collect();
    let g = sbm_generate(&SbmConfig::new(blocks, 0.7, 0.1, 5, seed)).unwrap();
    let p = ModelParams::init(Backbone::Gcn, 5, 6, classes, seed).unwrap();
    (g, p)
}

fn hidden(p: &ModelParams<f64>, g: &Graph<f64>) -> fgu_core::linalg::Matrix<f64> {
    let prop = Propagation::from_graph(g);
    embedding(p, &GraphInput::new(g.features(), &prop).unwrap(), EmbeddingSpace::Hidden).unwrap()
}

fn random_vecs(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn prototypes_are_class_means() {
    let (g, p) = toy(1, 7);
    let emb = hidden(&p, &g);
    let c = g.labels()[4];
    let one = compute_prototypes(&p, &g, &[4], EmbeddingSpace::Hidden, 0).unwrap();
    assert_eq!(one.get(c).unwrap(), emb.row(4));
    assert_eq!(one.present_classes(), vec![c]);

    let same: Vec<usize> = (0..g.num_nodes()).filter(|&v| g.labels()[v] == c).take(2).collect();
    let two = compute_prototypes(&p, &g, &same, EmbeddingSpace::Hidden, 0).unwrap();
    for (k, x) in two.get(c).unwrap().iter().enumerate() {
        assert!((x - (emb.get(same[0], k) + emb.get(same[1], k)) / 2.0).abs() < 1e-15);
    }

    // Blocks of three consecutive nodes: nodes 0, 3, 6 cover exactly three classes.
    let three = compute_prototypes(&p, &g, &[0, 3, 6], EmbeddingSpace::Hidden, 0).unwrap();
    assert_eq!(three.present_classes().len(), 3);
    assert!(compute_prototypes(&p, &g, &[], EmbeddingSpace::Hidden, 0).is_err());
}

#[test]
fn node_order_does_not_matter() {
    let (g, p) = toy(2, 3);
    let a = compute_prototypes(&p, &g, &[0, 1, 2, 5, 7], EmbeddingSpace::Hidden, 0).unwrap();
    let b = compute_prototypes(&p, &g, &[7, 2, 5, 0, 1], EmbeddingSpace::Hidden, 0).unwrap();
    assert_eq!(a.records(), b.records());
}

#[test]
fn gram_schmidt_cases() {
    let e = vec![0.0, 1.0, 0.0];
    let basis = gram_schmidt(&[e.clone(), e.iter().map(|x| 2.0 * x).collect()]).unwrap();
    assert_eq!(basis.len(), 1);

    let ortho: Vec<Vec<f64>> = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8]];
    let fixed = gram_schmidt(&ortho).unwrap();
    for (a, b) in fixed.vectors().iter().zip(&ortho) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vs = random_vecs(&mut rng, 10, 16);
    let b = gram_schmidt(&vs).unwrap();
    assert_eq!(b.len(), 10);
    assert!(b.gram_error() < 1e-10);

    // Appending a vector from the span leaves the basis unchanged.
    let mut more = vs.clone();
    more.push(vs[0].iter().zip(&vs[3]).map(|(a, c)| 0.5 * a - 2.0 * c).collect());
    let b2 = gram_schmidt(&more).unwrap();
    assert_eq!(b2.len(), b.len());
    for (x, y) in b.vectors().iter().flatten().zip(b2.vectors().iter().flatten()) {
        assert!((x - y).abs() < 1e-8);
    }
}

fn set_of(vectors: &[Vec<f64>]) -> PrototypeSet<f64> {
    let mut s = PrototypeSet::new(0, vectors[0].len(), vectors.len());
    for (c, v) in vectors.iter().enumerate() {
        s.set(c, v.clone()).unwrap();
    }
    s
}

#[test]
fn projection_special_cases() {
    let basis = gram_schmidt(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    let inside = project_private(&set_of(&[vec![0.3, -2.0, 0.0]]), &basis).unwrap();
    assert!(inside.classes[0].p_priv.iter().all(|x| x.abs() < 1e-8));
    let outside = project_private(&set_of(&[vec![0.0, 0.0, 1.5]]), &basis).unwrap();
    assert!(outside.classes[0].p_com.iter().all(|x| x.abs() < 1e-15));
    assert_eq!(outside.classes[0].p_priv, vec![0.0, 0.0, -1.5]);
    let empty = OrthonormalBasis::empty(3);
    let d = project_private(&set_of(&[vec![1.0, 2.0, 3.0]]), &empty).unwrap();
    assert_eq!(d.classes[0].p_priv, vec![-1.0, -2.0, -3.0]);
    assert!(project_private(&set_of(&[vec![1.0, 2.0]]), &basis).is_err());
}

proptest! {
    #[test]
    fn projection_algebra(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..24);
        let m = rng.random_range(1..=d);
        let basis = gram_schmidt(&random_vecs(&mut rng, m, d)).unwrap();
        let p = random_vecs(&mut rng, 1, d).remove(0);
        let dir = project_private(&set_of(std::slice::from_ref(&p)), &basis).unwrap();
        prop_assert!(dir.orthogonality_error(&basis) <= 1e-8);
        let cd = &dir.classes[0];
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let resid: Vec<f64> = cd.p_del.iter().zip(&cd.p_com).map(|(a, b)| a - b).collect();
        prop_assert!((sq(&resid) + sq(&cd.p_com) - sq(&p)).abs() <= 1e-8);
        for k in 0..d {
            prop_assert_eq!(cd.p_priv[k], cd.p_com[k] - cd.p_del[k]);
        }
    }
}

#[test]
fn local_unlearn_descends_on_toy() {
    let (g, p) = toy(6, 2);
    assert_eq!(g.num_nodes(), 6);
    let nodes = [0, 1, 3];
    let p_del = compute_prototypes(&p, &g, &nodes, EmbeddingSpace::Hidden, 0).unwrap();
    let others = compute_prototypes(&p, &g, &[2, 4, 5], EmbeddingSpace::Hidden, 1).unwrap();
    let basis = gram_schmidt(&others.iter().map(|(_, v)| v.to_vec()).collect::<Vec<_>>()).unwrap();
    let dir = project_private(&p_del, &basis).unwrap();

    let (same, losses) = local_unlearn(&p, &g, &nodes, &dir, EmbeddingSpace::Hidden, 0, 1e-2).unwrap();
    assert_eq!(same.bit_fingerprint(), p.bit_fingerprint());
    assert_eq!(losses.len(), 1);

    let (after, losses) = local_unlearn(&p, &g, &nodes, &dir, EmbeddingSpace::Hidden, 20, 1e-2).unwrap();
    assert_eq!(losses.len(), 21);
    assert!(losses[20] <= 0.99 * losses[0], "{losses:?}");
    assert!(after.all_finite() && after.same_layout(&p));
}

#[test]
fn influence_thresholds() {
    let a = set_of(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let mut b = set_of(&[vec![0.9, 0.1], vec![-1.0, 0.0]]);
    b.client_id = 1;
    let mut c = set_of(&[vec![-1.0, 0.2], vec![1.0, 0.0]]);
    c.client_id = 2;
    let sets = vec![a.clone(), b, c];
    assert_eq!(select_influenced(&sets, 0, -1.0), vec![1, 2]);
    assert!(select_influenced(&sets, 0, 1.0 + 1e-9).is_empty());
    assert_eq!(select_influenced(&sets, 0, 0.8), vec![1]);
    let same: Vec<_> = (0..4)
        .map(|i| {
            let mut s = a.clone();
            s.client_id = i;
            s
        })
        .collect();
    assert_eq!(select_influenced(&same, 2, 0.8), vec![0, 1, 3]);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
}
