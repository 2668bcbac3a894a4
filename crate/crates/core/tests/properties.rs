//! Property tests for algebraic invariants.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use fedmtl::community::{louvain, modularity, Partition};
use fedmtl::graph::{cos_sim, edge_weight, GraphConfig, SimilarityGraph};
use fedmtl::metrics::fairness_stats;
use fedmtl::model::{anchor_loss, supervised_loss, FeatureAnchorSet};
use fedmtl::rng::stream;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3..1e3f64, len)
}

proptest! {
    #[test]
    fn cosine_is_symmetric_and_bounded(a in finite_vec(6), b in finite_vec(6)) {
        let u = Array1::from_vec(a);
        let v = Array1::from_vec(b);
        let ab = cos_sim(&u, &v);
        let ba = cos_sim(&v, &u);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn cosine_ignores_positive_scale(a in finite_vec(5), b in finite_vec(5), s in 1e-3..1e3f64) {
        let u = Array1::from_vec(a);
        let v = Array1::from_vec(b);
        let base = cos_sim(&u, &v);
        let scaled = cos_sim(&(&u * s), &v);
        prop_assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn edge_weights_stay_in_unit_interval(
        alpha in 0.0..=1.0f64,
        s_head in -1.0..=1.0f64,
        s_repr in -1.0..=1.0f64,
    ) {
        let config = GraphConfig::new(alpha).unwrap();
        let w = edge_weight(&config, s_head, s_repr).unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
    }

    #[test]
    fn cross_entropy_is_shift_invariant(
        rows in prop::collection::vec(finite_vec(5), 1..6),
        shift in -100.0..100.0f64,
    ) {
        let n = rows.len();
        let logits = Array2::from_shape_fn((n, 5), |(i, j)| rows[i][j] / 100.0);
        let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
        let base = supervised_loss(&logits, &labels).unwrap();
        let shifted = supervised_loss(&logits.mapv(|v| v + shift), &labels).unwrap();
        prop_assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn anchor_loss_is_zero_iff_features_match(
        feat in finite_vec(4),
        offset in prop::sample::select(vec![0.0, 0.5, -2.0, 1e-3]),
    ) {
        let mut anchors = FeatureAnchorSet::new(0);
        anchors.insert(0, Array1::from_vec(feat.clone()));
        let features = Array2::from_shape_fn((1, 4), |(_, j)| feat[j] + offset);
        let loss = anchor_loss(&features, &[0], &anchors).unwrap();
        prop_assert!(loss >= 0.0);
        if offset == 0.0 {
            prop_assert_eq!(loss, 0.0);
        } else {
            prop_assert!(loss > 0.0);
        }
    }

    #[test]
    fn modularity_is_bounded_and_louvain_beats_singletons(seed in 0u64..500) {
        let mut rng = stream(seed, &[21]);
        use rand::RngExt;
        let n = 2 + (seed as usize % 7);
        let mut adj = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < 0.5 {
                    let w = rng.random::<f64>();
                    adj[[i, j]] = w;
                    adj[[j, i]] = w;
                }
            }
        }
        let graph = SimilarityGraph::from_adjacency((0..n).collect(), adj).unwrap();

        let raw: BTreeMap<usize, usize> =
            (0..n).map(|i| (i, rng.random_range(0..n))).collect();
        let q = modularity(&graph, &Partition::from_assignment(&raw)).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&q));

        let found = louvain(&graph, &mut stream(seed, &[22]));
        let q_found = modularity(&graph, &found).unwrap();
        let q_singletons =
            modularity(&graph, &Partition::singletons(0..n)).unwrap();
        prop_assert!(q_found + 1e-12 >= q_singletons);
    }

    #[test]
    fn worst_prefix_means_are_monotone(accs in prop::collection::vec(0.0..=1.0f64, 1..60)) {
        let report = fairness_stats(&accs).unwrap();
        prop_assert!(report.worst_10 <= report.worst_20 + 1e-12);
        prop_assert!(report.worst_20 <= report.mean + 1e-12);
    }
}
