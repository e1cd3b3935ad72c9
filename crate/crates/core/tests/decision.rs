mod common;

use common::*;
use proptest::prelude::*;
use slate_lab::decision::{
    build_index, build_slate, mean_recall, position_order, BucketIndex, DecisionMode, DecisionRule, ExactIndex,
    IndexKind, MipsIndex, PolicyRecommender, PrrRecommender,
};
use slate_lab::numeric::{stream_rng, Matrix};
use slate_lab::policy::SoftmaxPolicyParams;
use slate_lab::{ModelDims, Variant};

#[test]
fn exact_index_matches_brute_force_argmax() {
    let bad = brute_force_mismatches(300, 21);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn nuisance_parameters_do_not_move_decisions() {
    let bad = nuisance_mismatches(200, 22);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn recommender_agrees_with_build_slate() {
    let mut rng = stream_rng(23, 0);
    for _ in 0..50 {
        let (params, ctx) = decision_fixture(&mut rng);
        let index = ExactIndex::new(params.item_embeddings.clone());
        let direct = build_slate(&params, &ctx.z, ctx.slate_size, &index).unwrap();
        let rec = PrrRecommender::new(params, IndexKind::Exact, 0).unwrap();
        assert_eq!(rec.recommend(&ctx).unwrap(), direct);
    }
}

fn gaussian_rows(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = stream_rng(seed, 0);
    Matrix::from_fn(rows, cols, |_, _| normal(&mut rng, 1.0))
}

#[test]
fn approximate_index_meets_its_recall_target() {
    let rows = gaussian_rows(3000, 8, 1);
    let exact = ExactIndex::new(rows.clone());
    let mut rng = stream_rng(2, 0);
    let queries: Vec<Vec<f64>> = (0..300).map(|_| (0..8).map(|_| normal(&mut rng, 1.0)).collect()).collect();
    for k in [1, 4, 8] {
        let truth: Vec<Vec<usize>> = queries.iter().map(|q| exact.top_k(q, k).into_iter().map(|(a, _)| a).collect()).collect();
        for target in [0.8, 0.9, 0.99] {
            let approx = BucketIndex::build(rows.clone(), target, k, 3).unwrap();
            let recall = mean_recall(&approx, &queries, &truth, k);
            assert!(recall >= target, "k={k} target {target}: recall {recall}");
        }
    }
}

#[test]
fn approximate_index_scores_are_true_inner_products() {
    let rows = gaussian_rows(500, 5, 4);
    let index = build_index(rows.clone(), IndexKind::Approx { recall: 0.9 }, 4, 5).unwrap();
    let q = vec![0.3, -1.0, 0.2, 0.8, 0.0];
    let got = index.top_k(&q, 4);
    assert_eq!(got.len(), 4);
    for w in got.windows(2) {
        assert!(w[0].1 >= w[1].1);
    }
    for (a, s) in got {
        let expect: f64 = rows.row(a).iter().zip(&q).map(|(x, y)| x * y).sum();
        assert_eq!(s, expect);
    }
}

#[test]
fn position_order_rejects_oversized_slates() {
    assert!(position_order(&[0.1, 0.2], 3).is_err());
    assert_eq!(position_order(&[0.1, 0.5, 0.5], 3).unwrap(), vec![1, 2, 0]);
}

proptest! {
    #[test]
    fn prr_slates_are_distinct_and_in_catalog(seed in 0u64..10_000, approx in prop::bool::ANY) {
        let mut rng = stream_rng(seed, 0);
        let dims = ModelDims { num_items: 30, embedding_dim: 3, engagement_dim: 2, interest_dim: 5, k_max: 6 };
        let params = random_params(dims, Variant::Full, &mut rng, 1.0);
        let kind = if approx { IndexKind::Approx { recall: 0.5 } } else { IndexKind::Exact };
        let rec = PrrRecommender::new(params, kind, seed).unwrap();
        for k in 1..=6 {
            let ctx = random_context(dims, k, &mut rng);
            let slate = rec.recommend(&ctx).unwrap();
            let mut items = slate.items().to_vec();
            prop_assert_eq!(items.len(), k);
            prop_assert!(items.iter().all(|&a| a < 30));
            items.sort();
            items.dedup();
            prop_assert_eq!(items.len(), k);
        }
    }

    #[test]
    fn policy_slates_are_distinct(seed in 0u64..10_000, sample in prop::bool::ANY) {
        let mut rng = stream_rng(seed, 0);
        let mut params = SoftmaxPolicyParams::zeros(12, 3, 4);
        params.interest_map.data.iter_mut().for_each(|x| *x = normal(&mut rng, 2.0));
        params.item_embeddings.data.iter_mut().for_each(|x| *x = normal(&mut rng, 2.0));
        let mode = if sample { DecisionMode::Sample } else { DecisionMode::Greedy };
        let rec = PolicyRecommender::new(params, IndexKind::Exact, mode, 4, seed).unwrap();
        let dims = ModelDims { num_items: 12, embedding_dim: 3, engagement_dim: 0, interest_dim: 4, k_max: 4 };
        for k in 1..=4 {
            let ctx = random_context(dims, k, &mut rng);
            let slate = rec.decide(&ctx, &mut rng).unwrap();
            let mut items = slate.items().to_vec();
            items.sort();
            items.dedup();
            prop_assert_eq!(items.len(), k);
        }
    }
}
