use std::sync::Arc;

use proptest::prelude::*;

use frametree::model::NodeId;
use frametree::verifier::{aggregate, AggregateError, RankTable, Verifier, VerifierEnsemble};
use frametree::verifier::{ConstantVerifier, VerifierFault};

fn table(id: &str, ranks: &[usize]) -> RankTable {
    RankTable {
        verifier_id: id.into(),
        candidates: (0..ranks.len() as u64).map(NodeId).collect(),
        ranks: ranks.to_vec(),
    }
}

#[test]
fn weighted_two_verifier_example() {
    let agg = aggregate(&[table("a", &[3, 1, 2]), table("b", &[1, 3, 2])], &[2.0, 1.0]).unwrap();
    assert_eq!(agg.scores, vec![3.5, 2.5, 3.0]);
    assert_eq!(agg.best, NodeId(0));
}

#[test]
fn unit_weights_average_ranks() {
    let agg = aggregate(
        &[
            table("a", &[1, 2, 3, 4]),
            table("b", &[4, 3, 2, 1]),
            table("c", &[2, 4, 1, 3]),
        ],
        &[1.0, 1.0, 1.0],
    )
    .unwrap();
    assert_eq!(agg.scores, vec![7.0 / 3.0, 3.0, 2.0, 8.0 / 3.0]);
    assert_eq!(agg.best, NodeId(1));
}

#[test]
fn exact_tie_goes_to_lower_id() {
    let agg = aggregate(&[table("a", &[1, 2]), table("b", &[2, 1])], &[1.0, 1.0]).unwrap();
    assert_eq!(agg.scores, vec![1.5, 1.5]);
    assert_eq!(agg.best, NodeId(0));
}

#[test]
fn single_verifier_is_its_own_argmax() {
    let t = RankTable::from_scores("v", &[(NodeId(4), 0.1), (NodeId(2), 0.9), (NodeId(7), 0.5)]);
    assert_eq!(t.ranks, vec![1, 3, 2]);
    assert_eq!(aggregate(&[t], &[1.0]).unwrap().best, NodeId(2));
}

#[test]
fn tables_are_aligned_by_candidate_id() {
    let a = table("a", &[3, 1, 2]);
    let b = RankTable {
        verifier_id: "b".into(),
        candidates: vec![NodeId(2), NodeId(1), NodeId(0)],
        ranks: vec![2, 3, 1],
    };
    let agg = aggregate(&[a, b], &[2.0, 1.0]).unwrap();
    assert_eq!(agg.scores, vec![3.5, 2.5, 3.0]);
}

#[test]
fn malformed_inputs_are_rejected() {
    assert_eq!(aggregate(&[], &[]), Err(AggregateError::Empty));
    assert!(matches!(
        aggregate(&[table("a", &[1, 1, 2])], &[1.0]),
        Err(AggregateError::NotPermutation(_))
    ));
    assert!(matches!(
        aggregate(&[table("a", &[1, 2])], &[0.0]),
        Err(AggregateError::BadWeight)
    ));
    assert!(matches!(
        aggregate(&[table("a", &[1, 2])], &[1.0, 1.0]),
        Err(AggregateError::WeightCount { .. })
    ));
}

/// Fails on every other candidate.
struct Flaky;

impl Verifier for Flaky {
    fn id(&self) -> &str {
        "flaky"
    }
    fn score_frame(
        &self,
        _: &frametree::verifier::FrameInput<'_>,
        _: frametree::model::StagePrompt<'_>,
    ) -> Result<f64, VerifierFault> {
        unreachable!()
    }
    fn score_video(
        &self,
        _: &frametree::generator::DecodedVideo,
        _: &frametree::StagedPrompts,
    ) -> Result<f64, VerifierFault> {
        unreachable!()
    }
}

#[test]
fn faulted_scores_are_imputed_with_the_median() {
    let ensemble = VerifierEnsemble::single(Arc::new(Flaky));
    let ids: Vec<NodeId> = (0..5).map(NodeId).collect();
    let raw = [1.0, 5.0, 3.0, 9.0, 7.0];
    let out = ensemble.rank_candidates(&ids, |_, i| {
        if i % 2 == 1 {
            Err(VerifierFault::Timeout)
        } else {
            Ok(raw[i])
        }
    });
    assert_eq!(out.faults, 2);
    assert_eq!(out.raw[0][1], None);
    // scored: 1, 3, 7 -> median 3 fills candidates 1 and 3
    assert_eq!(out.aggregate.best, NodeId(4));
    assert_eq!(out.aggregate.scores, vec![1.0, 4.0, 3.0, 2.0, 5.0]);
}

#[test]
fn all_faulted_candidates_tie() {
    let ensemble = VerifierEnsemble::single(Arc::new(ConstantVerifier::new("c", 0.0)));
    let ids: Vec<NodeId> = (0..3).map(NodeId).collect();
    let out = ensemble.rank_candidates(&ids, |_, _| Err(VerifierFault::Transport("down".into())));
    assert_eq!(out.faults, 3);
    assert_eq!(out.aggregate.best, NodeId(0));
}

fn tables_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (2usize..8, 1usize..5).prop_flat_map(|(n, m)| {
        (
            prop::collection::vec(prop::collection::vec(-1e3f64..1e3, n), m),
            prop::collection::vec(0.01f64..10.0, m),
        )
    })
}

fn tables_from(raw: &[Vec<f64>]) -> Vec<RankTable> {
    raw.iter()
        .enumerate()
        .map(|(v, scores)| {
            let pairs: Vec<(NodeId, f64)> = scores.iter().enumerate().map(|(i, &s)| (NodeId(i as u64), s)).collect();
            RankTable::from_scores(format!("v{v}"), &pairs)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn ranks_are_permutations((raw, _) in tables_strategy()) {
        for t in tables_from(&raw) {
            prop_assert!(t.is_permutation());
        }
    }

    #[test]
    fn argmax_invariant_under_weight_scaling((raw, weights) in tables_strategy(), k in 1e-3f64..1e3) {
        let tables = tables_from(&raw);
        let base = aggregate(&tables, &weights).unwrap();
        let scaled: Vec<f64> = weights.iter().map(|w| w * k).collect();
        prop_assert_eq!(aggregate(&tables, &scaled).unwrap().best, base.best);
    }

    #[test]
    fn argmax_invariant_under_monotone_transforms((raw, weights) in tables_strategy(), a in 0.1f64..5.0, b in -10.0f64..10.0) {
        let base = aggregate(&tables_from(&raw), &weights).unwrap();
        let warped: Vec<Vec<f64>> = raw
            .iter()
            .map(|s| s.iter().map(|x| a * (x / 1e3).tanh().powi(3) + b + (x / 1e3)).collect())
            .collect();
        let after = aggregate(&tables_from(&warped), &weights).unwrap();
        prop_assert_eq!(after.best, base.best);
        prop_assert_eq!(after.scores, base.scores);
    }
}
