use std::cmp::Ordering;

use serde::Serialize;
use thiserror::Error;

use crate::model::{CandidateNode, NodeId, PruneRule, Schedule};

/// `b_t`: the branch limit at frames listed in `branch_at`, 1 elsewhere.
pub fn branch_factor(t: usize, schedule: &Schedule) -> usize {
    if schedule.branch_at.contains(&t) {
        schedule.branch_limit
    } else {
        1
    }
}

/// Effective frontier sizes `k_0 .. k_{T-1}` for a schedule. `k_0 = N`, and
/// each level keeps `min(target, k_{t-1} * b_t)` nodes.
pub fn pruning_sizes(schedule: &Schedule) -> Vec<usize> {
    let mut ks = Vec::with_capacity(schedule.depth);
    ks.push(schedule.roots);
    for t in 1..schedule.depth {
        let produced = ks[t - 1] * branch_factor(t, schedule);
        let target = match &schedule.prune_rule {
            PruneRule::Halve => produced.div_ceil(2).max(1),
            PruneRule::FixedK(sizes) => sizes.get(t - 1).copied().unwrap_or(1),
            PruneRule::None => produced,
        };
        ks.push(target.min(produced));
    }
    ks
}

/// Deterministic frontier order: total score descending, node id ascending.
pub fn frontier_order(a: &CandidateNode, b: &CandidateNode) -> Ordering {
    b.total_score
        .total_cmp(&a.total_score)
        .then_with(|| a.node_id.cmp(&b.node_id))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneOutcome {
    pub level: usize,
    pub retained: Vec<NodeId>,
    pub discarded: Vec<NodeId>,
    pub k_in: usize,
    pub k_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PruneError {
    #[error("prune size must be at least 1")]
    ZeroK,
    #[error("nothing to prune at level {0}")]
    Empty(usize),
}

/// Keeps the top `k` of `produced` under [`frontier_order`]. Returns the
/// retained nodes in frontier order alongside the outcome.
pub fn prune_top_k(
    mut produced: Vec<CandidateNode>,
    k: usize,
    level: usize,
) -> Result<(Vec<CandidateNode>, PruneOutcome), PruneError> {
    if k == 0 {
        return Err(PruneError::ZeroK);
    }
    if produced.is_empty() {
        return Err(PruneError::Empty(level));
    }
    let k_in = produced.len();
    produced.sort_by(frontier_order);
    let dropped = produced.split_off(k.min(k_in));
    let outcome = PruneOutcome {
        level,
        retained: produced.iter().map(|n| n.node_id).collect(),
        discarded: dropped.iter().map(|n| n.node_id).collect(),
        k_in,
        k_out: produced.len(),
    };
    Ok((produced, outcome))
}

/// Priority frontier between levels.
#[derive(Debug, Clone, Default)]
pub struct FrontierQueue {
    entries: Vec<CandidateNode>,
}

impl FrontierQueue {
    pub fn new(mut entries: Vec<CandidateNode>) -> Self {
        entries.sort_by(frontier_order);
        FrontierQueue { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dequeues up to `k` nodes in frontier order and clears the rest.
    pub fn dequeue(&mut self, k: usize) -> Vec<CandidateNode> {
        let mut out = std::mem::take(&mut self.entries);
        out.truncate(k);
        out
    }

    pub fn entries(&self) -> &[CandidateNode] {
        &self.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LatentRef, Stage};

    fn node(id: u64, score: f64) -> CandidateNode {
        CandidateNode {
            node_id: NodeId(id),
            parent_id: None,
            frame_index: 1,
            seed: id,
            latent_ref: LatentRef::Handle(String::new()),
            stage: Stage::Intermediate,
            local_reward: score,
            total_score: score,
        }
    }

    #[test]
    fn halve_from_eight_without_branching() {
        let s = crate::model::Schedule {
            branch_at: vec![],
            ..crate::model::Schedule::tof_default(8, 10)
        };
        assert_eq!(pruning_sizes(&s), vec![8, 4, 2, 1, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn branching_level_keeps_frontier_size_under_halving() {
        let s = crate::model::Schedule::tof_default(8, 10);
        // branch at 1 and 8
        assert_eq!(pruning_sizes(&s), vec![8, 8, 4, 2, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn fixed_k_is_capped_by_production() {
        let s = crate::model::Schedule {
            prune_rule: PruneRule::FixedK(vec![10, 3, 1]),
            ..crate::model::Schedule::tof_default(2, 4)
        };
        // level 1 produces 4 (branch), level 2 produces 4, level 3 produces 6 (branch at 3)
        assert_eq!(pruning_sizes(&s), vec![2, 4, 3, 1]);
    }

    #[test]
    fn branch_factor_definition() {
        let s = crate::model::Schedule {
            branch_at: vec![1, 8],
            ..crate::model::Schedule::tof_default(4, 10)
        };
        assert_eq!(branch_factor(1, &s), 2);
        assert_eq!(branch_factor(8, &s), 2);
        assert_eq!(branch_factor(5, &s), 1);
    }

    #[test]
    fn prune_keeps_everything_when_k_large() {
        let (kept, out) = prune_top_k(vec![node(1, 0.5), node(2, 0.7)], 5, 1).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(out.discarded.is_empty());
        assert_eq!(out.retained, vec![NodeId(2), NodeId(1)]);
    }

    #[test]
    fn prune_tie_prefers_lower_node_id() {
        let (kept, _) = prune_top_k(vec![node(11, 5.0), node(7, 5.0), node(2, 3.0)], 1, 1).unwrap();
        assert_eq!(kept[0].node_id, NodeId(7));
    }

    #[test]
    fn prune_errors() {
        assert_eq!(prune_top_k(vec![node(1, 0.0)], 0, 1).unwrap_err(), PruneError::ZeroK);
        assert_eq!(prune_top_k(vec![], 1, 3).unwrap_err(), PruneError::Empty(3));
    }

    #[test]
    fn queue_dequeues_in_frontier_order() {
        let mut q = FrontierQueue::new(vec![node(3, 0.0), node(1, 0.0), node(2, 1.0)]);
        let got: Vec<u64> = q.dequeue(2).iter().map(|n| n.node_id.0).collect();
        assert_eq!(got, vec![2, 1]);
        assert!(q.is_empty());
    }
}
