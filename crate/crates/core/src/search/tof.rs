//! Level-synchronous tree-of-frames search.
//!
//! Each level dequeues the surviving `k_{t-1}` nodes, expands every one into
//! `b_t` children with fresh seeds, scores the children with the verifier
//! ensemble under their stage prompt, accumulates `s + h`, and keeps the top
//! `k_t`. Expansion and scoring within a level run in parallel; pruning is
//! the barrier between levels.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{
    branch_factor, final_selection, prune_top_k, pruning_sizes, weighted, Backends, FrontierQueue, GateConfig,
    GateVerdicts, NodeEvent, NodeStatus, PotentialThreshold, SearchError, SearchOptions, SearchResult,
};
use crate::analysis::ledger::{CostCall, CostEvent, NfeLedger};
use crate::generator::{generate_node, partial_node, GeneratorError, NodeSpec, PartialFrameState};
use crate::model::{Algorithm, CandidateNode, LatentRef, NodeId, RunConfig, Schedule, SearchPath};
use crate::seed::{child_seed, root_seed};
use crate::verifier::{clarity_gate, median, potential_gate, FrameInput, GateDecision, Verifier};

/// One child at one level.
struct Expansion {
    spec: NodeSpec,
    parent_total: f64,
    latent: Option<LatentRef>,
    costs: Vec<CostEvent>,
    gates: GateVerdicts,
    status: NodeStatus,
}

impl Expansion {
    fn new(spec: NodeSpec, parent_total: f64) -> Self {
        Expansion {
            spec,
            parent_total,
            latent: None,
            costs: Vec::new(),
            gates: GateVerdicts::default(),
            status: NodeStatus::Retained,
        }
    }

    fn nfe(&self) -> u64 {
        self.costs.iter().map(CostEvent::nfe).sum()
    }

    fn fail(&mut self, err: &GeneratorError) {
        log::warn!("expansion of {} failed: {err}", self.spec.node_id);
        self.status = NodeStatus::Failed;
    }

    fn stub(&self, latent: LatentRef) -> CandidateNode {
        let mut n = self.spec.clone().into_node(latent);
        n.total_score = self.parent_total;
        n
    }
}

pub fn tof_search(config: &RunConfig, backends: &Backends, opts: &SearchOptions) -> Result<SearchResult, SearchError> {
    if config.algorithm != Algorithm::Tof {
        return Err(SearchError::WrongAlgorithm(config.algorithm));
    }
    let schedule = &config.schedule;
    let depth = schedule.depth;
    let steps = schedule.denoise_steps_per_frame;
    let generator = backends.generator.as_ref();
    let gates = opts.gates.filter(|_| generator.capabilities().supports_partial_denoise);
    let ks = pruning_sizes(schedule);

    let mut ledger = NfeLedger::new();
    let mut events = Vec::new();
    let mut arena: BTreeMap<NodeId, CandidateNode> = BTreeMap::new();
    let mut faults = 0usize;

    // roots carry score 0
    let roots: Vec<_> = (0..schedule.roots)
        .into_par_iter()
        .map(|i| {
            let spec = NodeSpec::root(NodeId(i as u64), root_seed(config.master_seed, i));
            generate_node(generator, spec.clone(), &backends.prompts, schedule, steps).map_err(|e| (spec, e))
        })
        .collect();
    let mut survivors = Vec::new();
    let mut last_error = None;
    for r in roots {
        match r {
            Ok((node, cost)) => {
                events.push(NodeEvent::of(
                    &node,
                    NodeStatus::Retained,
                    GateVerdicts::default(),
                    cost.nfe(),
                ));
                ledger.record(cost);
                survivors.push(node);
            }
            Err((spec, e)) => {
                log::warn!("root {} failed: {e}", spec.node_id);
                faults += 1;
                events.push(NodeEvent::of(
                    &spec.into_node(LatentRef::Handle(String::new())),
                    NodeStatus::Failed,
                    GateVerdicts::default(),
                    0,
                ));
                last_error = Some(e);
            }
        }
    }
    if survivors.is_empty() {
        return Err(SearchError::AllFailed(
            last_error.unwrap_or(GeneratorError::Precondition("no roots".into())),
        ));
    }
    for n in &survivors {
        arena.insert(n.node_id, n.clone());
    }
    let mut queue = FrontierQueue::new(survivors);
    let mut next_id = schedule.roots as u64;
    let mut prune_outcomes = Vec::with_capacity(depth - 1);
    let mut last_level: Vec<CandidateNode> = Vec::new();

    for t in 1..depth {
        let b = branch_factor(t, schedule);
        let parents = queue.dequeue(ks[t - 1]);
        let mut expansions = Vec::with_capacity(parents.len() * b);
        for parent in &parents {
            for m in 0..b {
                let spec = NodeSpec::child(NodeId(next_id), parent, child_seed(parent.seed, m, t), schedule)?;
                next_id += 1;
                expansions.push(Expansion::new(spec, parent.total_score));
            }
        }

        match gates {
            Some(cfg) => expand_gated(&mut expansions, backends, schedule, &cfg),
            None => expand_plain(&mut expansions, backends, schedule),
        }
        for e in &expansions {
            ledger.extend_from(e.costs.iter().cloned());
        }

        let live: Vec<usize> = (0..expansions.len())
            .filter(|&i| expansions[i].status == NodeStatus::Retained)
            .collect();
        faults += expansions.iter().filter(|e| e.status == NodeStatus::Failed).count();
        if live.is_empty() {
            return Err(SearchError::LevelExhausted { level: t });
        }

        let ids: Vec<NodeId> = live.iter().map(|&i| expansions[i].spec.node_id).collect();
        let outcome = backends.ensemble.rank_candidates(&ids, |v, j| {
            let e = &expansions[live[j]];
            let frame = FrameInput {
                latent: e.latent.as_ref().expect("live expansions are generated"),
                parent: e.spec.parent.as_ref().map(|(_, l)| l),
                frame_index: e.spec.frame_index,
                stage: e.spec.stage,
            };
            v.score_frame(&frame, backends.prompts.stage_prompt(e.spec.stage))
        });
        for _ in 0..backends.ensemble.len() {
            for &id in &ids {
                ledger.record(CostEvent::verify(CostCall::FrameScore, Some(id)));
            }
        }
        faults += outcome.faults;

        let produced: Vec<CandidateNode> = live
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let e = &expansions[i];
                let node = e.spec.clone().into_node(e.latent.clone().expect("generated"));
                node.rewarded(outcome.aggregate.scores[j], e.parent_total)
            })
            .collect();
        if t == depth - 1 {
            last_level = produced.clone();
        }
        let by_id: BTreeMap<NodeId, CandidateNode> = produced.iter().map(|n| (n.node_id, n.clone())).collect();
        let (retained, prune) = prune_top_k(produced, ks[t].max(1), t)?;
        debug_assert!(prune_dominance(&retained, &prune, &by_id));

        for e in &expansions {
            let id = e.spec.node_id;
            let event = match e.status {
                NodeStatus::Retained => {
                    let node = &by_id[&id];
                    let status = if prune.retained.contains(&id) {
                        NodeStatus::Retained
                    } else {
                        NodeStatus::Pruned
                    };
                    NodeEvent::of(node, status, e.gates, e.nfe())
                }
                status => NodeEvent::of(
                    &e.stub(e.latent.clone().unwrap_or(LatentRef::Handle(String::new()))),
                    status,
                    e.gates,
                    e.nfe(),
                ),
            };
            events.push(event);
        }
        arena.extend(by_id);
        prune_outcomes.push(prune);
        queue = FrontierQueue::new(retained);
    }

    let paths: Vec<Vec<CandidateNode>> = last_level.iter().map(|leaf| chain(&arena, leaf)).collect();
    let (best, final_candidates, verify_faults) = final_selection(backends, depth, &paths, &mut ledger)?;
    let chosen = &final_candidates[best];
    let quality = weighted(&chosen.raw, &backends.ensemble).unwrap_or(0.0);
    let final_aggregated = chosen.aggregated;
    let accumulated = chosen.accumulated;
    let best_path = SearchPath::new(paths[best].clone(), depth, final_aggregated)?;
    let mut k_sequence = vec![schedule.roots];
    k_sequence.extend(prune_outcomes.iter().map(|p| p.k_out));

    Ok(SearchResult {
        algorithm: Algorithm::Tof,
        best_path,
        final_aggregated,
        quality,
        accumulated,
        final_candidates,
        verifier_ids: backends.ensemble.ids(),
        k_sequence,
        prune_outcomes,
        events,
        ledger,
        faults: faults + verify_faults,
    })
}

fn chain(arena: &BTreeMap<NodeId, CandidateNode>, leaf: &CandidateNode) -> Vec<CandidateNode> {
    let mut out = vec![leaf.clone()];
    let mut cur = leaf.parent_id;
    while let Some(id) = cur {
        let n = &arena[&id];
        out.push(n.clone());
        cur = n.parent_id;
    }
    out.reverse();
    out
}

fn prune_dominance(
    retained: &[CandidateNode],
    prune: &super::PruneOutcome,
    by_id: &BTreeMap<NodeId, CandidateNode>,
) -> bool {
    let worst_kept = retained.last();
    prune.discarded.iter().all(|id| {
        let d = &by_id[id];
        worst_kept.is_none_or(|k| super::frontier_order(k, d) == std::cmp::Ordering::Less)
    })
}

fn expand_plain(expansions: &mut [Expansion], backends: &Backends, schedule: &Schedule) {
    expansions.par_iter_mut().for_each(|e| {
        match generate_node(
            backends.generator.as_ref(),
            e.spec.clone(),
            &backends.prompts,
            schedule,
            schedule.denoise_steps_per_frame,
        ) {
            Ok((node, cost)) => {
                e.latent = Some(node.latent_ref);
                e.costs.push(cost);
            }
            Err(err) => e.fail(&err),
        }
    });
}

/// Partial denoise until the clarity gate passes, score the potential,
/// threshold against the level, then finish survivors. A parent whose
/// children are all rejected keeps its best-scored child.
fn expand_gated(expansions: &mut [Expansion], backends: &Backends, schedule: &Schedule, cfg: &GateConfig) {
    let generator = backends.generator.as_ref();
    let budget = schedule.denoise_steps_per_frame;
    let stride = cfg.probe_stride.unwrap_or(budget.div_ceil(5)).max(1);
    let ensemble: &dyn Verifier = &backends.ensemble;

    let probes: Vec<(Option<PartialFrameState>, Option<f64>)> = expansions
        .par_iter_mut()
        .map(|e| {
            let mut state: Option<PartialFrameState> = None;
            let clarity = loop {
                let done = state.as_ref().map_or(0, |s| s.steps_done);
                let take = stride.min(budget - done);
                match partial_node(generator, &e.spec, &backends.prompts, schedule, state.as_ref(), take) {
                    Ok((st, cost)) => {
                        e.costs.push(cost);
                        let decision = clarity_gate(&st, cfg.clarity_threshold);
                        let complete = st.is_complete();
                        state = Some(st);
                        if decision.verdict || complete {
                            break decision;
                        }
                    }
                    Err(err) => {
                        e.fail(&err);
                        return (None, None);
                    }
                }
            };
            e.gates.clarity = Some(clarity.verdict);
            let st = state.expect("at least one probe");
            if !clarity.verdict {
                return (Some(st), None);
            }
            let frame = FrameInput {
                latent: &st.latent_ref,
                parent: e.spec.parent.as_ref().map(|(_, l)| l),
                frame_index: e.spec.frame_index,
                stage: e.spec.stage,
            };
            e.costs.push(CostEvent::verify(CostCall::Gate, Some(e.spec.node_id)));
            let score = match potential_gate(
                &clarity,
                &frame,
                backends.prompts.stage_prompt(e.spec.stage),
                ensemble,
                f64::NEG_INFINITY,
            ) {
                Ok((_, s)) => Some(s),
                Err(err) => {
                    // fail open
                    log::warn!("potential gate fault on {}: {err}", e.spec.node_id);
                    None
                }
            };
            (Some(st), score)
        })
        .collect();

    let scored: Vec<f64> = probes.iter().filter_map(|p| p.1).collect();
    let threshold = match cfg.potential_threshold {
        PotentialThreshold::Fixed(x) => x,
        PotentialThreshold::SiblingMedian if scored.is_empty() => f64::NEG_INFINITY,
        PotentialThreshold::SiblingMedian => median(&scored),
    };
    let mut pass: Vec<bool> = probes
        .iter()
        .zip(expansions.iter_mut())
        .map(|((_, score), e)| {
            if e.status == NodeStatus::Failed {
                return false;
            }
            let verdict = score.is_none_or(|s| GateDecision::potential(s, threshold).verdict);
            if score.is_some() {
                e.gates.potential = Some(verdict);
            }
            verdict
        })
        .collect();

    // gate safety, per parent
    let mut groups: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
    for (i, e) in expansions.iter().enumerate() {
        let parent = e.spec.parent.as_ref().expect("children have parents").0;
        groups.entry(parent).or_default().push(i);
    }
    for members in groups.values() {
        let alive: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| expansions[i].status != NodeStatus::Failed)
            .collect();
        if alive.is_empty() || alive.iter().any(|&i| pass[i]) {
            continue;
        }
        let best = alive
            .iter()
            .copied()
            .max_by(|&a, &b| {
                let sa = probes[a].1.unwrap_or(f64::INFINITY);
                let sb = probes[b].1.unwrap_or(f64::INFINITY);
                sa.total_cmp(&sb)
                    .then_with(|| expansions[b].spec.node_id.cmp(&expansions[a].spec.node_id))
            })
            .expect("non-empty");
        pass[best] = true;
        expansions[best].gates.resurrected = true;
    }

    expansions
        .par_iter_mut()
        .zip(probes.into_par_iter())
        .zip(pass.into_par_iter())
        .for_each(|((e, (state, _)), keep)| {
            if e.status == NodeStatus::Failed {
                return;
            }
            let state = state.expect("probed");
            if !keep {
                e.status = NodeStatus::Rejected;
                e.latent = Some(state.latent_ref);
                return;
            }
            if state.is_complete() {
                e.latent = Some(state.latent_ref);
                return;
            }
            let rest = budget - state.steps_done;
            match partial_node(generator, &e.spec, &backends.prompts, schedule, Some(&state), rest) {
                Ok((done, cost)) => {
                    e.costs.push(cost);
                    e.latent = Some(done.latent_ref);
                }
                Err(err) => e.fail(&err),
            }
        });
}
