use rayon::prelude::*;

use super::{final_selection, weighted, Backends, GateVerdicts, NodeEvent, NodeStatus, SearchError, SearchResult};
use crate::analysis::ledger::{CostEvent, NfeLedger};
use crate::generator::{generate_node, GeneratorError, NodeSpec};
use crate::model::{Algorithm, CandidateNode, NodeId, RunConfig, SearchPath};
use crate::seed::{child_seed, root_seed};

struct PathRun {
    nodes: Vec<CandidateNode>,
    costs: Vec<CostEvent>,
    failure: Option<(NodeSpec, GeneratorError)>,
}

/// Best-of-N: `N` independent full-budget trajectories, selected by
/// aggregated verifier rank. Node ids are `i * T + t`.
pub fn random_linear_search(config: &RunConfig, backends: &Backends) -> Result<SearchResult, SearchError> {
    if config.algorithm != Algorithm::Linear {
        return Err(SearchError::WrongAlgorithm(config.algorithm));
    }
    let schedule = &config.schedule;
    let depth = schedule.depth;
    let steps = schedule.denoise_steps_per_frame;

    let runs: Vec<PathRun> = (0..schedule.roots)
        .into_par_iter()
        .map(|i| {
            let base = (i * depth) as u64;
            let mut run = PathRun {
                nodes: Vec::with_capacity(depth),
                costs: Vec::with_capacity(depth),
                failure: None,
            };
            let mut seed = root_seed(config.master_seed, i);
            for t in 0..depth {
                let id = NodeId(base + t as u64);
                let spec = match run.nodes.last() {
                    None => NodeSpec::root(id, seed),
                    Some(parent) => {
                        seed = child_seed(parent.seed, 0, t);
                        match NodeSpec::child(id, parent, seed, schedule) {
                            Ok(s) => s,
                            Err(e) => {
                                run.failure = Some((NodeSpec::root(id, seed), e));
                                break;
                            }
                        }
                    }
                };
                match generate_node(
                    backends.generator.as_ref(),
                    spec.clone(),
                    &backends.prompts,
                    schedule,
                    steps,
                ) {
                    Ok((node, cost)) => {
                        run.nodes.push(node);
                        run.costs.push(cost);
                    }
                    Err(e) => {
                        run.failure = Some((spec, e));
                        break;
                    }
                }
            }
            run
        })
        .collect();

    let mut ledger = NfeLedger::new();
    let mut events = Vec::new();
    let mut complete = Vec::new();
    let mut last_error = None;
    let mut faults = 0;
    for run in runs {
        for (node, cost) in run.nodes.iter().zip(&run.costs) {
            events.push(NodeEvent::of(
                node,
                NodeStatus::Candidate,
                GateVerdicts::default(),
                cost.nfe(),
            ));
        }
        ledger.extend_from(run.costs);
        match run.failure {
            Some((spec, err)) => {
                log::warn!("linear candidate dropped at {}: {err}", spec.node_id);
                faults += 1;
                events.push(NodeEvent::of(
                    &spec.into_node(crate::model::LatentRef::Handle(String::new())),
                    NodeStatus::Failed,
                    GateVerdicts::default(),
                    0,
                ));
                last_error = Some(err);
            }
            None => complete.push(run.nodes),
        }
    }
    if complete.is_empty() {
        return Err(SearchError::AllFailed(
            last_error.unwrap_or(GeneratorError::Precondition("no roots".into())),
        ));
    }

    let (best, final_candidates, verify_faults) = final_selection(backends, depth, &complete, &mut ledger)?;
    let chosen = &final_candidates[best];
    let quality = weighted(&chosen.raw, &backends.ensemble).unwrap_or(0.0);
    let final_aggregated = chosen.aggregated;
    let best_path = SearchPath::new(complete.swap_remove(best), depth, final_aggregated)?;
    Ok(SearchResult {
        algorithm: Algorithm::Linear,
        accumulated: best_path.leaf().total_score,
        best_path,
        final_aggregated,
        quality,
        final_candidates,
        verifier_ids: backends.ensemble.ids(),
        k_sequence: vec![schedule.roots; depth],
        prune_outcomes: Vec::new(),
        events,
        ledger,
        faults: faults + verify_faults,
    })
}
