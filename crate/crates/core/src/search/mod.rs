//! Best-of-N linear search and tree-of-frames search.

mod frontier;
mod linear;
mod tof;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use frontier::{
    branch_factor, frontier_order, prune_top_k, pruning_sizes, FrontierQueue, PruneError, PruneOutcome,
};
pub use linear::random_linear_search;
pub use tof::tof_search;

use crate::analysis::ledger::{CostCall, CostEvent, NfeLedger};
use crate::generator::{decode, Generator, GeneratorError, SyntheticGenerator, SyntheticLandscape};
use crate::model::{
    validate_config, Algorithm, CandidateNode, ConfigReport, NodeId, PathError, RunConfig, SearchPath, Stage,
    StagedPrompts,
};
use crate::verifier::{
    decompose_prompt, synthetic_verifier, DecomposeError, TemplateDecomposer, VerifierEnsemble, VerifierFault,
};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Config(#[from] ConfigReport),
    #[error("algorithm {0:?} cannot run through this entry point")]
    WrongAlgorithm(Algorithm),
    #[error("every candidate failed to generate: {0}")]
    AllFailed(GeneratorError),
    #[error("level {level}: every expansion failed")]
    LevelExhausted { level: usize },
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error("unknown verifier '{0}' (no worker provides it)")]
    UnknownVerifier(String),
}

impl SearchError {
    /// True when the failure came from a generator or verifier backend
    /// rather than from the configuration.
    pub fn is_backend_fault(&self) -> bool {
        matches!(
            self,
            SearchError::AllFailed(_) | SearchError::LevelExhausted { .. } | SearchError::Generator(_)
        )
    }
}

/// Generator, verifier ensemble and staged prompts for one run.
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn Generator>,
    pub ensemble: VerifierEnsemble,
    pub prompts: StagedPrompts,
}

impl Backends {
    /// In-process synthetic backends. The landscape is keyed by
    /// `master_seed`.
    pub fn synthetic(config: &RunConfig) -> Result<Self, SearchError> {
        let landscape = Arc::new(SyntheticLandscape::from_seed(config.master_seed));
        Self::synthetic_on(config, landscape)
    }

    pub fn synthetic_on(config: &RunConfig, landscape: Arc<SyntheticLandscape>) -> Result<Self, SearchError> {
        let mut members = Vec::new();
        for (id, &w) in &config.verifier_weights {
            let v = synthetic_verifier(id, &landscape).ok_or_else(|| SearchError::UnknownVerifier(id.clone()))?;
            members.push((v, w));
        }
        if members.is_empty() {
            return Err(ConfigReport {
                violations: vec!["at least one verifier weight is required".into()],
            }
            .into());
        }
        Ok(Backends {
            generator: Arc::new(SyntheticGenerator::new(landscape)),
            ensemble: VerifierEnsemble::new(members),
            prompts: decompose_prompt(&config.prompt, &TemplateDecomposer)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialThreshold {
    /// Median of the potential scores of all children at the level.
    SiblingMedian,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub clarity_threshold: f64,
    pub potential_threshold: PotentialThreshold,
    /// Steps per partial-denoise probe; `None` means a fifth of the budget.
    pub probe_stride: Option<u32>,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            clarity_threshold: 0.4,
            potential_threshold: PotentialThreshold::SiblingMedian,
            probe_stride: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchOptions {
    /// Image-level gates; only used when the generator supports partial
    /// denoising.
    pub gates: Option<GateConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    /// Linear-search path node.
    Candidate,
    Retained,
    Pruned,
    /// Truncated by the potential gate.
    Rejected,
    /// Generation failed; the node never existed.
    Failed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateVerdicts {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clarity: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub potential: Option<bool>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub resurrected: bool,
}

/// One line of the run's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEvent {
    pub event: NodeStatus,
    pub node_id: NodeId,
    pub parent_id: Option<NodeId>,
    pub t: usize,
    pub stage: Stage,
    pub seed: u64,
    pub h: f64,
    pub s: f64,
    pub gates: GateVerdicts,
    /// NFE spent generating this node.
    pub cost: u64,
}

impl NodeEvent {
    pub(crate) fn of(node: &CandidateNode, status: NodeStatus, gates: GateVerdicts, cost: u64) -> Self {
        NodeEvent {
            event: status,
            node_id: node.node_id,
            parent_id: node.parent_id,
            t: node.frame_index,
            stage: node.stage,
            seed: node.seed,
            h: node.local_reward,
            s: node.total_score,
            gates,
            cost,
        }
    }
}

/// Final re-verification of one complete path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalCandidate {
    pub leaf: NodeId,
    pub accumulated: f64,
    /// Per verifier, in ensemble order.
    pub raw: Vec<Option<f64>>,
    pub aggregated: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchResult {
    pub algorithm: Algorithm,
    pub best_path: SearchPath,
    /// Aggregated rank score of the selected path among the final candidates.
    pub final_aggregated: f64,
    /// Weighted raw video score of the selected path.
    pub quality: f64,
    /// Accumulated heuristic score of the selected leaf.
    pub accumulated: f64,
    pub final_candidates: Vec<FinalCandidate>,
    pub verifier_ids: Vec<String>,
    pub k_sequence: Vec<usize>,
    pub prune_outcomes: Vec<PruneOutcome>,
    pub events: Vec<NodeEvent>,
    pub ledger: NfeLedger,
    pub faults: usize,
}

impl SearchResult {
    /// Best path score over every complete path in the final candidate set.
    pub fn best_completed_quality(&self, ensemble: &VerifierEnsemble) -> Option<f64> {
        self.final_candidates
            .iter()
            .filter_map(|c| weighted(&c.raw, ensemble))
            .max_by(f64::total_cmp)
    }
}

pub(crate) fn weighted(raw: &[Option<f64>], ensemble: &VerifierEnsemble) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, w) in raw.iter().zip(ensemble.weights()) {
        if let Some(r) = r {
            sum += w * r;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Validates `config` and runs the configured search algorithm.
pub fn run_search(config: &RunConfig, backends: &Backends, opts: &SearchOptions) -> Result<SearchResult, SearchError> {
    let config = validate_config(config.clone())?;
    match config.algorithm {
        Algorithm::Linear => random_linear_search(&config, backends),
        Algorithm::Tof => tof_search(&config, backends, opts),
        Algorithm::Oracle => Err(SearchError::WrongAlgorithm(Algorithm::Oracle)),
    }
}

/// Decodes and re-verifies complete paths, then selects by aggregated rank.
pub(crate) fn final_selection(
    backends: &Backends,
    depth: usize,
    paths: &[Vec<CandidateNode>],
    ledger: &mut NfeLedger,
) -> Result<(usize, Vec<FinalCandidate>, usize), SearchError> {
    use rayon::prelude::*;

    let videos = paths
        .par_iter()
        .map(|p| decode(backends.generator.as_ref(), p, depth))
        .collect::<Result<Vec<_>, _>>()?;
    let leaves: Vec<NodeId> = paths.iter().map(|p| p.last().expect("non-empty").node_id).collect();
    let outcome = backends
        .ensemble
        .rank_candidates(&leaves, |v, i| -> Result<f64, VerifierFault> {
            v.score_video(&videos[i], &backends.prompts)
        });
    for _ in 0..backends.ensemble.len() {
        for &leaf in &leaves {
            ledger.record(CostEvent::verify(CostCall::VideoScore, Some(leaf)));
        }
    }
    let candidates = paths
        .iter()
        .enumerate()
        .map(|(i, p)| FinalCandidate {
            leaf: leaves[i],
            accumulated: p.last().expect("non-empty").total_score,
            raw: outcome.raw.iter().map(|r| r[i]).collect(),
            aggregated: outcome.aggregate.scores[i],
        })
        .collect();
    Ok((outcome.aggregate.best_index, candidates, outcome.faults))
}
