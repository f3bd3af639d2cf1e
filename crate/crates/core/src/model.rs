//! Domain types shared by the generator, verifier, search and analysis
//! layers, plus stage lookup and run-configuration validation.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Creation-ordered node identifier, unique within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Intermediate,
    Final,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Initial, Stage::Intermediate, Stage::Final];

    pub fn index(self) -> usize {
        match self {
            Stage::Initial => 0,
            Stage::Intermediate => 1,
            Stage::Final => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Intermediate => "intermediate",
            Stage::Final => "final",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextPrompt {
    pub text: String,
    pub id: String,
}

impl TextPrompt {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            id: id.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSource {
    TemplateDecomposed,
    ExternallySupplied,
}

/// One prompt per stage, ordered initial, intermediate, final.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedPrompts {
    pub initial: TextPrompt,
    pub intermediate: TextPrompt,
    pub r#final: TextPrompt,
    pub source: PromptSource,
}

impl StagedPrompts {
    pub fn for_stage(&self, stage: Stage) -> &TextPrompt {
        match stage {
            Stage::Initial => &self.initial,
            Stage::Intermediate => &self.intermediate,
            Stage::Final => &self.r#final,
        }
    }

    pub fn stage_prompt(&self, stage: Stage) -> StagePrompt<'_> {
        StagePrompt {
            stage,
            prompt: self.for_stage(stage),
        }
    }
}

/// A prompt routed to a particular stage.
#[derive(Debug, Clone, Copy)]
pub struct StagePrompt<'a> {
    pub stage: Stage,
    pub prompt: &'a TextPrompt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneRule {
    /// `k_t = max(1, ceil(k_{t-1} * b_t / 2))`.
    Halve,
    /// Explicit `k_1 .. k_{T-1}`.
    FixedK(Vec<usize>),
    /// Keep every produced node.
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "ScheduleDoc")]
pub struct Schedule {
    pub roots: usize,
    pub depth: usize,
    pub branch_limit: usize,
    pub stage_boundaries: Vec<usize>,
    pub branch_at: Vec<usize>,
    pub prune_rule: PruneRule,
    pub denoise_steps_per_frame: u32,
    pub latent_temporal_length: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleDoc {
    roots: usize,
    depth: usize,
    #[serde(default = "default_branch_limit")]
    branch_limit: usize,
    #[serde(default)]
    stage_boundaries: Option<Vec<usize>>,
    #[serde(default)]
    branch_at: Option<Vec<usize>>,
    #[serde(default = "default_prune_rule")]
    prune_rule: PruneRule,
    #[serde(default = "default_steps")]
    denoise_steps_per_frame: u32,
    #[serde(default = "default_temporal")]
    latent_temporal_length: u32,
}

fn default_branch_limit() -> usize {
    2
}
fn default_prune_rule() -> PruneRule {
    PruneRule::Halve
}
fn default_steps() -> u32 {
    10
}
fn default_temporal() -> u32 {
    1
}

impl From<ScheduleDoc> for Schedule {
    fn from(doc: ScheduleDoc) -> Self {
        let stage_boundaries = doc
            .stage_boundaries
            .unwrap_or_else(|| default_stage_boundaries(doc.depth));
        let branch_at = doc.branch_at.unwrap_or_else(|| stage_boundaries.clone());
        Schedule {
            roots: doc.roots,
            depth: doc.depth,
            branch_limit: doc.branch_limit,
            stage_boundaries,
            branch_at,
            prune_rule: doc.prune_rule,
            denoise_steps_per_frame: doc.denoise_steps_per_frame,
            latent_temporal_length: doc.latent_temporal_length,
        }
    }
}

/// `{1, ceil(0.8 T)}`, clamped so the final stage is non-empty.
pub fn default_stage_boundaries(depth: usize) -> Vec<usize> {
    let tail = (depth * 4).div_ceil(5).min(depth.saturating_sub(1)).max(2);
    vec![1, tail]
}

impl Schedule {
    /// Default tree-of-frames schedule: branch by 2 at the two stage
    /// transitions, halve the frontier every level.
    pub fn tof_default(roots: usize, depth: usize) -> Self {
        let stage_boundaries = default_stage_boundaries(depth);
        Schedule {
            roots,
            depth,
            branch_limit: 2,
            branch_at: stage_boundaries.clone(),
            stage_boundaries,
            prune_rule: PruneRule::Halve,
            denoise_steps_per_frame: default_steps(),
            latent_temporal_length: default_temporal(),
        }
    }

    /// Exhaustive tree: branch everywhere, never prune.
    pub fn exhaustive(roots: usize, depth: usize, branch: usize) -> Self {
        Schedule {
            branch_limit: branch,
            branch_at: (1..depth).collect(),
            prune_rule: PruneRule::None,
            ..Schedule::tof_default(roots, depth)
        }
    }

    pub fn with_roots(&self, roots: usize) -> Self {
        Schedule { roots, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Linear,
    Tof,
    Oracle,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Linear => "linear",
            Algorithm::Tof => "tof",
            Algorithm::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub schedule: Schedule,
    pub prompt: TextPrompt,
    pub verifier_weights: BTreeMap<String, f64>,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker_endpoints: Option<Vec<String>>,
}

impl RunConfig {
    /// Synthetic single-verifier config.
    pub fn synthetic(algorithm: Algorithm, schedule: Schedule, master_seed: u64) -> Self {
        RunConfig {
            algorithm,
            schedule,
            prompt: TextPrompt::new("p0", "a red ball rolls across a wooden table"),
            verifier_weights: BTreeMap::from([("synthetic".to_string(), 1.0)]),
            master_seed,
            worker_endpoints: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Opaque handle into generator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatentRef {
    /// In-process synthetic feature point.
    Features(Arc<Vec<f64>>),
    /// Worker-minted handle; never interpreted by the engine.
    Handle(String),
}

impl LatentRef {
    pub fn features(&self) -> Option<&[f64]> {
        match self {
            LatentRef::Features(f) => Some(f),
            LatentRef::Handle(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateNode {
    pub node_id: NodeId,
    pub parent_id: Option<NodeId>,
    pub frame_index: usize,
    pub seed: u64,
    #[serde(skip)]
    pub latent_ref: LatentRef,
    pub stage: Stage,
    pub local_reward: f64,
    pub total_score: f64,
}

impl CandidateNode {
    /// Sets the local reward and accumulates it onto the parent's total.
    pub fn rewarded(mut self, local_reward: f64, parent_total: f64) -> Self {
        self.local_reward = local_reward;
        self.total_score = parent_total + local_reward;
        self
    }
}

/// A complete root-to-leaf path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchPath {
    pub nodes: Vec<CandidateNode>,
    pub final_score: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum PathError {
    #[error("path has {got} nodes, expected {expected}")]
    Length { got: usize, expected: usize },
    #[error("node {child} does not link to {parent}")]
    Broken { parent: NodeId, child: NodeId },
}

impl SearchPath {
    pub fn new(nodes: Vec<CandidateNode>, depth: usize, final_score: f64) -> Result<Self, PathError> {
        if nodes.len() != depth {
            return Err(PathError::Length {
                got: nodes.len(),
                expected: depth,
            });
        }
        for pair in nodes.windows(2) {
            if pair[1].parent_id != Some(pair[0].node_id) || pair[1].frame_index != pair[0].frame_index + 1 {
                return Err(PathError::Broken {
                    parent: pair[0].node_id,
                    child: pair[1].node_id,
                });
            }
        }
        Ok(SearchPath { nodes, final_score })
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.node_id).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.nodes.iter().map(|n| n.seed).collect()
    }

    pub fn leaf(&self) -> &CandidateNode {
        self.nodes.last().expect("paths are non-empty")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("frame index {t} out of range for depth {depth}")]
pub struct RangeError {
    pub t: usize,
    pub depth: usize,
}

/// Stage containing frame `t`. Frames before the first boundary are
/// initial, frames at or after the second are final.
pub fn stage_of_frame(t: usize, schedule: &Schedule) -> Result<Stage, RangeError> {
    if t >= schedule.depth {
        return Err(RangeError {
            t,
            depth: schedule.depth,
        });
    }
    let first = schedule.stage_boundaries.first().copied().unwrap_or(1);
    let second = schedule.stage_boundaries.get(1).copied().unwrap_or(schedule.depth - 1);
    Ok(if t < first {
        Stage::Initial
    } else if t < second {
        Stage::Intermediate
    } else {
        Stage::Final
    })
}

/// Every violated invariant of a [`RunConfig`].
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("invalid run config: {}", .violations.join("; "))]
pub struct ConfigReport {
    pub violations: Vec<String>,
}

pub fn validate_config(config: RunConfig) -> Result<RunConfig, ConfigReport> {
    let mut violations = Vec::new();
    violations.extend(schedule_violations(&config.schedule));
    if config.prompt.text.is_empty() {
        violations.push("prompt text must be non-empty".into());
    }
    if config.verifier_weights.is_empty() {
        violations.push("at least one verifier weight is required".into());
    }
    for (id, &w) in &config.verifier_weights {
        if !(w.is_finite() && w > 0.0) {
            violations.push(format!(
                "verifier weight for '{id}' must be strictly positive and finite, got {w}"
            ));
        }
    }
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(ConfigReport { violations })
    }
}

pub fn validate_schedule(schedule: &Schedule) -> Result<(), ConfigReport> {
    let violations = schedule_violations(schedule);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(ConfigReport { violations })
    }
}

fn schedule_violations(s: &Schedule) -> Vec<String> {
    let mut v = Vec::new();
    if s.roots == 0 {
        v.push("roots (N) must be positive".into());
    }
    if s.depth < 2 {
        v.push(format!("depth (T) must be at least 2, got {}", s.depth));
    }
    if s.branch_limit == 0 {
        v.push("branch_limit must be positive".into());
    }
    if s.denoise_steps_per_frame == 0 {
        v.push("denoise_steps_per_frame must be positive".into());
    }
    if s.latent_temporal_length == 0 {
        v.push("latent_temporal_length must be positive".into());
    }
    let b = &s.stage_boundaries;
    if b.len() != 2 {
        v.push(format!(
            "stage_boundaries must yield 3 stages (2 boundaries), got {} boundaries",
            b.len()
        ));
    } else if !(0 < b[0] && b[0] < b[1] && b[1] < s.depth) {
        v.push(format!(
            "stage_boundaries {:?} must satisfy 0 < b1 < b2 < T={} so every stage is non-empty",
            b, s.depth
        ));
    }
    for &t in &s.branch_at {
        if t == 0 || t >= s.depth {
            v.push(format!(
                "branch_at index {t} outside [1, {}]",
                s.depth.saturating_sub(1)
            ));
        }
    }
    if let PruneRule::FixedK(ks) = &s.prune_rule {
        if ks.len() + 1 < s.depth {
            v.push(format!(
                "fixed-k prune rule needs {} sizes (k_1..k_(T-1)), got {}",
                s.depth.saturating_sub(1),
                ks.len()
            ));
        }
        if ks.contains(&0) {
            v.push("fixed-k prune sizes must be at least 1".into());
        }
    }
    v
}
