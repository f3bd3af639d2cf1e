//! Verifiers, stage-routed prompts, image-level gates and rank-based
//! multi-verifier aggregation.
//!
//! Aggregation converts each verifier's raw scores into ranks (rank `n` is
//! the best of `n` candidates, ties go to the lower node id) and combines
//! them as `H(i) = (1/|M|) * sum_v c_v * rank_v(i)`. The selected candidate
//! is the argmax of `H`, again preferring the lower node id on ties.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{dist2, dot, DecodedVideo, PartialFrameState, SyntheticLandscape};
use crate::model::{CandidateNode, LatentRef, NodeId, PromptSource, Stage, StagePrompt, StagedPrompts, TextPrompt};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifierFault {
    #[error("verifier transport error: {0}")]
    Transport(String),
    #[error("verifier timed out")]
    Timeout,
    #[error("verifier returned non-finite score {0}")]
    NonFinite(f64),
    #[error("verifier cannot score this input: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierMode {
    Frame,
    Clip,
    Final,
}

/// A single frame in context.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub latent: &'a LatentRef,
    pub parent: Option<&'a LatentRef>,
    pub frame_index: usize,
    pub stage: Stage,
}

impl<'a> FrameInput<'a> {
    pub fn of_node(node: &'a CandidateNode, parent: Option<&'a CandidateNode>) -> Self {
        FrameInput {
            latent: &node.latent_ref,
            parent: parent.map(|p| &p.latent_ref),
            frame_index: node.frame_index,
            stage: node.stage,
        }
    }
}

pub trait Verifier: Send + Sync {
    fn id(&self) -> &str;

    fn deterministic(&self) -> bool {
        true
    }

    fn score_frame(&self, frame: &FrameInput<'_>, prompt: StagePrompt<'_>) -> Result<f64, VerifierFault>;

    fn score_video(&self, video: &DecodedVideo, prompts: &StagedPrompts) -> Result<f64, VerifierFault>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifierScore {
    pub verifier_id: String,
    pub node_id: NodeId,
    pub raw_score: f64,
    pub stage: Stage,
}

fn finite(x: f64) -> Result<f64, VerifierFault> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(VerifierFault::NonFinite(x))
    }
}

/// Frame-level score of `node` under its stage prompt.
pub fn score(
    verifier: &dyn Verifier,
    node: &CandidateNode,
    parent: Option<&CandidateNode>,
    prompts: &StagedPrompts,
) -> Result<VerifierScore, VerifierFault> {
    let raw = verifier.score_frame(&FrameInput::of_node(node, parent), prompts.stage_prompt(node.stage))?;
    Ok(VerifierScore {
        verifier_id: verifier.id().to_string(),
        node_id: node.node_id,
        raw_score: finite(raw)?,
        stage: node.stage,
    })
}

/// Whole-video score, attributed to the leaf node.
pub fn score_video(
    verifier: &dyn Verifier,
    leaf: NodeId,
    video: &DecodedVideo,
    prompts: &StagedPrompts,
) -> Result<VerifierScore, VerifierFault> {
    let raw = verifier.score_video(video, prompts)?;
    Ok(VerifierScore {
        verifier_id: verifier.id().to_string(),
        node_id: leaf,
        raw_score: finite(raw)?,
        stage: Stage::Final,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticScore {
    /// Alignment minus smoothness penalty; the landscape's closed form.
    Quality,
    /// Stage alignment only.
    Alignment,
    /// Negated squared frame-to-frame distance.
    Smoothness,
}

/// Closed-form verifier over a [`SyntheticLandscape`].
#[derive(Debug, Clone)]
pub struct SyntheticVerifier {
    id: String,
    landscape: Arc<SyntheticLandscape>,
    kind: SyntheticScore,
}

impl SyntheticVerifier {
    pub fn new(id: impl Into<String>, landscape: Arc<SyntheticLandscape>, kind: SyntheticScore) -> Self {
        SyntheticVerifier {
            id: id.into(),
            landscape,
            kind,
        }
    }

    pub fn quality(landscape: Arc<SyntheticLandscape>) -> Self {
        Self::new("synthetic", landscape, SyntheticScore::Quality)
    }

    fn frame(&self, x: &[f64], parent: Option<&[f64]>, stage: Stage) -> f64 {
        match self.kind {
            SyntheticScore::Quality => self.landscape.frame_quality(x, parent, stage),
            SyntheticScore::Alignment => dot(x, self.landscape.target(stage)),
            SyntheticScore::Smoothness => parent.map_or(0.0, |p| -dist2(x, p)),
        }
    }
}

fn features(latent: &LatentRef) -> Result<&[f64], VerifierFault> {
    latent
        .features()
        .ok_or_else(|| VerifierFault::Unsupported("synthetic verifier needs feature latents".into()))
}

impl Verifier for SyntheticVerifier {
    fn id(&self) -> &str {
        &self.id
    }

    fn score_frame(&self, frame: &FrameInput<'_>, prompt: StagePrompt<'_>) -> Result<f64, VerifierFault> {
        let x = features(frame.latent)?;
        let parent = frame.parent.map(features).transpose()?;
        Ok(self.frame(x, parent, prompt.stage))
    }

    fn score_video(&self, video: &DecodedVideo, _prompts: &StagedPrompts) -> Result<f64, VerifierFault> {
        let feats = video.frames.iter().map(features).collect::<Result<Vec<_>, _>>()?;
        if self.kind == SyntheticScore::Quality {
            return Ok(self.landscape.path_quality(&feats, &video.stages));
        }
        let mut total = 0.0;
        for (i, (x, &stage)) in feats.iter().zip(&video.stages).enumerate() {
            total += self.frame(x, (i > 0).then(|| feats[i - 1]), stage);
        }
        Ok(total / feats.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct ConstantVerifier {
    id: String,
    value: f64,
}

impl ConstantVerifier {
    pub fn new(id: impl Into<String>, value: f64) -> Self {
        ConstantVerifier { id: id.into(), value }
    }
}

impl Verifier for ConstantVerifier {
    fn id(&self) -> &str {
        &self.id
    }
    fn score_frame(&self, _: &FrameInput<'_>, _: StagePrompt<'_>) -> Result<f64, VerifierFault> {
        Ok(self.value)
    }
    fn score_video(&self, _: &DecodedVideo, _: &StagedPrompts) -> Result<f64, VerifierFault> {
        Ok(self.value)
    }
}

/// Builds the in-process verifier for a well-known id.
pub fn synthetic_verifier(id: &str, landscape: &Arc<SyntheticLandscape>) -> Option<Arc<dyn Verifier>> {
    let kind = match id {
        "synthetic" => SyntheticScore::Quality,
        "alignment" => SyntheticScore::Alignment,
        "smoothness" => SyntheticScore::Smoothness,
        "constant" => return Some(Arc::new(ConstantVerifier::new(id, 0.0))),
        _ => return None,
    };
    Some(Arc::new(SyntheticVerifier::new(id, landscape.clone(), kind)))
}

/// One verifier's ranking over a candidate set. `ranks[i]` belongs to
/// `candidates[i]`; rank `n` is best.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankTable {
    pub verifier_id: String,
    pub candidates: Vec<NodeId>,
    pub ranks: Vec<usize>,
}

impl RankTable {
    /// Ranks raw scores: sort by score descending, then node id ascending,
    /// and hand out `n, n-1, .., 1` in that order.
    pub fn from_scores(verifier_id: impl Into<String>, scores: &[(NodeId, f64)]) -> Self {
        let n = scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .1
                .total_cmp(&scores[a].1)
                .then_with(|| scores[a].0.cmp(&scores[b].0))
        });
        let mut ranks = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            ranks[i] = n - pos;
        }
        RankTable {
            verifier_id: verifier_id.into(),
            candidates: scores.iter().map(|s| s.0).collect(),
            ranks,
        }
    }

    pub fn is_permutation(&self) -> bool {
        let mut sorted = self.ranks.clone();
        sorted.sort_unstable();
        sorted.iter().enumerate().all(|(i, &r)| r == i + 1)
    }

    pub fn top(&self) -> Option<NodeId> {
        self.ranks
            .iter()
            .position(|&r| r == self.ranks.len())
            .map(|i| self.candidates[i])
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregateError {
    #[error("aggregation needs at least one rank table")]
    Empty,
    #[error("rank table '{0}' ranks a different candidate set")]
    MismatchedCandidates(String),
    #[error("rank table '{0}' is not a permutation of 1..n")]
    NotPermutation(String),
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("weights must be positive and finite")]
    BadWeight,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    /// In the first table's candidate order.
    pub candidates: Vec<NodeId>,
    pub scores: Vec<f64>,
    pub best_index: usize,
    pub best: NodeId,
}

const TIE_RELATIVE: f64 = 1e-12;

fn beats(a: (f64, NodeId), b: (f64, NodeId)) -> bool {
    let tol = TIE_RELATIVE * a.0.abs().max(b.0.abs());
    if (a.0 - b.0).abs() <= tol {
        a.1 < b.1
    } else {
        a.0 > b.0
    }
}

/// Weighted rank aggregation over tables that all rank the same candidates.
pub fn aggregate(tables: &[RankTable], weights: &[f64]) -> Result<Aggregate, AggregateError> {
    let first = tables.first().ok_or(AggregateError::Empty)?;
    if weights.len() != tables.len() {
        return Err(AggregateError::WeightCount {
            expected: tables.len(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(AggregateError::BadWeight);
    }
    let candidates = first.candidates.clone();
    let n = candidates.len();
    let mut sorted_ids = candidates.clone();
    sorted_ids.sort_unstable();
    // rank lookup per table, aligned to the first table's order
    let mut aligned: Vec<Vec<usize>> = Vec::with_capacity(tables.len());
    for table in tables {
        if !table.is_permutation() || table.ranks.len() != table.candidates.len() {
            return Err(AggregateError::NotPermutation(table.verifier_id.clone()));
        }
        let mut ids = table.candidates.clone();
        ids.sort_unstable();
        if ids != sorted_ids || ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(AggregateError::MismatchedCandidates(table.verifier_id.clone()));
        }
        let ranks = candidates
            .iter()
            .map(|id| {
                let pos = table.candidates.iter().position(|c| c == id).expect("same set");
                table.ranks[pos]
            })
            .collect();
        aligned.push(ranks);
    }
    let m = tables.len() as f64;
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let sum: f64 = aligned.iter().zip(weights).map(|(r, c)| c * r[i] as f64).sum();
            sum / m
        })
        .collect();
    let mut best_index = 0;
    for i in 1..n {
        if beats((scores[i], candidates[i]), (scores[best_index], candidates[best_index])) {
            best_index = i;
        }
    }
    Ok(Aggregate {
        best: candidates[best_index],
        candidates,
        scores,
        best_index,
    })
}

/// An ordered, weighted verifier set.
#[derive(Clone)]
pub struct VerifierEnsemble {
    members: Vec<(Arc<dyn Verifier>, f64)>,
}

impl std::fmt::Debug for VerifierEnsemble {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list()
            .entries(self.members.iter().map(|(v, w)| (v.id().to_string(), *w)))
            .finish()
    }
}

/// Per-candidate, per-verifier raw scores plus the aggregate over them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleOutcome {
    pub aggregate: Aggregate,
    /// `raw[v][i]`; `None` when verifier `v` faulted on candidate `i`.
    pub raw: Vec<Vec<Option<f64>>>,
    pub faults: usize,
}

impl EnsembleOutcome {
    /// `(1/|M|) * sum_v c_v * raw_v(i)` over the verifiers that scored `i`.
    pub fn weighted_raw(&self, ensemble: &VerifierEnsemble, i: usize) -> Option<f64> {
        weighted_mean(self.raw.iter().zip(ensemble.weights()).map(|(r, w)| (r[i], w)))
    }
}

fn weighted_mean(items: impl Iterator<Item = (Option<f64>, f64)>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (score, w) in items {
        if let Some(s) = score {
            sum += w * s;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

impl VerifierEnsemble {
    pub fn new(members: Vec<(Arc<dyn Verifier>, f64)>) -> Self {
        assert!(!members.is_empty(), "an ensemble needs at least one verifier");
        VerifierEnsemble { members }
    }

    pub fn single(verifier: Arc<dyn Verifier>) -> Self {
        Self::new(vec![(verifier, 1.0)])
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.members.iter().map(|(v, _)| v.id().to_string()).collect()
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.members.iter().map(|(_, w)| *w)
    }

    pub fn deterministic(&self) -> bool {
        self.members.iter().all(|(v, _)| v.deterministic())
    }

    /// Scores every candidate with every verifier and aggregates the ranks.
    ///
    /// A faulted score is imputed with the median of that verifier's other
    /// scores so the candidate is neither rewarded nor eliminated. A verifier
    /// that faults on every candidate is left out of the aggregate.
    pub fn rank_candidates<F>(&self, candidates: &[NodeId], score: F) -> EnsembleOutcome
    where
        F: Fn(&dyn Verifier, usize) -> Result<f64, VerifierFault> + Sync,
    {
        let raw: Vec<Vec<Option<f64>>> = self
            .members
            .iter()
            .map(|(v, _)| {
                (0..candidates.len())
                    .into_par_iter()
                    .map(|i| match score(v.as_ref(), i).and_then(finite) {
                        Ok(s) => Some(s),
                        Err(fault) => {
                            log::warn!("verifier {} fault on {}: {fault}", v.id(), candidates[i]);
                            None
                        }
                    })
                    .collect()
            })
            .collect();
        let faults = raw.iter().flatten().filter(|s| s.is_none()).count();

        let mut tables = Vec::new();
        let mut weights = Vec::new();
        for ((v, w), scores) in self.members.iter().zip(&raw) {
            let ok: Vec<f64> = scores.iter().flatten().copied().collect();
            if ok.is_empty() {
                continue;
            }
            let fill = median(&ok);
            let pairs: Vec<(NodeId, f64)> = candidates
                .iter()
                .zip(scores)
                .map(|(&id, s)| (id, s.unwrap_or(fill)))
                .collect();
            tables.push(RankTable::from_scores(v.id(), &pairs));
            weights.push(*w);
        }
        let aggregate = if tables.is_empty() {
            // every verifier failed: all candidates tie
            let flat = RankTable::from_scores("none", &candidates.iter().map(|&c| (c, 0.0)).collect::<Vec<_>>());
            let mut agg = aggregate(&[flat], &[1.0]).expect("well-formed table");
            agg.scores.iter_mut().for_each(|s| *s = 0.0);
            agg
        } else {
            aggregate(&tables, &weights).expect("tables built over one candidate set")
        };
        EnsembleOutcome { aggregate, raw, faults }
    }
}

/// Weighted mean of the member scores, skipping faulted members.
impl Verifier for VerifierEnsemble {
    fn id(&self) -> &str {
        "ensemble"
    }

    fn deterministic(&self) -> bool {
        VerifierEnsemble::deterministic(self)
    }

    fn score_frame(&self, frame: &FrameInput<'_>, prompt: StagePrompt<'_>) -> Result<f64, VerifierFault> {
        let mut last = None;
        let scores: Vec<(Option<f64>, f64)> = self
            .members
            .iter()
            .map(|(v, w)| match v.score_frame(frame, prompt).and_then(finite) {
                Ok(s) => (Some(s), *w),
                Err(e) => {
                    last = Some(e);
                    (None, *w)
                }
            })
            .collect();
        weighted_mean(scores.into_iter()).ok_or_else(|| last.unwrap_or(VerifierFault::Timeout))
    }

    fn score_video(&self, video: &DecodedVideo, prompts: &StagedPrompts) -> Result<f64, VerifierFault> {
        let mut last = None;
        let scores: Vec<(Option<f64>, f64)> = self
            .members
            .iter()
            .map(|(v, w)| match v.score_video(video, prompts).and_then(finite) {
                Ok(s) => (Some(s), *w),
                Err(e) => {
                    last = Some(e);
                    (None, *w)
                }
            })
            .collect();
        weighted_mean(scores.into_iter()).ok_or_else(|| last.unwrap_or(VerifierFault::Timeout))
    }
}

pub(crate) fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecomposeError {
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("decomposer returned {0} prompts, expected 3")]
    Protocol(usize),
    #[error("decomposer failed: {0}")]
    Backend(String),
}

pub trait PromptDecomposer: Send + Sync {
    fn source(&self) -> PromptSource;
    /// Ordered initial, intermediate, final.
    fn decompose(&self, prompt: &TextPrompt) -> Result<Vec<String>, DecomposeError>;
}

/// Appends a fixed per-stage suffix to the base prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateDecomposer;

impl TemplateDecomposer {
    const SUFFIXES: [&'static str; 3] = [
        "static scene: the subject, its appearance and layout in the opening frame",
        "motion: the action and its direction as it unfolds",
        "ending: the state of the scene once the action completes",
    ];
}

impl PromptDecomposer for TemplateDecomposer {
    fn source(&self) -> PromptSource {
        PromptSource::TemplateDecomposed
    }

    fn decompose(&self, prompt: &TextPrompt) -> Result<Vec<String>, DecomposeError> {
        Ok(Self::SUFFIXES.iter().map(|s| format!("{}; {s}", prompt.text)).collect())
    }
}

pub fn decompose_prompt(
    prompt: &TextPrompt,
    decomposer: &dyn PromptDecomposer,
) -> Result<StagedPrompts, DecomposeError> {
    if prompt.text.is_empty() {
        return Err(DecomposeError::EmptyPrompt);
    }
    let parts = decomposer.decompose(prompt)?;
    let [initial, intermediate, ending]: [String; 3] = parts
        .try_into()
        .map_err(|v: Vec<String>| DecomposeError::Protocol(v.len()))?;
    let staged = |stage: Stage, text: String| TextPrompt::new(format!("{}/{}", prompt.id, stage), text);
    Ok(StagedPrompts {
        initial: staged(Stage::Initial, initial),
        intermediate: staged(Stage::Intermediate, intermediate),
        r#final: staged(Stage::Final, ending),
        source: decomposer.source(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    Clarity,
    Potential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateDecision {
    pub gate: GateKind,
    pub verdict: bool,
    pub threshold: f64,
}

impl GateDecision {
    pub fn potential(score: f64, threshold: f64) -> Self {
        GateDecision {
            gate: GateKind::Potential,
            verdict: score >= threshold,
            threshold,
        }
    }
}

/// Passes when the frame is denoised far enough to be judged.
pub fn clarity_gate(state: &PartialFrameState, threshold: f64) -> GateDecision {
    GateDecision {
        gate: GateKind::Clarity,
        verdict: state.denoise_progress >= threshold,
        threshold,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GateError {
    #[error("potential gate requires a passed clarity decision")]
    OutOfOrder,
    #[error(transparent)]
    Fault(#[from] VerifierFault),
}

/// Passes when the partial frame scores at least `threshold`. Returns the
/// decision and the score that produced it.
pub fn potential_gate(
    clarity: &GateDecision,
    frame: &FrameInput<'_>,
    prompt: StagePrompt<'_>,
    verifier: &dyn Verifier,
    threshold: f64,
) -> Result<(GateDecision, f64), GateError> {
    if clarity.gate != GateKind::Clarity || !clarity.verdict {
        return Err(GateError::OutOfOrder);
    }
    let s = finite(verifier.score_frame(frame, prompt)?)?;
    Ok((GateDecision::potential(s, threshold), s))
}
