//! Generator interface and the synthetic sandbox generator.
//!
//! A [`Generator`] maps a prefix latent, a seed and a stage prompt to the
//! next frame latent. The synthetic implementation works on unit feature
//! vectors in `R^d`: a root is a hashed point on the sphere, and each child
//! is pulled toward its stage's target direction and jittered by a hashed
//! perturbation. Path quality therefore has a closed form in the seed chain,
//! which is what makes exact oracles possible.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::ledger::{CostCall, CostEvent};
use crate::model::{stage_of_frame, CandidateNode, LatentRef, NodeId, Schedule, Stage, StagePrompt, StagedPrompts};
use crate::seed::{mix64, unit_vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorError {
    #[error("generator transport error: {0}")]
    Transport(String),
    #[error("generator lacks capability: {0}")]
    Capability(&'static str),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("step budget must be in 1..={max}, got {got}")]
    StepBudget { got: u32, max: u32 },
    #[error("frame index {t} exceeds depth {depth}")]
    DepthOverflow { t: usize, depth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_partial_denoise: bool,
    pub supports_branching: bool,
    pub deterministic: bool,
    /// Abstract cost units per generation call.
    pub cost_per_call: f64,
}

/// Everything that determines a frame: prefix latent, frame index, seed and
/// stage prompt. Generator output must be a pure function of it.
#[derive(Debug, Clone, Copy)]
pub struct ExpandRequest<'a> {
    pub parent: Option<&'a LatentRef>,
    pub frame_index: usize,
    pub seed: u64,
    pub prompt: StagePrompt<'a>,
    pub steps_per_frame: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartialFrameState {
    pub latent_ref: LatentRef,
    pub denoise_progress: f64,
    pub steps_done: u32,
    pub steps_per_frame: u32,
}

impl PartialFrameState {
    pub fn is_complete(&self) -> bool {
        self.steps_done >= self.steps_per_frame
    }
}

/// Decoded video. For the synthetic generator the frames are the feature
/// points themselves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodedVideo {
    pub frames: Vec<LatentRef>,
    pub stages: Vec<Stage>,
}

pub trait Generator: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Runs `steps` denoising steps from scratch. A root when
    /// `req.parent` is `None`.
    fn generate(&self, req: &ExpandRequest<'_>, steps: u32) -> Result<LatentRef, GeneratorError>;

    /// Runs `steps` more steps, starting from `from` when resuming.
    fn partial_denoise(
        &self,
        req: &ExpandRequest<'_>,
        from: Option<&PartialFrameState>,
        steps: u32,
    ) -> Result<PartialFrameState, GeneratorError>;

    fn decode(&self, frames: &[LatentRef], stages: &[Stage]) -> Result<DecodedVideo, GeneratorError>;
}

/// Closed-form stand-in for a video model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLandscape {
    pub hash_key: u64,
    pub dimension: usize,
    /// Smoothness penalty weight.
    pub lambda: f64,
    /// Slerp fraction toward the stage target per frame.
    pub pull: f64,
    /// Scale of the hashed per-frame perturbation.
    pub jitter: f64,
    /// Unit target per stage, indexed by [`Stage::index`].
    pub targets: [Vec<f64>; 3],
}

const LANDSCAPE_SALT: u64 = 0x6C61_6E64_7363_6170;
const NOISE_SALT: u64 = 0x6E6F_6973_6520_2020;
const TARGET_SALT: u64 = 0x7461_7267_6574_7321;

impl SyntheticLandscape {
    pub const DEFAULT_DIMENSION: usize = 8;

    pub fn from_seed(seed: u64) -> Self {
        Self::with_params(seed, Self::DEFAULT_DIMENSION, 0.5, 0.05, 0.1)
    }

    pub fn with_params(seed: u64, dimension: usize, lambda: f64, pull: f64, jitter: f64) -> Self {
        assert!(dimension >= 2, "landscape dimension must be at least 2");
        let hash_key = mix64(seed ^ LANDSCAPE_SALT);
        let target = |i: u64| unit_vector(hash_key ^ TARGET_SALT, i, dimension);
        SyntheticLandscape {
            hash_key,
            dimension,
            lambda,
            pull,
            jitter,
            targets: [target(0), target(1), target(2)],
        }
    }

    pub fn target(&self, stage: Stage) -> &[f64] {
        &self.targets[stage.index()]
    }

    pub fn root_feature(&self, seed: u64) -> Vec<f64> {
        unit_vector(self.hash_key, seed, self.dimension)
    }

    /// `normalize(slerp(parent, target, pull) + jitter * u(seed))`.
    pub fn child_feature(&self, parent: &[f64], seed: u64, stage: Stage) -> Vec<f64> {
        let pulled = slerp(parent, self.target(stage), self.pull);
        let noise = unit_vector(self.hash_key, seed, self.dimension);
        let mut out: Vec<f64> = pulled.iter().zip(&noise).map(|(p, n)| p + self.jitter * n).collect();
        normalize(&mut out);
        out
    }

    /// Feature seen after `progress` of the denoising schedule. Exactly the
    /// final feature at `progress >= 1`.
    pub fn partial_view(&self, final_feature: &[f64], seed: u64, progress: f64) -> Vec<f64> {
        if progress >= 1.0 {
            return final_feature.to_vec();
        }
        let noise = unit_vector(self.hash_key ^ NOISE_SALT, seed, self.dimension);
        let mut out: Vec<f64> = final_feature
            .iter()
            .zip(&noise)
            .map(|(f, n)| progress * f + (1.0 - progress) * n)
            .collect();
        normalize(&mut out);
        out
    }

    /// `dot(x, target) - lambda * |x - parent|^2`.
    pub fn frame_quality(&self, feature: &[f64], parent: Option<&[f64]>, stage: Stage) -> f64 {
        let align = dot(feature, self.target(stage));
        match parent {
            Some(p) => align - self.lambda * dist2(feature, p),
            None => align,
        }
    }

    /// Mean per-frame quality.
    pub fn path_quality<F: AsRef<[f64]>>(&self, features: &[F], stages: &[Stage]) -> f64 {
        assert_eq!(features.len(), stages.len());
        let mut total = 0.0;
        for (i, (f, &stage)) in features.iter().zip(stages).enumerate() {
            let parent = (i > 0).then(|| features[i - 1].as_ref());
            total += self.frame_quality(f.as_ref(), parent, stage);
        }
        total / features.len() as f64
    }

    /// Features along a seed chain: `seeds[0]` is the root seed.
    pub fn chain_features(&self, seeds: &[u64], stages: &[Stage]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(seeds.len());
        for (i, &seed) in seeds.iter().enumerate() {
            let f = match out.last() {
                None => self.root_feature(seed),
                Some(parent) => self.child_feature(parent, seed, stages[i]),
            };
            out.push(f);
        }
        out
    }

    pub fn chain_quality(&self, seeds: &[u64], stages: &[Stage]) -> f64 {
        self.path_quality(&self.chain_features(seeds, stages), stages)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Spherical interpolation between unit vectors.
pub fn slerp(a: &[f64], b: &[f64], frac: f64) -> Vec<f64> {
    let cos = dot(a, b).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let sin = theta.sin();
    if sin < 1e-12 {
        return a.to_vec();
    }
    let wa = ((1.0 - frac) * theta).sin() / sin;
    let wb = (frac * theta).sin() / sin;
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    landscape: Arc<SyntheticLandscape>,
    partial_denoise: bool,
}

impl SyntheticGenerator {
    pub fn new(landscape: Arc<SyntheticLandscape>) -> Self {
        SyntheticGenerator {
            landscape,
            partial_denoise: true,
        }
    }

    pub fn without_partial_denoise(mut self) -> Self {
        self.partial_denoise = false;
        self
    }

    pub fn landscape(&self) -> &Arc<SyntheticLandscape> {
        &self.landscape
    }

    fn final_feature(&self, req: &ExpandRequest<'_>) -> Result<Vec<f64>, GeneratorError> {
        match req.parent {
            None => Ok(self.landscape.root_feature(req.seed)),
            Some(parent) => {
                let parent = parent
                    .features()
                    .ok_or_else(|| GeneratorError::Precondition("synthetic generator needs feature latents".into()))?;
                Ok(self.landscape.child_feature(parent, req.seed, req.prompt.stage))
            }
        }
    }
}

fn check_steps(steps: u32, max: u32) -> Result<(), GeneratorError> {
    if steps == 0 || steps > max {
        return Err(GeneratorError::StepBudget { got: steps, max });
    }
    Ok(())
}

impl Generator for SyntheticGenerator {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_partial_denoise: self.partial_denoise,
            supports_branching: true,
            deterministic: true,
            cost_per_call: 1.0,
        }
    }

    fn generate(&self, req: &ExpandRequest<'_>, steps: u32) -> Result<LatentRef, GeneratorError> {
        check_steps(steps, req.steps_per_frame)?;
        let feature = self.final_feature(req)?;
        let progress = f64::from(steps) / f64::from(req.steps_per_frame);
        let view = if steps == req.steps_per_frame {
            feature
        } else {
            self.landscape.partial_view(&feature, req.seed, progress)
        };
        Ok(LatentRef::Features(Arc::new(view)))
    }

    fn partial_denoise(
        &self,
        req: &ExpandRequest<'_>,
        from: Option<&PartialFrameState>,
        steps: u32,
    ) -> Result<PartialFrameState, GeneratorError> {
        if !self.partial_denoise {
            return Err(GeneratorError::Capability("partial_denoise"));
        }
        let already = from.map_or(0, |s| s.steps_done);
        let steps_done = already + steps;
        if steps_done > req.steps_per_frame {
            return Err(GeneratorError::StepBudget {
                got: steps_done,
                max: req.steps_per_frame,
            });
        }
        let feature = self.final_feature(req)?;
        let progress = f64::from(steps_done) / f64::from(req.steps_per_frame);
        let view = if steps_done == req.steps_per_frame {
            feature
        } else {
            self.landscape.partial_view(&feature, req.seed, progress)
        };
        Ok(PartialFrameState {
            latent_ref: LatentRef::Features(Arc::new(view)),
            denoise_progress: progress,
            steps_done,
            steps_per_frame: req.steps_per_frame,
        })
    }

    fn decode(&self, frames: &[LatentRef], stages: &[Stage]) -> Result<DecodedVideo, GeneratorError> {
        if frames.iter().any(|f| f.features().is_none()) {
            return Err(GeneratorError::Precondition(
                "synthetic decode needs feature latents".into(),
            ));
        }
        Ok(DecodedVideo {
            frames: frames.to_vec(),
            stages: stages.to_vec(),
        })
    }
}

/// Identity and placement of a node about to be generated.
#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub node_id: NodeId,
    pub parent: Option<(NodeId, LatentRef)>,
    pub frame_index: usize,
    pub seed: u64,
    pub stage: Stage,
}

impl NodeSpec {
    pub fn root(node_id: NodeId, seed: u64) -> Self {
        NodeSpec {
            node_id,
            parent: None,
            frame_index: 0,
            seed,
            stage: Stage::Initial,
        }
    }

    pub fn child(
        node_id: NodeId,
        parent: &CandidateNode,
        seed: u64,
        schedule: &Schedule,
    ) -> Result<Self, GeneratorError> {
        let t = parent.frame_index + 1;
        let stage = stage_of_frame(t, schedule).map_err(|_| GeneratorError::DepthOverflow {
            t,
            depth: schedule.depth,
        })?;
        Ok(NodeSpec {
            node_id,
            parent: Some((parent.node_id, parent.latent_ref.clone())),
            frame_index: t,
            seed,
            stage,
        })
    }

    pub fn request<'a>(&'a self, prompts: &'a StagedPrompts, schedule: &Schedule) -> ExpandRequest<'a> {
        ExpandRequest {
            parent: self.parent.as_ref().map(|(_, l)| l),
            frame_index: self.frame_index,
            seed: self.seed,
            prompt: prompts.stage_prompt(self.stage),
            steps_per_frame: schedule.denoise_steps_per_frame,
        }
    }

    pub fn into_node(self, latent_ref: LatentRef) -> CandidateNode {
        CandidateNode {
            node_id: self.node_id,
            parent_id: self.parent.map(|(id, _)| id),
            frame_index: self.frame_index,
            seed: self.seed,
            latent_ref,
            stage: self.stage,
            local_reward: 0.0,
            total_score: 0.0,
        }
    }

    fn call(&self) -> CostCall {
        if self.parent.is_some() {
            CostCall::Extend
        } else {
            CostCall::Root
        }
    }
}

/// Generates a whole node with `steps` steps and returns its cost event.
pub fn generate_node(
    generator: &dyn Generator,
    spec: NodeSpec,
    prompts: &StagedPrompts,
    schedule: &Schedule,
    steps: u32,
) -> Result<(CandidateNode, CostEvent), GeneratorError> {
    check_steps(steps, schedule.denoise_steps_per_frame)?;
    let latent = generator.generate(&spec.request(prompts, schedule), steps)?;
    let event = CostEvent::generate(spec.call(), spec.node_id, steps, schedule.latent_temporal_length);
    Ok((spec.into_node(latent), event))
}

/// Samples a root at frame 0.
pub fn sample_root(
    generator: &dyn Generator,
    node_id: NodeId,
    seed: u64,
    prompts: &StagedPrompts,
    schedule: &Schedule,
) -> Result<(CandidateNode, CostEvent), GeneratorError> {
    generate_node(
        generator,
        NodeSpec::root(node_id, seed),
        prompts,
        schedule,
        schedule.denoise_steps_per_frame,
    )
}

/// Generates the continuation of `parent` at frame `t`.
#[allow(clippy::too_many_arguments)]
pub fn extend(
    generator: &dyn Generator,
    node_id: NodeId,
    parent: &CandidateNode,
    t: usize,
    seed: u64,
    prompts: &StagedPrompts,
    schedule: &Schedule,
    step_budget: u32,
) -> Result<(CandidateNode, CostEvent), GeneratorError> {
    if t >= schedule.depth {
        return Err(GeneratorError::DepthOverflow {
            t,
            depth: schedule.depth,
        });
    }
    if t != parent.frame_index + 1 {
        return Err(GeneratorError::Precondition(format!(
            "child frame {t} must follow parent frame {}",
            parent.frame_index
        )));
    }
    let spec = NodeSpec::child(node_id, parent, seed, schedule)?;
    generate_node(generator, spec, prompts, schedule, step_budget)
}

/// Advances a node's partial denoise by `steps`.
pub fn partial_node(
    generator: &dyn Generator,
    spec: &NodeSpec,
    prompts: &StagedPrompts,
    schedule: &Schedule,
    from: Option<&PartialFrameState>,
    steps: u32,
) -> Result<(PartialFrameState, CostEvent), GeneratorError> {
    if !generator.capabilities().supports_partial_denoise {
        return Err(GeneratorError::Capability("partial_denoise"));
    }
    let state = generator.partial_denoise(&spec.request(prompts, schedule), from, steps)?;
    let call = if from.is_some() {
        CostCall::Resume
    } else {
        CostCall::Partial
    };
    let event = CostEvent::generate(call, spec.node_id, steps, schedule.latent_temporal_length);
    Ok((state, event))
}

/// Decodes a complete root-to-leaf chain.
pub fn decode(
    generator: &dyn Generator,
    nodes: &[CandidateNode],
    depth: usize,
) -> Result<DecodedVideo, GeneratorError> {
    if nodes.len() != depth {
        return Err(GeneratorError::Precondition(format!(
            "decode needs a complete path of {depth} frames, got {}",
            nodes.len()
        )));
    }
    let frames: Vec<LatentRef> = nodes.iter().map(|n| n.latent_ref.clone()).collect();
    let stages: Vec<Stage> = nodes.iter().map(|n| n.stage).collect();
    generator.decode(&frames, &stages)
}
