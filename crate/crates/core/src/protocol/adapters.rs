//! Engine-side interfaces backed by a worker session.
//!
//! Generator calls fail closed: any transport problem becomes a generator
//! error and the candidate is dropped. Verifier calls fail open: a fault
//! leaves the candidate unscored and the ensemble imputes a score.

use std::sync::Arc;

use super::messages::*;
use super::session::{ProtocolError, WorkerSession};
use crate::generator::{Capabilities, DecodedVideo, ExpandRequest, Generator, GeneratorError, PartialFrameState};
use crate::model::{LatentRef, PromptSource, RunConfig, Stage, StagePrompt, StagedPrompts, TextPrompt};
use crate::search::{Backends, SearchError};
use crate::verifier::{
    decompose_prompt, DecomposeError, FrameInput, PromptDecomposer, TemplateDecomposer, Verifier, VerifierEnsemble,
    VerifierFault,
};

fn handle(latent: &LatentRef) -> Result<String, GeneratorError> {
    match latent {
        LatentRef::Handle(h) => Ok(h.clone()),
        LatentRef::Features(_) => Err(GeneratorError::Precondition(
            "worker generators take opaque latent handles".into(),
        )),
    }
}

fn frame_request(req: &ExpandRequest<'_>, steps: u32) -> Result<GenerateRequest, GeneratorError> {
    Ok(GenerateRequest {
        parent: req.parent.map(handle).transpose()?,
        frame_index: req.frame_index,
        seed: req.seed,
        stage: req.prompt.stage,
        prompt: req.prompt.prompt.clone(),
        steps_per_frame: req.steps_per_frame,
        steps,
    })
}

fn transport(e: ProtocolError) -> GeneratorError {
    GeneratorError::Transport(e.to_string())
}

#[derive(Debug, Clone)]
pub struct WorkerGenerator {
    session: Arc<WorkerSession>,
}

impl WorkerGenerator {
    pub fn new(session: Arc<WorkerSession>) -> Self {
        WorkerGenerator { session }
    }
}

impl Generator for WorkerGenerator {
    fn capabilities(&self) -> Capabilities {
        let c = self.session.capabilities();
        Capabilities {
            supports_partial_denoise: c.supports_partial_denoise,
            supports_branching: c.supports_branching,
            deterministic: c.deterministic,
            cost_per_call: c.cost_per_call,
        }
    }

    fn generate(&self, req: &ExpandRequest<'_>, steps: u32) -> Result<LatentRef, GeneratorError> {
        let body = frame_request(req, steps)?;
        let resp: FrameResponse = self.session.request(Kind::GenerateRequest, &body).map_err(transport)?;
        Ok(LatentRef::Handle(resp.latent_ref))
    }

    fn partial_denoise(
        &self,
        req: &ExpandRequest<'_>,
        from: Option<&PartialFrameState>,
        steps: u32,
    ) -> Result<PartialFrameState, GeneratorError> {
        if !self.session.capabilities().supports_partial_denoise {
            return Err(GeneratorError::Capability("partial_denoise"));
        }
        let body = PartialDenoiseRequest {
            frame: frame_request(req, steps)?,
            from: from
                .map(|s| {
                    Ok::<_, GeneratorError>(PartialFrom {
                        latent_ref: handle(&s.latent_ref)?,
                        steps_done: s.steps_done,
                    })
                })
                .transpose()?,
        };
        let resp: FrameResponse = self
            .session
            .request(Kind::PartialDenoiseRequest, &body)
            .map_err(transport)?;
        Ok(PartialFrameState {
            latent_ref: LatentRef::Handle(resp.latent_ref),
            denoise_progress: resp.denoise_progress,
            steps_done: resp.steps_done,
            steps_per_frame: req.steps_per_frame,
        })
    }

    /// Worker frames stay on the worker; decoding only checks the handles.
    fn decode(&self, frames: &[LatentRef], stages: &[Stage]) -> Result<DecodedVideo, GeneratorError> {
        for f in frames {
            handle(f)?;
        }
        Ok(DecodedVideo {
            frames: frames.to_vec(),
            stages: stages.to_vec(),
        })
    }
}

fn fault(e: ProtocolError) -> VerifierFault {
    if e.is_timeout() {
        VerifierFault::Timeout
    } else {
        VerifierFault::Transport(e.to_string())
    }
}

fn verifier_handle(latent: &LatentRef) -> Result<String, VerifierFault> {
    match latent {
        LatentRef::Handle(h) => Ok(h.clone()),
        LatentRef::Features(_) => Err(VerifierFault::Unsupported("in-process latent".into())),
    }
}

#[derive(Debug, Clone)]
pub struct WorkerVerifier {
    session: Arc<WorkerSession>,
    id: String,
}

impl WorkerVerifier {
    pub fn new(session: Arc<WorkerSession>, id: impl Into<String>) -> Self {
        WorkerVerifier { session, id: id.into() }
    }

    fn score(&self, body: VerifyRequest) -> Result<f64, VerifierFault> {
        let resp: VerifyResponse = self.session.request(Kind::VerifyRequest, &body).map_err(fault)?;
        resp.score.ok_or(VerifierFault::NonFinite(f64::NAN))
    }
}

impl Verifier for WorkerVerifier {
    fn id(&self) -> &str {
        &self.id
    }

    fn deterministic(&self) -> bool {
        self.session.capabilities().deterministic
    }

    fn score_frame(&self, frame: &FrameInput<'_>, prompt: StagePrompt<'_>) -> Result<f64, VerifierFault> {
        self.score(VerifyRequest::Frame {
            verifier_id: self.id.clone(),
            latent_ref: verifier_handle(frame.latent)?,
            parent: frame.parent.map(verifier_handle).transpose()?,
            frame_index: frame.frame_index,
            stage: frame.stage,
            prompt: prompt.prompt.clone(),
        })
    }

    fn score_video(&self, video: &DecodedVideo, prompts: &StagedPrompts) -> Result<f64, VerifierFault> {
        self.score(VerifyRequest::Video {
            verifier_id: self.id.clone(),
            frames: video.frames.iter().map(verifier_handle).collect::<Result<_, _>>()?,
            stages: video.stages.clone(),
            prompts: prompts.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct WorkerDecomposer {
    session: Arc<WorkerSession>,
}

impl WorkerDecomposer {
    pub fn new(session: Arc<WorkerSession>) -> Self {
        WorkerDecomposer { session }
    }
}

impl PromptDecomposer for WorkerDecomposer {
    fn source(&self) -> PromptSource {
        PromptSource::ExternallySupplied
    }

    fn decompose(&self, prompt: &TextPrompt) -> Result<Vec<String>, DecomposeError> {
        let resp: DecomposeResponse = self
            .session
            .request(Kind::DecomposeRequest, &DecomposeRequest { prompt: prompt.clone() })
            .map_err(|e| DecomposeError::Backend(e.to_string()))?;
        Ok(resp.prompts)
    }
}

/// Asks the worker's gate whether a partially denoised frame is clear
/// enough to score.
pub fn worker_gate(session: &WorkerSession, state: &PartialFrameState, threshold: f64) -> Result<bool, ProtocolError> {
    let latent_ref = match &state.latent_ref {
        LatentRef::Handle(h) => h.clone(),
        LatentRef::Features(_) => {
            return Err(ProtocolError::Payload {
                kind: Kind::GateRequest,
                reason: "in-process latent".into(),
            })
        }
    };
    let resp: GateResponse = session.request(
        Kind::GateRequest,
        &GateRequest {
            latent_ref,
            denoise_progress: state.denoise_progress,
            threshold,
        },
    )?;
    Ok(resp.pass)
}

/// Generator and every configured verifier served by one worker. Stage
/// prompts come from the built-in template so that worker runs match
/// in-process runs.
pub fn worker_backends(config: &RunConfig, session: Arc<WorkerSession>) -> Result<Backends, SearchError> {
    let offered = &session.capabilities().verifier_ids;
    let mut members: Vec<(Arc<dyn Verifier>, f64)> = Vec::new();
    for (id, &w) in &config.verifier_weights {
        if !offered.contains(id) {
            return Err(SearchError::UnknownVerifier(id.clone()));
        }
        members.push((Arc::new(WorkerVerifier::new(session.clone(), id.clone())), w));
    }
    Ok(Backends {
        generator: Arc::new(WorkerGenerator::new(session)),
        ensemble: VerifierEnsemble::new(members),
        prompts: decompose_prompt(&config.prompt, &TemplateDecomposer)?,
    })
}
