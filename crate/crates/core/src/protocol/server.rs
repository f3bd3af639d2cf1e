//! Worker side of the protocol, backed by the synthetic sandbox.
//!
//! Latent handles are minted from the frame index, seed and step count, so
//! they do not depend on request order.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::messages::*;
use crate::generator::{
    DecodedVideo, ExpandRequest, Generator, PartialFrameState, SyntheticGenerator, SyntheticLandscape,
};
use crate::model::{LatentRef, StagePrompt};
use crate::verifier::{synthetic_verifier, FrameInput, PromptDecomposer, TemplateDecomposer, Verifier};

pub const SYNTHETIC_VERIFIERS: [&str; 3] = ["synthetic", "alignment", "smoothness"];

pub struct SyntheticWorker {
    name: String,
    generator: SyntheticGenerator,
    verifiers: BTreeMap<String, Arc<dyn Verifier>>,
    latents: HashMap<String, Arc<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ServeStats {
    pub requests: u64,
    pub errors: u64,
}

type Reply = Result<(Kind, serde_json::Value), String>;

fn body<T: DeserializeOwned>(env: &Envelope) -> Result<T, String> {
    serde_json::from_value(env.payload.clone()).map_err(|e| format!("bad {:?} payload: {e}", env.kind))
}

fn ok<T: Serialize>(kind: Kind, value: &T) -> Reply {
    Ok((kind, serde_json::to_value(value).expect("response serializes")))
}

impl SyntheticWorker {
    pub fn new(landscape: SyntheticLandscape) -> Self {
        let landscape = Arc::new(landscape);
        let verifiers = SYNTHETIC_VERIFIERS
            .iter()
            .map(|id| (id.to_string(), synthetic_verifier(id, &landscape).expect("built-in id")))
            .collect();
        SyntheticWorker {
            name: "frametree-synth-worker".into(),
            generator: SyntheticGenerator::new(landscape),
            verifiers,
            latents: HashMap::new(),
        }
    }

    pub fn hello(&self) -> Hello {
        Hello {
            protocol_version: PROTOCOL_VERSION,
            worker: self.name.clone(),
        }
    }

    pub fn capabilities(&self) -> CapabilitiesPayload {
        let caps = self.generator.capabilities();
        CapabilitiesPayload {
            supports_partial_denoise: caps.supports_partial_denoise,
            supports_branching: caps.supports_branching,
            deterministic: caps.deterministic,
            cost_per_call: caps.cost_per_call,
            verifier_ids: self.verifiers.keys().cloned().collect(),
            supports_decompose: true,
        }
    }

    fn latent(&self, handle: &str) -> Result<LatentRef, String> {
        self.latents
            .get(handle)
            .map(|f| LatentRef::Features(f.clone()))
            .ok_or_else(|| format!("unknown latent_ref {handle:?}"))
    }

    fn mint(&mut self, req: &GenerateRequest, steps_done: u32, latent: LatentRef) -> String {
        let handle = format!("syn-{}-{:016x}-{}", req.frame_index, req.seed, steps_done);
        if let LatentRef::Features(f) = latent {
            self.latents.insert(handle.clone(), f);
        }
        handle
    }

    fn verifier(&self, id: &str) -> Result<&Arc<dyn Verifier>, String> {
        self.verifiers.get(id).ok_or_else(|| format!("unknown verifier {id:?}"))
    }

    fn generate(&mut self, g: GenerateRequest) -> Reply {
        let parent = g.parent.as_deref().map(|h| self.latent(h)).transpose()?;
        let req = ExpandRequest {
            parent: parent.as_ref(),
            frame_index: g.frame_index,
            seed: g.seed,
            prompt: StagePrompt {
                stage: g.stage,
                prompt: &g.prompt,
            },
            steps_per_frame: g.steps_per_frame,
        };
        let latent = self.generator.generate(&req, g.steps).map_err(|e| e.to_string())?;
        let resp = FrameResponse {
            denoise_progress: f64::from(g.steps) / f64::from(g.steps_per_frame),
            steps_done: g.steps,
            latent_ref: self.mint(&g, g.steps, latent),
        };
        ok(Kind::GenerateResponse, &resp)
    }

    fn partial(&mut self, p: PartialDenoiseRequest) -> Reply {
        let g = p.frame;
        let parent = g.parent.as_deref().map(|h| self.latent(h)).transpose()?;
        let from = p
            .from
            .map(|f| {
                Ok::<_, String>(PartialFrameState {
                    latent_ref: self.latent(&f.latent_ref)?,
                    denoise_progress: f64::from(f.steps_done) / f64::from(g.steps_per_frame),
                    steps_done: f.steps_done,
                    steps_per_frame: g.steps_per_frame,
                })
            })
            .transpose()?;
        let req = ExpandRequest {
            parent: parent.as_ref(),
            frame_index: g.frame_index,
            seed: g.seed,
            prompt: StagePrompt {
                stage: g.stage,
                prompt: &g.prompt,
            },
            steps_per_frame: g.steps_per_frame,
        };
        let state = self
            .generator
            .partial_denoise(&req, from.as_ref(), g.steps)
            .map_err(|e| e.to_string())?;
        let resp = FrameResponse {
            denoise_progress: state.denoise_progress,
            steps_done: state.steps_done,
            latent_ref: self.mint(&g, state.steps_done, state.latent_ref),
        };
        ok(Kind::PartialDenoiseResponse, &resp)
    }

    fn verify(&self, v: VerifyRequest) -> Reply {
        let score = match v {
            VerifyRequest::Frame {
                verifier_id,
                latent_ref,
                parent,
                frame_index,
                stage,
                prompt,
            } => {
                let latent = self.latent(&latent_ref)?;
                let parent = parent.as_deref().map(|h| self.latent(h)).transpose()?;
                let frame = FrameInput {
                    latent: &latent,
                    parent: parent.as_ref(),
                    frame_index,
                    stage,
                };
                self.verifier(&verifier_id)?
                    .score_frame(&frame, StagePrompt { stage, prompt: &prompt })
            }
            VerifyRequest::Video {
                verifier_id,
                frames,
                stages,
                prompts,
            } => {
                let video = DecodedVideo {
                    frames: frames.iter().map(|h| self.latent(h)).collect::<Result<_, _>>()?,
                    stages,
                };
                self.verifier(&verifier_id)?.score_video(&video, &prompts)
            }
        }
        .map_err(|e| e.to_string())?;
        ok(
            Kind::VerifyResponse,
            &VerifyResponse {
                score: score.is_finite().then_some(score),
            },
        )
    }

    /// Answers one request envelope.
    pub fn handle(&mut self, env: &Envelope) -> Envelope {
        let reply = match env.kind {
            Kind::GenerateRequest => body(env).and_then(|g| self.generate(g)),
            Kind::PartialDenoiseRequest => body(env).and_then(|p| self.partial(p)),
            Kind::VerifyRequest => body(env).and_then(|v| self.verify(v)),
            Kind::GateRequest => body::<GateRequest>(env).and_then(|g| {
                self.latent(&g.latent_ref)?;
                ok(
                    Kind::GateResponse,
                    &GateResponse {
                        pass: g.denoise_progress >= g.threshold,
                    },
                )
            }),
            Kind::DecomposeRequest => body::<DecomposeRequest>(env).and_then(|d| {
                let prompts = TemplateDecomposer.decompose(&d.prompt).map_err(|e| e.to_string())?;
                ok(Kind::DecomposeResponse, &DecomposeResponse { prompts })
            }),
            other => Err(format!("{other:?} is not a request")),
        };
        match reply {
            Ok((kind, payload)) => Envelope {
                msg_id: env.msg_id,
                kind,
                payload,
            },
            Err(message) => Envelope::new(env.msg_id, Kind::Error, &ErrorPayload { message }),
        }
    }

    /// Handshake, then one response per request line until `shutdown` or
    /// end of input.
    pub fn serve<R: BufRead, W: Write>(&mut self, reader: R, mut writer: W) -> io::Result<ServeStats> {
        let send = |w: &mut W, env: &Envelope| -> io::Result<()> {
            w.write_all(env.to_line().as_bytes())?;
            w.write_all(b"\n")?;
            w.flush()
        };
        send(&mut writer, &Envelope::new(0, Kind::Hello, &self.hello()))?;
        send(&mut writer, &Envelope::new(1, Kind::Capabilities, &self.capabilities()))?;
        let mut stats = ServeStats::default();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let env = match serde_json::from_str::<Envelope>(&line) {
                Ok(env) => env,
                Err(e) => {
                    stats.errors += 1;
                    let id = serde_json::from_str::<serde_json::Value>(&line)
                        .ok()
                        .and_then(|v| v.get("msg_id").and_then(|m| m.as_u64()));
                    match id {
                        Some(id) => send(
                            &mut writer,
                            &Envelope::new(
                                id,
                                Kind::Error,
                                &ErrorPayload {
                                    message: format!("malformed request: {e}"),
                                },
                            ),
                        )?,
                        None => log::warn!("dropping unparseable line: {e}"),
                    }
                    continue;
                }
            };
            if env.kind == Kind::Shutdown {
                break;
            }
            stats.requests += 1;
            let resp = self.handle(&env);
            if resp.kind == Kind::Error {
                stats.errors += 1;
            }
            send(&mut writer, &resp)?;
        }
        Ok(stats)
    }
}
