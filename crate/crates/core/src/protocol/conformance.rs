//! Scripted exercise of an attached worker with msg_id accounting.

use std::thread;

use serde::Serialize;

use super::messages::*;
use super::session::{SessionStats, WorkerSession};
use crate::model::{Stage, TextPrompt};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub worker: String,
    pub protocol_version: u32,
    pub checks: Vec<Check>,
    pub stats: SessionStats,
}

impl ConformanceReport {
    pub fn violations(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

struct Recorder(Vec<Check>);

impl Recorder {
    fn check(&mut self, name: &'static str, outcome: Result<(), String>) {
        let (passed, detail) = match outcome {
            Ok(()) => (true, String::new()),
            Err(d) => (false, d),
        };
        self.0.push(Check { name, passed, detail });
    }
}

fn request(seed: u64, frame_index: usize, parent: Option<String>, steps: u32) -> GenerateRequest {
    let stage = if frame_index == 0 {
        Stage::Initial
    } else {
        Stage::Intermediate
    };
    GenerateRequest {
        parent,
        frame_index,
        seed,
        stage,
        prompt: TextPrompt::new(format!("check/{stage}"), "protocol check"),
        steps_per_frame: 10,
        steps,
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Runs the conformance script against `session`.
pub fn check_worker(session: &WorkerSession) -> ConformanceReport {
    let mut r = Recorder(Vec::new());
    let caps = session.capabilities().clone();
    let e = |e: super::ProtocolError| e.to_string();

    r.check(
        "handshake",
        ensure(session.hello().protocol_version == PROTOCOL_VERSION, || {
            format!("version {}", session.hello().protocol_version)
        }),
    );

    let root: Result<FrameResponse, String> = session
        .request(Kind::GenerateRequest, &request(11, 0, None, 10))
        .map_err(e);
    r.check(
        "generate_root",
        root.as_ref()
            .map_err(Clone::clone)
            .and_then(|f| ensure(!f.latent_ref.is_empty() && f.steps_done == 10, || format!("{f:?}"))),
    );
    let root = root.ok().map(|f| f.latent_ref);

    let child: Option<String> = root.clone().and_then(|parent| {
        let out: Result<FrameResponse, String> = session
            .request(Kind::GenerateRequest, &request(12, 1, Some(parent), 10))
            .map_err(e);
        r.check("generate_child", out.as_ref().map(|_| ()).map_err(Clone::clone));
        out.ok().map(|f| f.latent_ref)
    });

    if caps.supports_partial_denoise {
        let first: Result<FrameResponse, String> = session
            .request(
                Kind::PartialDenoiseRequest,
                &PartialDenoiseRequest {
                    frame: request(13, 0, None, 3),
                    from: None,
                },
            )
            .map_err(e);
        let resumed = first.clone().and_then(|f| {
            session
                .request::<_, FrameResponse>(
                    Kind::PartialDenoiseRequest,
                    &PartialDenoiseRequest {
                        frame: request(13, 0, None, 7),
                        from: Some(PartialFrom {
                            latent_ref: f.latent_ref,
                            steps_done: f.steps_done,
                        }),
                    },
                )
                .map_err(e)
        });
        r.check(
            "partial_denoise_resume",
            first.and_then(|a| {
                let b = resumed?;
                ensure(
                    a.steps_done == 3 && b.steps_done == 10 && b.denoise_progress >= a.denoise_progress,
                    || format!("{a:?} then {b:?}"),
                )
            }),
        );
    }

    if let (Some(root), Some(child)) = (&root, &child) {
        for id in &caps.verifier_ids {
            let frame = VerifyRequest::Frame {
                verifier_id: id.clone(),
                latent_ref: child.clone(),
                parent: Some(root.clone()),
                frame_index: 1,
                stage: Stage::Intermediate,
                prompt: TextPrompt::new("check/intermediate", "protocol check"),
            };
            let a: Result<VerifyResponse, String> = session.request(Kind::VerifyRequest, &frame).map_err(e);
            let b: Result<VerifyResponse, String> = session.request(Kind::VerifyRequest, &frame).map_err(e);
            r.check(
                "verify_frame",
                a.and_then(|a| {
                    let b = b?;
                    ensure(a.score.is_some(), || format!("{id}: no score"))?;
                    ensure(!caps.deterministic || a == b, || format!("{id}: {a:?} != {b:?}"))
                }),
            );
            let video = VerifyRequest::Video {
                verifier_id: id.clone(),
                frames: vec![root.clone(), child.clone()],
                stages: vec![Stage::Initial, Stage::Intermediate],
                prompts: crate::verifier::decompose_prompt(
                    &TextPrompt::new("check", "protocol check"),
                    &crate::verifier::TemplateDecomposer,
                )
                .expect("template decomposition"),
            };
            let v: Result<VerifyResponse, String> = session.request(Kind::VerifyRequest, &video).map_err(e);
            r.check(
                "verify_video",
                v.and_then(|v| ensure(v.score.is_some(), || format!("{id}: no score"))),
            );
        }
        let gate: Result<GateResponse, String> = session
            .request(
                Kind::GateRequest,
                &GateRequest {
                    latent_ref: child.clone(),
                    denoise_progress: 1.0,
                    threshold: 0.4,
                },
            )
            .map_err(e);
        r.check("gate", gate.map(|_| ()));
    }

    if caps.supports_decompose {
        let d: Result<DecomposeResponse, String> = session
            .request(
                Kind::DecomposeRequest,
                &DecomposeRequest {
                    prompt: TextPrompt::new("check", "protocol check"),
                },
            )
            .map_err(e);
        r.check(
            "decompose",
            d.and_then(|d| ensure(d.prompts.len() == 3, || format!("{} prompts", d.prompts.len()))),
        );
    }

    let bad = session.call(Kind::GenerateRequest, serde_json::json!({ "seed": "not a number" }));
    let after: Result<FrameResponse, _> = session.request(Kind::GenerateRequest, &request(14, 0, None, 10));
    r.check(
        "malformed_request_answered",
        match (bad, after) {
            (Err(super::ProtocolError::Worker { .. }), Ok(_)) => Ok(()),
            (bad, after) => Err(format!("{bad:?} / {after:?}")),
        },
    );

    let window = session.config().window;
    let burst: Vec<Result<FrameResponse, String>> = thread::scope(|s| {
        let handles: Vec<_> = (0..4 * window as u64)
            .map(|i| {
                s.spawn(move || {
                    session
                        .request(Kind::GenerateRequest, &request(100 + i, 0, None, 10))
                        .map_err(e)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("request thread")).collect()
    });
    let failed = burst.iter().filter(|b| b.is_err()).count();
    r.check("pipelined_burst", ensure(failed == 0, || format!("{failed} failed")));

    let stats = session.stats();
    r.check(
        "window_respected",
        ensure(stats.max_in_flight <= window, || {
            format!("{} in flight", stats.max_in_flight)
        }),
    );
    r.check(
        "msg_id_accounting",
        ensure(stats.balanced() && session.terminated().is_none(), || {
            format!("{stats:?}, terminated: {:?}", session.terminated())
        }),
    );

    ConformanceReport {
        worker: session.hello().worker.clone(),
        protocol_version: session.hello().protocol_version,
        checks: r.0,
        stats,
    }
}
