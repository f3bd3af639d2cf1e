use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{mpsc, Arc, Barrier};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use frametree::generator::{ExpandRequest, PartialFrameState};
use frametree::model::{LatentRef, Stage, StagePrompt, TextPrompt};
use frametree::protocol::messages::{
    DecomposeRequest, ErrorPayload, FrameResponse, GateRequest, GenerateRequest, PartialDenoiseRequest, PartialFrom,
    VerifyRequest, VerifyResponse,
};
use frametree::protocol::{
    check_worker, spawn_in_process, worker_backends, worker_gate, Envelope, Kind, ProtocolError, SessionConfig,
    SyntheticWorker, WorkerGenerator, WorkerSession, WorkerVerifier,
};
use frametree::verifier::{decompose_prompt, FrameInput, TemplateDecomposer, VerifierFault};
use frametree::{
    run_search, Algorithm, Backends, Generator, RunConfig, Schedule, SearchOptions, SyntheticLandscape, Verifier,
    VerifierEnsemble,
};

const GOLDEN: &str = "tests/fixtures/golden_transcript.jsonl";

fn quick(request_ms: u64) -> SessionConfig {
    SessionConfig {
        handshake_timeout: Duration::from_millis(500),
        request_timeout: Duration::from_millis(request_ms),
        window: 4,
    }
}

fn hello_lines(version: u32) -> String {
    let hello = json!({"msg_id": 0, "kind": "hello", "payload": {"protocol_version": version, "worker": "scripted"}});
    let caps = json!({"msg_id": 1, "kind": "capabilities", "payload": {
        "supports_partial_denoise": true, "supports_branching": true, "deterministic": true,
        "cost_per_call": 1.0, "verifier_ids": ["synthetic"], "supports_decompose": true}});
    format!("{hello}\n{caps}\n")
}

type Lines = io::Lines<BufReader<io::PipeReader>>;

/// Worker thread running `script` after a standard handshake.
fn scripted<F>(version: u32, config: SessionConfig, script: F) -> Result<WorkerSession, ProtocolError>
where
    F: FnOnce(&mut Lines, &mut io::PipeWriter) + Send + 'static,
{
    let (engine_rx, mut worker_tx) = io::pipe().unwrap();
    let (worker_rx, engine_tx) = io::pipe().unwrap();
    thread::spawn(move || {
        let _ = worker_tx.write_all(hello_lines(version).as_bytes());
        let mut lines = BufReader::new(worker_rx).lines();
        script(&mut lines, &mut worker_tx);
    });
    WorkerSession::connect(engine_rx, engine_tx, config)
}

fn next_request(lines: &mut Lines) -> Option<Envelope> {
    let env: Envelope = serde_json::from_str(&lines.next()?.ok()?).unwrap();
    (env.kind != Kind::Shutdown).then_some(env)
}

fn reply(w: &mut impl Write, env: &Envelope) {
    writeln!(w, "{}", env.to_line()).unwrap();
}

/// Synthetic worker behind a filter that may substitute any response.
fn proxied(
    landscape: SyntheticLandscape,
    config: SessionConfig,
    filter: fn(&Envelope) -> Option<Envelope>,
) -> Result<WorkerSession, ProtocolError> {
    scripted(1, config, move |lines, w| {
        let mut worker = SyntheticWorker::new(landscape);
        while let Some(req) = next_request(lines) {
            let resp = filter(&req).unwrap_or_else(|| worker.handle(&req));
            reply(w, &resp);
        }
    })
}

fn prompt() -> TextPrompt {
    TextPrompt::new("p0", "a red ball rolls across a wooden table")
}

fn frame(parent: Option<&str>, frame_index: usize, seed: u64, stage: Stage, steps: u32) -> GenerateRequest {
    GenerateRequest {
        parent: parent.map(str::to_string),
        frame_index,
        seed,
        stage,
        prompt: prompt(),
        steps_per_frame: 50,
        steps,
    }
}

fn handle_of(resp: &Envelope) -> String {
    serde_json::from_value::<FrameResponse>(resp.payload.clone())
        .unwrap()
        .latent_ref
}

fn v<T: serde::Serialize>(x: &T) -> Value {
    serde_json::to_value(x).unwrap()
}

/// Builds the frozen exchange against a fresh synthetic worker.
fn record_transcript() -> Vec<(String, String)> {
    let mut worker = SyntheticWorker::new(SyntheticLandscape::from_seed(42));
    let mut pairs = Vec::new();
    let mut send = |kind: Kind, body: Value| {
        let req = Envelope {
            msg_id: pairs.len() as u64 + 2,
            kind,
            payload: body,
        };
        let resp = worker.handle(&req);
        pairs.push((req.to_line(), resp.to_line()));
        resp
    };
    let root = handle_of(&send(Kind::GenerateRequest, v(&frame(None, 0, 11, Stage::Initial, 50))));
    let child = handle_of(&send(
        Kind::GenerateRequest,
        v(&frame(Some(&root), 1, 12, Stage::Intermediate, 50)),
    ));
    let partial = handle_of(&send(
        Kind::PartialDenoiseRequest,
        v(&PartialDenoiseRequest {
            frame: frame(Some(&child), 2, 13, Stage::Final, 10),
            from: None,
        }),
    ));
    send(
        Kind::PartialDenoiseRequest,
        v(&PartialDenoiseRequest {
            frame: frame(Some(&child), 2, 13, Stage::Final, 20),
            from: Some(PartialFrom {
                latent_ref: partial.clone(),
                steps_done: 10,
            }),
        }),
    );
    for id in ["synthetic", "alignment"] {
        send(
            Kind::VerifyRequest,
            v(&VerifyRequest::Frame {
                verifier_id: id.into(),
                latent_ref: child.clone(),
                parent: Some(root.clone()),
                frame_index: 1,
                stage: Stage::Intermediate,
                prompt: prompt(),
            }),
        );
    }
    send(
        Kind::VerifyRequest,
        v(&VerifyRequest::Video {
            verifier_id: "smoothness".into(),
            frames: vec![root.clone(), child.clone()],
            stages: vec![Stage::Initial, Stage::Intermediate],
            prompts: decompose_prompt(&prompt(), &TemplateDecomposer).unwrap(),
        }),
    );
    send(
        Kind::GateRequest,
        v(&GateRequest {
            latent_ref: partial,
            denoise_progress: 0.2,
            threshold: 0.15,
        }),
    );
    send(Kind::DecomposeRequest, v(&DecomposeRequest { prompt: prompt() }));
    send(
        Kind::GenerateRequest,
        v(&frame(Some("syn-missing"), 1, 14, Stage::Intermediate, 50)),
    );
    pairs
}

#[test]
fn golden_transcript_replays_byte_for_byte() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    if std::env::var_os("FRAMETREE_BLESS").is_some() {
        let text: String = record_transcript()
            .into_iter()
            .map(|(q, a)| format!("{q}\n{a}\n"))
            .collect();
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, text).unwrap();
    }
    let frozen = fs::read_to_string(&path).expect("fixture present; set FRAMETREE_BLESS=1 to record");
    let lines: Vec<&str> = frozen.lines().collect();
    assert_eq!(lines.len(), 20, "ten request/response pairs");

    let mut worker = SyntheticWorker::new(SyntheticLandscape::from_seed(42));
    for pair in lines.chunks(2) {
        let req: Envelope = serde_json::from_str(pair[0]).unwrap();
        assert_eq!(worker.handle(&req).to_line(), pair[1]);
    }
    // the typed builders still produce the frozen requests
    let fresh = record_transcript();
    for (i, (q, a)) in fresh.iter().enumerate() {
        assert_eq!(q, lines[2 * i]);
        assert_eq!(a, lines[2 * i + 1]);
    }
    let kinds: Vec<Kind> = lines
        .iter()
        .skip(1)
        .step_by(2)
        .map(|l| serde_json::from_str::<Envelope>(l).unwrap().kind)
        .collect();
    assert_eq!(kinds.last(), Some(&Kind::Error));
    assert!(kinds.contains(&Kind::GateResponse) && kinds.contains(&Kind::DecomposeResponse));
}

#[test]
fn latent_refs_round_trip_verbatim() {
    const ODD: &str = "blob://ünï/\"quoted\"\\path?x=1&y=[2]";
    let (tx, rx) = mpsc::channel();
    let session = scripted(1, quick(2000), move |lines, w| {
        while let Some(req) = next_request(lines) {
            let resp = match req.kind {
                Kind::GenerateRequest => Envelope::new(
                    req.msg_id,
                    Kind::GenerateResponse,
                    &FrameResponse {
                        latent_ref: ODD.into(),
                        denoise_progress: 1.0,
                        steps_done: 50,
                    },
                ),
                _ => {
                    let v: VerifyRequest = serde_json::from_value(req.payload.clone()).unwrap();
                    if let VerifyRequest::Frame { latent_ref, .. } = v {
                        tx.send(latent_ref).unwrap();
                    }
                    Envelope::new(req.msg_id, Kind::VerifyResponse, &VerifyResponse { score: Some(0.5) })
                }
            };
            reply(w, &resp);
        }
    })
    .unwrap();
    let session = Arc::new(session);
    let p = prompt();
    let req = ExpandRequest {
        parent: None,
        frame_index: 0,
        seed: 1,
        prompt: StagePrompt {
            stage: Stage::Initial,
            prompt: &p,
        },
        steps_per_frame: 50,
    };
    let latent = WorkerGenerator::new(session.clone()).generate(&req, 50).unwrap();
    assert_eq!(latent, LatentRef::Handle(ODD.into()));
    let input = FrameInput {
        latent: &latent,
        parent: None,
        frame_index: 0,
        stage: Stage::Initial,
    };
    let score = WorkerVerifier::new(session, "synthetic")
        .score_frame(&input, req.prompt)
        .unwrap();
    assert_eq!(score, 0.5);
    assert_eq!(rx.recv().unwrap(), ODD);
}

#[test]
fn other_protocol_versions_are_rejected() {
    for version in [0, 2] {
        let err = scripted(version, quick(200), |_, _| {}).unwrap_err();
        assert_eq!(err, ProtocolError::Version(version));
    }
}

#[test]
fn silent_worker_fails_the_handshake() {
    let (engine_rx, _keep) = io::pipe().unwrap();
    let (_worker_rx, engine_tx) = io::pipe().unwrap();
    let err = WorkerSession::connect(engine_rx, engine_tx, quick(200)).unwrap_err();
    assert!(matches!(err, ProtocolError::HandshakeTimeout(_)), "{err}");
}

#[test]
fn malformed_response_terminates_the_session() {
    let session = scripted(1, quick(2000), |lines, w| {
        next_request(lines);
        writeln!(w, "this is not json").unwrap();
        while next_request(lines).is_some() {}
    })
    .unwrap();
    let err = session
        .call(Kind::DecomposeRequest, json!({"prompt": prompt()}))
        .unwrap_err();
    assert!(matches!(err, ProtocolError::Malformed(_)), "{err}");
    assert!(matches!(session.terminated(), Some(ProtocolError::Malformed(_))));
    assert!(session
        .call(Kind::DecomposeRequest, json!({"prompt": prompt()}))
        .is_err());
    assert!(session.stats().balanced());
}

#[test]
fn unknown_msg_id_is_an_error() {
    let session = scripted(1, quick(2000), |lines, w| {
        let req = next_request(lines).unwrap();
        reply(
            w,
            &Envelope::new(req.msg_id + 1000, Kind::GateResponse, &json!({"pass": true})),
        );
        while next_request(lines).is_some() {}
    })
    .unwrap();
    let err = session
        .call(
            Kind::GateRequest,
            json!({"latent_ref": "x", "denoise_progress": 0.1, "threshold": 0.0}),
        )
        .unwrap_err();
    assert_eq!(err, ProtocolError::MsgIdMismatch(1000));
}

#[test]
fn worker_errors_surface_with_their_message() {
    let session = proxied(SyntheticLandscape::from_seed(1), quick(2000), |_| None).unwrap();
    let err = session
        .call(
            Kind::GateRequest,
            json!({"latent_ref": "nope", "denoise_progress": 0.1, "threshold": 0.0}),
        )
        .unwrap_err();
    match err {
        ProtocolError::Worker { message, .. } => assert!(message.contains("nope"), "{message}"),
        other => panic!("{other}"),
    }
    assert!(session.terminated().is_none());
    assert!(session.call(Kind::Hello, json!({})).is_err());
}

#[test]
fn responses_are_matched_out_of_order() {
    let session = scripted(1, quick(5000), |lines, w| {
        let mut batch = Vec::new();
        while batch.len() < 4 {
            batch.push(next_request(lines).unwrap());
        }
        for req in batch.iter().rev() {
            let threshold = req.payload["threshold"].as_f64().unwrap();
            reply(
                w,
                &Envelope::new(req.msg_id, Kind::GateResponse, &json!({"pass": threshold > 1.5})),
            );
        }
        while next_request(lines).is_some() {}
    })
    .unwrap();
    let session = Arc::new(session);
    let barrier = Arc::new(Barrier::new(4));
    let handles: Vec<_> = (0..4)
        .map(|i| {
            let (s, b) = (session.clone(), barrier.clone());
            thread::spawn(move || {
                b.wait();
                let env = s
                    .call(
                        Kind::GateRequest,
                        json!({"latent_ref": "x", "denoise_progress": 0.0, "threshold": f64::from(i)}),
                    )
                    .unwrap();
                (i, env.payload["pass"].as_bool().unwrap())
            })
        })
        .collect();
    for h in handles {
        let (i, pass) = h.join().unwrap();
        assert_eq!(pass, i >= 2, "request {i}");
    }
    let stats = session.stats();
    assert_eq!(stats.max_in_flight, 4);
    assert_eq!(stats.answered, 4);
}

#[test]
fn in_flight_window_is_respected() {
    let session = Arc::new(spawn_in_process(SyntheticLandscape::from_seed(3), quick(5000)).unwrap());
    let handles: Vec<_> = (0..24)
        .map(|_| {
            let s = session.clone();
            thread::spawn(move || s.request::<_, Value>(Kind::DecomposeRequest, &DecomposeRequest { prompt: prompt() }))
        })
        .collect();
    for h in handles {
        h.join().unwrap().unwrap();
    }
    let stats = session.stats();
    assert!(stats.max_in_flight <= 4);
    assert_eq!(stats.sent, 24);
    assert!(stats.balanced());
}

#[test]
fn late_responses_are_discarded() {
    let session = scripted(1, quick(50), |lines, w| {
        let first = next_request(lines).unwrap();
        thread::sleep(Duration::from_millis(200));
        reply(
            w,
            &Envelope::new(first.msg_id, Kind::GateResponse, &json!({"pass": true})),
        );
        while let Some(req) = next_request(lines) {
            reply(
                w,
                &Envelope::new(req.msg_id, Kind::GateResponse, &json!({"pass": false})),
            );
        }
    })
    .unwrap();
    let body = || json!({"latent_ref": "x", "denoise_progress": 0.0, "threshold": 0.0});
    assert!(session.call(Kind::GateRequest, body()).unwrap_err().is_timeout());
    thread::sleep(Duration::from_millis(250));
    let env = session.call(Kind::GateRequest, body()).unwrap();
    assert_eq!(env.payload["pass"], false);
    let stats = session.stats();
    assert_eq!((stats.timed_out, stats.late, stats.answered), (1, 1, 1));
    assert!(session.terminated().is_none());
}

#[test]
fn verifier_timeouts_fail_open() {
    let cfg = RunConfig::synthetic(Algorithm::Tof, Schedule::tof_default(2, 4), 5);
    let silent = scripted(1, quick(20), |lines, _| while next_request(lines).is_some() {}).unwrap();
    let slow = WorkerVerifier::new(Arc::new(silent), "synthetic");
    let p = prompt();
    let latent = LatentRef::Handle("h".into());
    let input = FrameInput {
        latent: &latent,
        parent: None,
        frame_index: 0,
        stage: Stage::Initial,
    };
    let prompt_ref = StagePrompt {
        stage: Stage::Initial,
        prompt: &p,
    };
    assert_eq!(slow.score_frame(&input, prompt_ref), Err(VerifierFault::Timeout));

    // the worker's handles never reach an in-process verifier, so pair a
    // worker generator with a worker verifier that never answers
    let gen_session = Arc::new(spawn_in_process(SyntheticLandscape::from_seed(5), quick(5000)).unwrap());
    let mut backends = worker_backends(&cfg, gen_session).unwrap();
    backends.ensemble = VerifierEnsemble::single(Arc::new(slow));
    let r = run_search(&cfg, &backends, &SearchOptions::default()).unwrap();
    assert!(r.faults > 0);
    assert_eq!(r.best_path.nodes.len(), 4);
}

#[test]
fn generator_errors_fail_closed() {
    let cfg = RunConfig::synthetic(Algorithm::Tof, Schedule::tof_default(4, 5), 8);
    let session = proxied(SyntheticLandscape::from_seed(8), quick(5000), |req| {
        let refuse = req.kind == Kind::GenerateRequest && req.payload["frame_index"] == 2 && req.msg_id % 2 == 0;
        refuse.then(|| {
            Envelope::new(
                req.msg_id,
                Kind::Error,
                &ErrorPayload {
                    message: "out of memory".into(),
                },
            )
        })
    })
    .unwrap();
    let session = Arc::new(session);
    let r = run_search(
        &cfg,
        &worker_backends(&cfg, session.clone()).unwrap(),
        &SearchOptions::default(),
    )
    .unwrap();
    assert!(session.stats().error_responses > 0);
    assert!(r.events.iter().any(|e| format!("{:?}", e.event) == "Failed"));
    assert_eq!(r.best_path.nodes.len(), 5);
}

#[test]
fn worker_backed_run_matches_in_process_run() {
    for (alg, seed) in [(Algorithm::Linear, 3), (Algorithm::Tof, 3), (Algorithm::Tof, 17)] {
        let mut cfg = RunConfig::synthetic(alg, Schedule::tof_default(4, 8), seed);
        cfg.verifier_weights = [("synthetic", 1.0), ("alignment", 0.5), ("smoothness", 0.5)]
            .into_iter()
            .map(|(k, w)| (k.to_string(), w))
            .collect();
        let local = run_search(&cfg, &Backends::synthetic(&cfg).unwrap(), &SearchOptions::default()).unwrap();
        let session =
            Arc::new(spawn_in_process(SyntheticLandscape::from_seed(seed), SessionConfig::default()).unwrap());
        let remote = run_search(
            &cfg,
            &worker_backends(&cfg, session.clone()).unwrap(),
            &SearchOptions::default(),
        )
        .unwrap();
        assert_eq!(local.best_path.seeds(), remote.best_path.seeds(), "{alg:?}/{seed}");
        assert_eq!(local.quality, remote.quality);
        assert_eq!(local.final_aggregated, remote.final_aggregated);
        assert_eq!(local.k_sequence, remote.k_sequence);
        assert_eq!(local.ledger.totals(), remote.ledger.totals());
        assert!(session.stats().balanced());
    }
}

#[test]
fn unknown_verifiers_are_refused_up_front() {
    let mut cfg = RunConfig::synthetic(Algorithm::Tof, Schedule::tof_default(2, 4), 1);
    cfg.verifier_weights.insert("aesthetics".into(), 1.0);
    let session = Arc::new(spawn_in_process(SyntheticLandscape::from_seed(1), SessionConfig::default()).unwrap());
    assert!(worker_backends(&cfg, session).is_err());
}

#[test]
fn gate_queries_round_trip() {
    let session = spawn_in_process(SyntheticLandscape::from_seed(2), SessionConfig::default()).unwrap();
    let resp: FrameResponse = session
        .request(
            Kind::PartialDenoiseRequest,
            &PartialDenoiseRequest {
                frame: frame(None, 0, 9, Stage::Initial, 10),
                from: None,
            },
        )
        .unwrap();
    let state = PartialFrameState {
        latent_ref: LatentRef::Handle(resp.latent_ref),
        denoise_progress: resp.denoise_progress,
        steps_done: resp.steps_done,
        steps_per_frame: 50,
    };
    assert!(worker_gate(&session, &state, resp.denoise_progress).unwrap());
    assert!(!worker_gate(&session, &state, resp.denoise_progress + 0.01).unwrap());
}

#[test]
fn synthetic_worker_passes_conformance() {
    let session = spawn_in_process(SyntheticLandscape::from_seed(4), SessionConfig::default()).unwrap();
    let report = check_worker(&session);
    assert_eq!(report.violations(), 0, "{:#?}", report.checks);
    assert!(report.stats.balanced());
}

#[test]
fn conformance_flags_a_broken_worker() {
    let session = scripted(1, quick(100), |lines, w| {
        while let Some(req) = next_request(lines) {
            reply(
                w,
                &Envelope::new(req.msg_id, Kind::Error, &ErrorPayload { message: "no".into() }),
            );
        }
    })
    .unwrap();
    let report = check_worker(&session);
    assert!(report.violations() > 0);
}
