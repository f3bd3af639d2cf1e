//! One attached worker: newline-delimited JSON over a pair of byte streams.
//!
//! A reader thread owns the worker's output and routes each response to the
//! caller waiting on its `msg_id`. Up to `window` requests may be in flight;
//! responses may arrive in any order.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use super::messages::{CapabilitiesPayload, Envelope, ErrorPayload, Hello, Kind, Shutdown, PROTOCOL_VERSION};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("worker i/o failed: {0}")]
    Io(String),
    #[error("could not start worker: {0}")]
    Spawn(String),
    #[error("malformed line from worker: {0}")]
    Malformed(String),
    #[error("response carries unknown msg_id {0}")]
    MsgIdMismatch(u64),
    #[error("worker speaks protocol version {0}, expected {PROTOCOL_VERSION}")]
    Version(u32),
    #[error("handshake: {0}")]
    Handshake(String),
    #[error("no hello/capabilities within {0:?}")]
    HandshakeTimeout(Duration),
    #[error("request {msg_id} timed out after {after:?}")]
    Timeout { msg_id: u64, after: Duration },
    #[error("expected {expected:?}, worker sent {got:?}")]
    UnexpectedKind { expected: Kind, got: Kind },
    #[error("worker error on request {msg_id}: {message}")]
    Worker { msg_id: u64, message: String },
    #[error("bad payload in {kind:?}: {reason}")]
    Payload { kind: Kind, reason: String },
    #[error("{0:?} is not a request")]
    NotARequest(Kind),
    #[error("session closed")]
    Closed,
}

impl ProtocolError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, ProtocolError::Timeout { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionConfig {
    pub handshake_timeout: Duration,
    pub request_timeout: Duration,
    pub window: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            handshake_timeout: Duration::from_secs(10),
            request_timeout: Duration::from_secs(120),
            window: 4,
        }
    }
}

/// Request accounting. `sent == answered + timed_out + aborted` once the
/// session is idle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SessionStats {
    pub sent: u64,
    pub answered: u64,
    pub error_responses: u64,
    pub timed_out: u64,
    pub late: u64,
    pub aborted: u64,
    pub max_in_flight: usize,
}

impl SessionStats {
    pub fn balanced(&self) -> bool {
        self.sent == self.answered + self.timed_out + self.aborted
    }
}

#[derive(Default)]
struct State {
    next_id: u64,
    pending: HashMap<u64, mpsc::Sender<Envelope>>,
    timed_out: HashSet<u64>,
    in_flight: usize,
    terminated: Option<ProtocolError>,
    stats: SessionStats,
}

struct Shared {
    state: Mutex<State>,
    slots: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn terminate(&self, err: ProtocolError) {
        let mut st = self.lock();
        if st.terminated.is_none() {
            log::warn!("worker session terminated: {err}");
            st.terminated = Some(err);
        }
        // dropping the senders wakes every waiter
        st.pending.clear();
        drop(st);
        self.slots.notify_all();
    }
}

type Handshake = Result<(Hello, CapabilitiesPayload), ProtocolError>;

pub struct WorkerSession {
    shared: Arc<Shared>,
    writer: Mutex<Option<Box<dyn Write + Send>>>,
    hello: Hello,
    capabilities: CapabilitiesPayload,
    config: SessionConfig,
    child: Mutex<Option<Child>>,
}

impl std::fmt::Debug for WorkerSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerSession")
            .field("hello", &self.hello)
            .field("capabilities", &self.capabilities)
            .finish_non_exhaustive()
    }
}

fn parse_line(line: &str) -> Result<Envelope, ProtocolError> {
    serde_json::from_str(line).map_err(|e| ProtocolError::Malformed(format!("{e}: {}", line.trim_end())))
}

fn payload<T: DeserializeOwned>(env: &Envelope) -> Result<T, ProtocolError> {
    serde_json::from_value(env.payload.clone()).map_err(|e| ProtocolError::Payload {
        kind: env.kind,
        reason: e.to_string(),
    })
}

fn read_handshake<R: BufRead>(reader: &mut R) -> Handshake {
    let mut next = |want: Kind| -> Result<Envelope, ProtocolError> {
        let mut line = String::new();
        match reader.read_line(&mut line) {
            Ok(0) => Err(ProtocolError::Closed),
            Ok(_) => {
                let env = parse_line(&line)?;
                if env.kind != want {
                    return Err(ProtocolError::UnexpectedKind {
                        expected: want,
                        got: env.kind,
                    });
                }
                Ok(env)
            }
            Err(e) => Err(ProtocolError::Io(e.to_string())),
        }
    };
    let hello: Hello = payload(&next(Kind::Hello)?)?;
    if hello.protocol_version != PROTOCOL_VERSION {
        return Err(ProtocolError::Version(hello.protocol_version));
    }
    let caps: CapabilitiesPayload = payload(&next(Kind::Capabilities)?)?;
    Ok((hello, caps))
}

fn route<R: BufRead>(mut reader: R, shared: Arc<Shared>) {
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => return shared.terminate(ProtocolError::Closed),
            Ok(_) if line.trim().is_empty() => continue,
            Ok(_) => {}
            Err(e) => return shared.terminate(ProtocolError::Io(e.to_string())),
        }
        let env = match parse_line(&line) {
            Ok(env) => env,
            Err(e) => return shared.terminate(e),
        };
        let mut st = shared.lock();
        if let Some(tx) = st.pending.remove(&env.msg_id) {
            st.stats.answered += 1;
            if env.kind == Kind::Error {
                st.stats.error_responses += 1;
            }
            drop(st);
            let _ = tx.send(env);
        } else if st.timed_out.remove(&env.msg_id) {
            st.stats.late += 1;
            log::debug!("late response to {} discarded", env.msg_id);
        } else {
            drop(st);
            return shared.terminate(ProtocolError::MsgIdMismatch(env.msg_id));
        }
    }
}

impl WorkerSession {
    /// Attaches to a worker that talks over `reader`/`writer`. Blocks until
    /// the worker has sent `hello` and `capabilities`.
    pub fn connect<R, W>(reader: R, writer: W, config: SessionConfig) -> Result<Self, ProtocolError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let shared = Arc::new(Shared {
            state: Mutex::new(State::default()),
            slots: Condvar::new(),
        });
        let (tx, rx) = mpsc::channel::<Handshake>();
        let routed = shared.clone();
        thread::Builder::new()
            .name("worker-reader".into())
            .spawn(move || {
                let mut reader = BufReader::new(reader);
                let hs = read_handshake(&mut reader);
                let ok = hs.is_ok();
                let _ = tx.send(hs);
                if ok {
                    route(reader, routed);
                }
            })
            .map_err(|e| ProtocolError::Spawn(e.to_string()))?;
        let (hello, capabilities) = match rx.recv_timeout(config.handshake_timeout) {
            Ok(hs) => hs?,
            Err(RecvTimeoutError::Timeout) => return Err(ProtocolError::HandshakeTimeout(config.handshake_timeout)),
            Err(RecvTimeoutError::Disconnected) => return Err(ProtocolError::Closed),
        };
        log::info!(
            "attached worker {:?} (deterministic: {})",
            hello.worker,
            capabilities.deterministic
        );
        Ok(WorkerSession {
            shared,
            writer: Mutex::new(Some(Box::new(writer))),
            hello,
            capabilities,
            config,
            child: Mutex::new(None),
        })
    }

    /// Starts `argv` as a subprocess and attaches to its standard streams.
    pub fn spawn(argv: &[String], config: SessionConfig) -> Result<Self, ProtocolError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| ProtocolError::Spawn("empty worker command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ProtocolError::Spawn(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        match Self::connect(stdout, stdin, config) {
            Ok(session) => {
                *session.child.lock().unwrap_or_else(|p| p.into_inner()) = Some(child);
                Ok(session)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }

    pub fn capabilities(&self) -> &CapabilitiesPayload {
        &self.capabilities
    }

    pub fn config(&self) -> SessionConfig {
        self.config
    }

    pub fn stats(&self) -> SessionStats {
        self.shared.lock().stats
    }

    /// Error that ended the session, if any.
    pub fn terminated(&self) -> Option<ProtocolError> {
        self.shared.lock().terminated.clone()
    }

    fn write_line(&self, line: &str) -> Result<(), ProtocolError> {
        let mut guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let w = guard.as_mut().ok_or(ProtocolError::Closed)?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .and_then(|_| w.flush())
            .map_err(|e| ProtocolError::Io(e.to_string()))
    }

    /// Sends one request and waits for its response envelope.
    pub fn call(&self, kind: Kind, body: serde_json::Value) -> Result<Envelope, ProtocolError> {
        let expected = kind.response().ok_or(ProtocolError::NotARequest(kind))?;
        let (tx, rx) = mpsc::channel();
        let msg_id = {
            let mut st = self.shared.lock();
            loop {
                if let Some(e) = &st.terminated {
                    return Err(e.clone());
                }
                if st.in_flight < self.config.window.max(1) {
                    break;
                }
                st = self.shared.slots.wait(st).unwrap_or_else(|p| p.into_inner());
            }
            let id = st.next_id;
            st.next_id += 1;
            st.in_flight += 1;
            st.stats.sent += 1;
            st.stats.max_in_flight = st.stats.max_in_flight.max(st.in_flight);
            st.pending.insert(id, tx);
            id
        };
        let line = Envelope {
            msg_id,
            kind,
            payload: body,
        }
        .to_line();
        let outcome = match self.write_line(&line) {
            Ok(()) => rx.recv_timeout(self.config.request_timeout),
            Err(e) => {
                self.shared.terminate(e);
                Err(RecvTimeoutError::Disconnected)
            }
        };
        let reply = {
            let mut st = self.shared.lock();
            st.in_flight -= 1;
            let reply = match outcome {
                Ok(env) => Ok(env),
                // routed between the timeout and taking the lock
                Err(RecvTimeoutError::Timeout) if !st.pending.contains_key(&msg_id) && st.terminated.is_none() => {
                    rx.try_recv().map_err(|_| ProtocolError::Closed)
                }
                Err(RecvTimeoutError::Timeout) => {
                    st.pending.remove(&msg_id);
                    st.timed_out.insert(msg_id);
                    st.stats.timed_out += 1;
                    Err(ProtocolError::Timeout {
                        msg_id,
                        after: self.config.request_timeout,
                    })
                }
                Err(RecvTimeoutError::Disconnected) => {
                    st.stats.aborted += 1;
                    Err(st.terminated.clone().unwrap_or(ProtocolError::Closed))
                }
            };
            self.shared.slots.notify_one();
            reply
        }?;
        if reply.msg_id != msg_id {
            return Err(ProtocolError::MsgIdMismatch(reply.msg_id));
        }
        match reply.kind {
            k if k == expected => Ok(reply),
            Kind::Error => Err(ProtocolError::Worker {
                msg_id,
                message: payload::<ErrorPayload>(&reply).map_or_else(|e| e.to_string(), |p| p.message),
            }),
            got => Err(ProtocolError::UnexpectedKind { expected, got }),
        }
    }

    /// Typed request/response round trip.
    pub fn request<P: Serialize, R: DeserializeOwned>(&self, kind: Kind, body: &P) -> Result<R, ProtocolError> {
        let value = serde_json::to_value(body).map_err(|e| ProtocolError::Payload {
            kind,
            reason: e.to_string(),
        })?;
        let env = self.call(kind, value)?;
        payload(&env)
    }

    /// Sends `shutdown`, closes the worker's input and reaps a child process.
    pub fn shutdown(&self) {
        let id = self.shared.lock().next_id;
        let _ = self.write_line(&Envelope::new(id, Kind::Shutdown, &Shutdown {}).to_line());
        self.writer.lock().unwrap_or_else(|p| p.into_inner()).take();
        if let Some(mut child) = self.child.lock().unwrap_or_else(|p| p.into_inner()).take() {
            let deadline = Instant::now() + Duration::from_secs(2);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
    }
}

impl Drop for WorkerSession {
    fn drop(&mut self) {
        self.shutdown();
    }
}
