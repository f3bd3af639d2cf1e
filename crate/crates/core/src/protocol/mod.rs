//! Newline-delimited JSON protocol for external generator and verifier
//! workers.
//!
//! A worker is a subprocess that opens with `hello` and `capabilities`, then
//! answers each request line with exactly one response line carrying the
//! same `msg_id`. Latent references minted by a worker are opaque strings.

pub mod adapters;
pub mod conformance;
pub mod messages;
pub mod server;
pub mod session;

pub use adapters::{worker_backends, worker_gate, WorkerDecomposer, WorkerGenerator, WorkerVerifier};
pub use conformance::{check_worker, Check, ConformanceReport};
pub use messages::{Envelope, Kind, PROTOCOL_VERSION};
pub use server::{ServeStats, SyntheticWorker};
pub use session::{ProtocolError, SessionConfig, SessionStats, WorkerSession};

/// Runs a synthetic worker on a background thread and attaches to it
/// through in-memory pipes.
pub fn spawn_in_process(
    landscape: crate::generator::SyntheticLandscape,
    config: SessionConfig,
) -> Result<WorkerSession, ProtocolError> {
    let io = |e: std::io::Error| ProtocolError::Io(e.to_string());
    let (engine_rx, worker_tx) = std::io::pipe().map_err(io)?;
    let (worker_rx, engine_tx) = std::io::pipe().map_err(io)?;
    std::thread::Builder::new()
        .name("synthetic-worker".into())
        .spawn(move || {
            let mut worker = SyntheticWorker::new(landscape);
            if let Err(e) = worker.serve(std::io::BufReader::new(worker_rx), worker_tx) {
                log::debug!("in-process worker stopped: {e}");
            }
        })
        .map_err(io)?;
    WorkerSession::connect(engine_rx, engine_tx, config)
}
