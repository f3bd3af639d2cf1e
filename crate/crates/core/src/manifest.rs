//! Run manifests: a deterministic summary of one run that commits to its
//! event log by content hash.
//!
//! Nothing here reads the wall clock, so identical configs produce
//! byte-identical manifests. Wall-clock timing is written separately.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::ledger::LedgerTotals;
use crate::analysis::oracle::OracleResult;
use crate::model::{Algorithm, NodeId, RunConfig};
use crate::search::{NodeEvent, SearchResult};

pub const EVENT_LOG_FILE: &str = "events.jsonl";

/// `sha256:` digest of `content` in git blob framing (`blob <len>\0`).
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    let digest = h.finalize();
    let mut out = String::with_capacity(7 + 64);
    out.push_str("sha256:");
    for b in digest.iter() {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// One JSON object per line, in emission order.
pub fn event_log_jsonl(events: &[NodeEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLogRef {
    pub file: String,
    pub hash: String,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPath {
    pub node_ids: Vec<NodeId>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub final_aggregated: f64,
    pub quality: f64,
    pub accumulated: f64,
    pub per_verifier: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worker: Option<String>,
    pub deterministic: bool,
}

impl BackendInfo {
    pub fn synthetic() -> Self {
        BackendInfo {
            kind: "synthetic".into(),
            worker: None,
            deterministic: true,
        }
    }
}

/// Logical clock: positions in the cost ledger, not wall time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub clock: LogicalClock,
    pub started: u64,
    pub finished: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogicalClock {
    LedgerSeq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub algorithm: Algorithm,
    pub event_log: EventLogRef,
    pub best_path: BestPath,
    pub scores: Scores,
    pub ledger: LedgerTotals,
    pub k_sequence: Vec<usize>,
    pub verifier_faults: usize,
    pub backend: BackendInfo,
    pub timestamps: Timestamps,
}

impl RunManifest {
    /// Manifest plus the event log it commits to.
    pub fn from_result(config: &RunConfig, result: &SearchResult, backend: BackendInfo) -> (Self, String) {
        let log = event_log_jsonl(&result.events);
        let leaf = result.best_path.leaf().node_id;
        let chosen = result.final_candidates.iter().find(|c| c.leaf == leaf);
        let per_verifier = result
            .verifier_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), chosen.and_then(|c| c.raw[i])))
            .collect();
        let manifest = RunManifest {
            config: config.clone(),
            algorithm: result.algorithm,
            event_log: EventLogRef {
                file: EVENT_LOG_FILE.into(),
                hash: blob_hash(log.as_bytes()),
                events: result.events.len(),
            },
            best_path: BestPath {
                node_ids: result.best_path.node_ids(),
                seeds: result.best_path.seeds(),
            },
            scores: Scores {
                final_aggregated: result.final_aggregated,
                quality: result.quality,
                accumulated: result.accumulated,
                per_verifier,
            },
            ledger: result.ledger.totals(),
            k_sequence: result.k_sequence.clone(),
            verifier_faults: result.faults,
            backend,
            timestamps: Timestamps {
                clock: LogicalClock::LedgerSeq,
                started: 0,
                finished: result.ledger.events().len() as u64,
            },
        };
        (manifest, log)
    }

    /// Whether `log` is the event log this manifest was written with.
    pub fn verify_event_log(&self, log: &[u8]) -> bool {
        blob_hash(log) == self.event_log.hash
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleManifest {
    pub config: RunConfig,
    pub algorithm: Algorithm,
    pub event_log: EventLogRef,
    pub oracle: OracleResult,
}

impl OracleManifest {
    pub fn new(config: &RunConfig, oracle: OracleResult) -> Self {
        OracleManifest {
            config: config.clone(),
            algorithm: Algorithm::Oracle,
            event_log: EventLogRef {
                file: EVENT_LOG_FILE.into(),
                hash: blob_hash(b""),
                events: 0,
            },
            oracle,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}
