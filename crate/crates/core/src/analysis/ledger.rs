use serde::{Deserialize, Serialize};

use crate::model::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    Generate,
    Verify,
}

/// What produced a cost event. `Root`, `Extend` and `Partial` each start
/// the generation of one node; `Resume` continues a partial one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostCall {
    Root,
    Extend,
    Partial,
    Resume,
    FrameScore,
    VideoScore,
    Gate,
}

impl CostCall {
    pub fn kind(self) -> CostKind {
        match self {
            CostCall::Root | CostCall::Extend | CostCall::Partial | CostCall::Resume => CostKind::Generate,
            CostCall::FrameScore | CostCall::VideoScore | CostCall::Gate => CostKind::Verify,
        }
    }

    fn starts_node(self) -> bool {
        matches!(self, CostCall::Root | CostCall::Extend | CostCall::Partial)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEvent {
    pub kind: CostKind,
    pub call: CostCall,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_id: Option<NodeId>,
    pub steps: u32,
    pub temporal_length: u32,
    /// Logical position in the ledger; never wall-clock.
    pub seq: u64,
}

impl CostEvent {
    pub fn generate(call: CostCall, node_id: NodeId, steps: u32, temporal_length: u32) -> Self {
        CostEvent {
            kind: CostKind::Generate,
            call,
            node_id: Some(node_id),
            steps,
            temporal_length,
            seq: 0,
        }
    }

    pub fn verify(call: CostCall, node_id: Option<NodeId>) -> Self {
        CostEvent {
            kind: CostKind::Verify,
            call,
            node_id,
            steps: 0,
            temporal_length: 0,
            seq: 0,
        }
    }

    pub fn nfe(&self) -> u64 {
        match self.kind {
            CostKind::Generate => u64::from(self.steps) * u64::from(self.temporal_length),
            CostKind::Verify => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTotals {
    /// Every generate event, including resumes.
    pub generate_events: u64,
    /// Node generations started (root + extend + partial).
    pub extend_calls: u64,
    pub verify_calls: u64,
    pub nfe: u64,
}

/// Append-only cost record for one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NfeLedger {
    events: Vec<CostEvent>,
    totals: LedgerTotals,
}

impl NfeLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, mut event: CostEvent) {
        event.seq = self.events.len() as u64;
        match event.kind {
            CostKind::Generate => {
                self.totals.generate_events += 1;
                if event.call.starts_node() {
                    self.totals.extend_calls += 1;
                }
                self.totals.nfe += event.nfe();
            }
            CostKind::Verify => self.totals.verify_calls += 1,
        }
        self.events.push(event);
    }

    pub fn extend_from(&mut self, events: impl IntoIterator<Item = CostEvent>) {
        for e in events {
            self.record(e);
        }
    }

    pub fn events(&self) -> &[CostEvent] {
        &self.events
    }

    pub fn totals(&self) -> LedgerTotals {
        self.totals
    }

    /// Totals recomputed from the raw events, ignoring the cache.
    pub fn recount(&self) -> LedgerTotals {
        let mut t = LedgerTotals::default();
        for e in &self.events {
            match e.kind {
                CostKind::Generate => {
                    t.generate_events += 1;
                    t.extend_calls += u64::from(e.call.starts_node());
                    t.nfe += e.nfe();
                }
                CostKind::Verify => t.verify_calls += 1,
            }
        }
        t
    }
}
