use serde::{Deserialize, Serialize};

use super::trace::{NodeId, Value};

/// Which protocol instance an entry is attributed to. The names double as
/// the CLI protocol identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProtocolId {
    PropagateMax,
    DomainMonitor,
    FreqPerStep,
    FreqContinuous,
    CdPerStep,
    CdContinuous,
}

impl ProtocolId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProtocolId::PropagateMax => "propagate-max",
            ProtocolId::DomainMonitor => "domain",
            ProtocolId::FreqPerStep => "freq-step",
            ProtocolId::FreqContinuous => "freq-cont",
            ProtocolId::CdPerStep => "cd-step",
            ProtocolId::CdContinuous => "cd-cont",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Server,
    Node(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    Broadcast,
    Unicast,
}

/// Coarse classification of what a message carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayloadClass {
    /// A height/value response in a suppression race.
    Response,
    /// A Bernoulli sampling reply in a frequency estimation round.
    SampleReply,
    /// A representative telling the server it stopped observing its value.
    RepNotify,
    /// Server announcement of a new representative within a running phase.
    RepChoice,
    /// Server announcement that a new phase (and representative) starts.
    PhaseStart,
    /// Server announcement that a value left the domain.
    Deletion,
    /// Server broadcast of a sampling probability.
    Probability,
    /// Server broadcast of a fresh public coin seed.
    Seed,
    /// A node reporting that it started observing a tracked value.
    ChurnEnter,
    /// A node reporting that it stopped observing a tracked value.
    ChurnLeave,
}

/// One unit-cost message. Size is not modeled, only the count matters;
/// `value` keeps per-value attribution for analysis and is not exported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub t: u32,
    pub round: u32,
    pub protocol: ProtocolId,
    pub origin: Origin,
    pub kind: MessageKind,
    pub payload: PayloadClass,
    pub value: Option<Value>,
}

/// Append-only account of every message sent during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageLedger {
    entries: Vec<LedgerEntry>,
}

impl MessageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.iter()
    }

    /// Number of messages recorded for step `t`.
    pub fn total_at(&self, t: u32) -> usize {
        self.entries.iter().filter(|e| e.t == t).count()
    }

    /// Messages per step, indexed by `t - 1`.
    pub fn totals_by_step(&self, steps: u32) -> Vec<u64> {
        let mut totals = vec![0u64; steps as usize];
        for e in &self.entries {
            totals[(e.t - 1) as usize] += 1;
        }
        totals
    }

    pub fn count_payload(&self, payload: PayloadClass) -> usize {
        self.entries.iter().filter(|e| e.payload == payload).count()
    }

    /// CSV export with columns `t,round,protocol,origin,kind`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,round,protocol,origin,kind\n");
        for e in &self.entries {
            let origin = match e.origin {
                Origin::Server => "server".to_string(),
                Origin::Node(i) => i.to_string(),
            };
            let kind = match e.kind {
                MessageKind::Broadcast => "broadcast",
                MessageKind::Unicast => "unicast",
            };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.t,
                e.round,
                e.protocol.as_str(),
                origin,
                kind
            ));
        }
        out
    }
}
