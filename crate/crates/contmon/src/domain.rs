//! Exact domain tracking: the max-height broadcast race and the
//! representative-based domain monitor built on top of it.
//!
//! The race works as follows. Every participating node draws a capped
//! geometric height `h` and schedules a broadcast of its value for sub-round
//! `L - h`, where `L` is the height cap. A node stays silent if another node
//! with the same value already broadcast in an earlier sub-round, so for each
//! value exactly the nodes holding the maximum height speak, all in the same
//! sub-round. The expected number of speakers per value is a small constant
//! (below 4), independently of how many nodes observe the value.
//!
//! The domain monitor keeps, for every currently observed value, a
//! representative node that still observes it. Per value the run decomposes
//! into phases: a phase lasts while at least one node kept observing the
//! value since the phase started (`status = 1`). When a representative stops
//! observing its value it reports to the server, which first races the
//! remaining `status = 1` observers for a replacement and, failing that,
//! races the `status = 0` observers to start a fresh phase — deleting the
//! value when nobody answers at all. Server decisions (new representative,
//! phase start, deletion) are broadcast, so nodes maintain their domain
//! replica for free by listening.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sim::{
    geometric_height, MessageKind, MessageLedger, NodeId, Origin, PayloadClass, Protocol,
    ProtocolId, RoundBlock, Simulation, StepCtx, StepOutput, StreamTrace, Value,
};

/// Responders for one value in a propagation race: the nodes that drew the
/// maximum height among the value's participants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueResponse {
    pub value: Value,
    pub height: u32,
    pub responders: Vec<NodeId>,
}

/// Outcome of one propagation race, sorted by value.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PropagateOutcome {
    pub responses: Vec<ValueResponse>,
    /// Sub-rounds that elapsed before the race was decided (the full cap if
    /// nobody responded).
    pub rounds_used: u32,
}

impl PropagateOutcome {
    pub fn total_responders(&self) -> usize {
        self.responses.iter().map(|r| r.responders.len()).sum()
    }

    pub fn for_value(&self, v: Value) -> Option<&ValueResponse> {
        self.responses.iter().find(|r| r.value == v)
    }
}

/// Runs one max-height race over `participants` (already filtered by status
/// and, when applicable, by value). Per observed value, the participants
/// with the maximum height broadcast in sub-round `L - h`; simultaneous
/// broadcasts all count. Returns the outcome plus the reserved block, whose
/// last sub-round (offset `L`) is left to the caller for a follow-up
/// announcement.
pub fn propagate_max(
    ctx: &mut StepCtx<'_>,
    participants: impl IntoIterator<Item = NodeId>,
    payload: PayloadClass,
) -> (PropagateOutcome, RoundBlock) {
    let cap = ctx.params().height_cap();
    let block = ctx.alloc_block(cap + 1);

    let mut races: BTreeMap<Value, (u32, Vec<NodeId>)> = BTreeMap::new();
    for i in participants {
        let v = ctx.value_of(i);
        let h = geometric_height(ctx.node_rng(i), cap);
        let entry = races.entry(v).or_insert((0, Vec::new()));
        if h > entry.0 {
            entry.0 = h;
            entry.1.clear();
            entry.1.push(i);
        } else if h == entry.0 {
            entry.1.push(i);
        }
    }

    let mut responses: Vec<ValueResponse> = races
        .into_iter()
        .map(|(value, (height, responders))| ValueResponse {
            value,
            height,
            responders,
        })
        .collect();
    // Record in schedule order: earlier sub-rounds (larger heights) first.
    responses.sort_by_key(|r| (cap - r.height, r.value));
    let mut rounds_used = if responses.is_empty() { cap } else { 0 };
    for r in &responses {
        let offset = cap - r.height;
        rounds_used = rounds_used.max(offset + 1);
        for &i in &r.responders {
            ctx.record(
                block,
                offset,
                Origin::Node(i),
                MessageKind::Broadcast,
                payload,
                Some(r.value),
            );
        }
    }
    responses.sort_by_key(|r| r.value);
    (
        PropagateOutcome {
            responses,
            rounds_used,
        },
        block,
    )
}

/// A standalone probe protocol: reruns the propagation race every step,
/// either for a single target value or (with `value = None`) for the whole
/// domain at once.
#[derive(Debug, Clone)]
pub struct PropagateMaxProbe {
    pub value: Option<Value>,
}

impl Protocol for PropagateMaxProbe {
    fn id(&self) -> ProtocolId {
        ProtocolId::PropagateMax
    }

    fn step(&mut self, ctx: &mut StepCtx<'_>) -> StepOutput {
        let n = ctx.trace().n();
        let target = self.value;
        let participants: Vec<NodeId> = (1..=n)
            .filter(|&i| target.is_none_or(|v| ctx.value_of(i) == v))
            .collect();
        let (outcome, _) = propagate_max(ctx, participants, PayloadClass::Response);
        StepOutput::Responses(outcome)
    }
}

/// The server's view after a step: the exact domain, one representative per
/// domain value and the per-value phase counter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSnapshot {
    pub t: u32,
    pub domain: BTreeSet<Value>,
    pub representatives: BTreeMap<Value, NodeId>,
    pub phases: BTreeMap<Value, u64>,
}

impl DomainSnapshot {
    fn empty(t: u32) -> Self {
        Self {
            t,
            domain: BTreeSet::new(),
            representatives: BTreeMap::new(),
            phases: BTreeMap::new(),
        }
    }
}

/// Domain monitor state machine. Optionally restricted to a tracked subset
/// of values (used by the sampled count-distinct protocol, where only values
/// with a successful public coin flip take part).
#[derive(Debug, Clone)]
pub struct DomainMonitor {
    tracked: Option<BTreeSet<Value>>,
    statuses: Vec<u8>,
    phase_seq: BTreeMap<Value, u64>,
    snapshot: Option<DomainSnapshot>,
}

impl DomainMonitor {
    pub fn new() -> Self {
        Self {
            tracked: None,
            statuses: Vec::new(),
            phase_seq: BTreeMap::new(),
            snapshot: None,
        }
    }

    /// Restricts the monitor to the given values; all other observations are
    /// ignored entirely.
    pub fn with_tracked(tracked: BTreeSet<Value>) -> Self {
        Self {
            tracked: Some(tracked),
            ..Self::new()
        }
    }

    pub fn snapshot(&self) -> Option<&DomainSnapshot> {
        self.snapshot.as_ref()
    }

    #[inline]
    fn is_tracked(&self, v: Value) -> bool {
        self.tracked.as_ref().is_none_or(|s| s.contains(&v))
    }

    /// Advances the monitor by one step and returns the new snapshot.
    pub fn advance(&mut self, ctx: &mut StepCtx<'_>) -> DomainSnapshot {
        if self.snapshot.is_none() {
            self.init(ctx)
        } else {
            self.update(ctx)
        }
    }

    fn init(&mut self, ctx: &mut StepCtx<'_>) -> DomainSnapshot {
        let n = ctx.trace().n();
        self.statuses = vec![1; n as usize];
        let participants: Vec<NodeId> = (1..=n)
            .filter(|&i| self.is_tracked(ctx.value_of(i)))
            .collect();
        let (outcome, _) = propagate_max(ctx, participants, PayloadClass::Response);

        let mut snap = DomainSnapshot::empty(ctx.t());
        let announce = ctx.alloc_block(outcome.responses.len() as u32);
        for (idx, r) in outcome.responses.iter().enumerate() {
            let rep = r.responders[ctx.server_rng().random_range(0..r.responders.len())];
            snap.domain.insert(r.value);
            snap.representatives.insert(r.value, rep);
            let seq = self.phase_seq.entry(r.value).or_insert(0);
            *seq += 1;
            snap.phases.insert(r.value, *seq);
            ctx.record(
                announce,
                idx as u32,
                Origin::Server,
                MessageKind::Broadcast,
                PayloadClass::PhaseStart,
                Some(r.value),
            );
        }
        self.snapshot = Some(snap.clone());
        snap
    }

    fn update(&mut self, ctx: &mut StepCtx<'_>) -> DomainSnapshot {
        let mut snap = self.snapshot.clone().expect("update after init");
        snap.t = ctx.t();
        let n = ctx.trace().n();

        // Node reactions to a changed observation. A representative that
        // stops observing its value always reports to the server (without
        // this the server would keep a stale representative when the node
        // moves to a brand-new value); nodes moving to a value outside the
        // current domain additionally join the discovery race for it.
        let mut notified: Vec<(Value, NodeId)> = Vec::new();
        let mut discoveries: BTreeSet<Value> = BTreeSet::new();
        for i in 1..=n {
            let now = ctx.value_of(i);
            let before = ctx.prev_value_of(i).expect("update runs at t > 1");
            if now == before {
                continue;
            }
            self.statuses[(i - 1) as usize] = 0;
            if self.is_tracked(before) && snap.representatives.get(&before) == Some(&i) {
                notified.push((before, i));
            }
            if self.is_tracked(now) && !snap.domain.contains(&now) {
                discoveries.insert(now);
            }
        }

        if !notified.is_empty() {
            notified.sort_unstable();
            let block = ctx.alloc_block(1);
            for &(v, i) in &notified {
                ctx.record(
                    block,
                    0,
                    Origin::Node(i),
                    MessageKind::Unicast,
                    PayloadClass::RepNotify,
                    Some(v),
                );
            }
        }

        // Observers per value, for the races and the status resets.
        let mut observers: BTreeMap<Value, Vec<NodeId>> = BTreeMap::new();
        for i in 1..=n {
            let v = ctx.value_of(i);
            if self.is_tracked(v) {
                observers.entry(v).or_default().push(i);
            }
        }

        // One merged event per value, processed in ascending value order.
        enum Trigger {
            RepLost,
            Discovery,
        }
        let mut triggers: BTreeMap<Value, Trigger> = BTreeMap::new();
        for &(v, _) in &notified {
            triggers.insert(v, Trigger::RepLost);
        }
        for &v in &discoveries {
            triggers.insert(v, Trigger::Discovery);
        }

        for (v, trigger) in triggers {
            let empty = Vec::new();
            let obs = observers.get(&v).unwrap_or(&empty);
            match trigger {
                Trigger::RepLost => {
                    let loyal: Vec<NodeId> = obs
                        .iter()
                        .copied()
                        .filter(|&i| self.statuses[(i - 1) as usize] == 1)
                        .collect();
                    let (outcome, block) = propagate_max(ctx, loyal, PayloadClass::Response);
                    if let Some(r) = outcome.for_value(v) {
                        let rep =
                            r.responders[ctx.server_rng().random_range(0..r.responders.len())];
                        snap.representatives.insert(v, rep);
                        ctx.record(
                            block,
                            ctx.params().height_cap(),
                            Origin::Server,
                            MessageKind::Broadcast,
                            PayloadClass::RepChoice,
                            Some(v),
                        );
                        continue;
                    }
                    // Phase over: race the remaining observers to start a new
                    // one, otherwise the value is gone.
                    let newcomers: Vec<NodeId> = obs
                        .iter()
                        .copied()
                        .filter(|&i| self.statuses[(i - 1) as usize] == 0)
                        .collect();
                    let (outcome, block) = propagate_max(ctx, newcomers, PayloadClass::Response);
                    if let Some(r) = outcome.for_value(v) {
                        self.start_phase(ctx, &mut snap, v, r, obs, block);
                    } else {
                        snap.domain.remove(&v);
                        snap.representatives.remove(&v);
                        snap.phases.remove(&v);
                        ctx.record(
                            block,
                            ctx.params().height_cap(),
                            Origin::Server,
                            MessageKind::Broadcast,
                            PayloadClass::Deletion,
                            Some(v),
                        );
                    }
                }
                Trigger::Discovery => {
                    let joiners: Vec<NodeId> = obs
                        .iter()
                        .copied()
                        .filter(|&i| self.statuses[(i - 1) as usize] == 0)
                        .collect();
                    let (outcome, block) = propagate_max(ctx, joiners, PayloadClass::Response);
                    let r = outcome
                        .for_value(v)
                        .expect("discovery race has participants");
                    snap.domain.insert(v);
                    self.start_phase(ctx, &mut snap, v, r, obs, block);
                }
            }
        }

        self.snapshot = Some(snap.clone());
        snap
    }

    fn start_phase(
        &mut self,
        ctx: &mut StepCtx<'_>,
        snap: &mut DomainSnapshot,
        v: Value,
        race: &ValueResponse,
        observers: &[NodeId],
        block: RoundBlock,
    ) {
        let rep = race.responders[ctx.server_rng().random_range(0..race.responders.len())];
        snap.representatives.insert(v, rep);
        let seq = self.phase_seq.entry(v).or_insert(0);
        *seq += 1;
        snap.phases.insert(v, *seq);
        for &i in observers {
            self.statuses[(i - 1) as usize] = 1;
        }
        ctx.record(
            block,
            ctx.params().height_cap(),
            Origin::Server,
            MessageKind::Broadcast,
            PayloadClass::PhaseStart,
            Some(v),
        );
    }
}

impl Default for DomainMonitor {
    fn default() -> Self {
        Self::new()
    }
}

impl Protocol for DomainMonitor {
    fn id(&self) -> ProtocolId {
        ProtocolId::DomainMonitor
    }

    fn step(&mut self, ctx: &mut StepCtx<'_>) -> StepOutput {
        StepOutput::Domain(self.advance(ctx))
    }
}

/// Result of a full domain monitoring run.
#[derive(Debug, Clone)]
pub struct DomainRun {
    pub snapshots: Vec<DomainSnapshot>,
    pub ledger: MessageLedger,
}

/// Runs the domain monitor over the whole trace.
pub fn run_domain_monitoring(trace: &StreamTrace, master_seed: u64) -> DomainRun {
    let mut sim = Simulation::new(trace, master_seed);
    let mut monitor = DomainMonitor::new();
    let snapshots = (1..=trace.steps())
        .map(|t| sim.step_scope(t, ProtocolId::DomainMonitor, |ctx| monitor.advance(ctx)))
        .collect();
    DomainRun {
        snapshots,
        ledger: sim.into_ledger(),
    }
}

/// Component-wise changes of the representative sequence over the run,
/// starting from the all-nil sequence before the first step.
pub fn representative_changes(snapshots: &[DomainSnapshot]) -> u64 {
    let mut changes = 0u64;
    let mut prev: BTreeMap<Value, NodeId> = BTreeMap::new();
    for snap in snapshots {
        let keys: BTreeSet<Value> = prev
            .keys()
            .chain(snap.representatives.keys())
            .copied()
            .collect();
        for v in keys {
            if prev.get(&v) != snap.representatives.get(&v) {
                changes += 1;
            }
        }
        prev = snap.representatives.clone();
    }
    changes
}

/// Maximal intervals `(value, phase, from_t, to_t)` during which one phase of
/// a value was live, reconstructed from the emitted snapshots.
pub fn phase_intervals(snapshots: &[DomainSnapshot]) -> Vec<(Value, u64, u32, u32)> {
    let mut open: BTreeMap<Value, (u64, u32)> = BTreeMap::new();
    let mut out = Vec::new();
    let mut last_t = 0;
    for snap in snapshots {
        last_t = snap.t;
        let live: BTreeSet<Value> = snap.phases.keys().copied().collect();
        let open_values: Vec<Value> = open.keys().copied().collect();
        for v in open_values {
            let (phase, from) = open[&v];
            match snap.phases.get(&v) {
                Some(&p) if p == phase => {}
                _ => {
                    out.push((v, phase, from, snap.t - 1));
                    open.remove(&v);
                }
            }
        }
        for &v in &live {
            let phase = snap.phases[&v];
            open.entry(v).or_insert((phase, snap.t));
        }
    }
    for (v, (phase, from)) in open {
        out.push((v, phase, from, last_t));
    }
    out.sort_unstable();
    out
}

/// CSV export of snapshots with columns `t,value,representative,phase`.
pub fn snapshots_to_csv(snapshots: &[DomainSnapshot]) -> String {
    let mut out = String::from("t,value,representative,phase\n");
    for snap in snapshots {
        for (&v, &rep) in &snap.representatives {
            out.push_str(&format!("{},{},{},{}\n", snap.t, v, rep, snap.phases[&v]));
        }
    }
    out
}
