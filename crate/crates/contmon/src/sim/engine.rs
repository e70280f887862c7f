use rand_xoshiro::Xoshiro256PlusPlus;

use super::ledger::{LedgerEntry, MessageKind, MessageLedger, Origin, PayloadClass, ProtocolId};
use super::rng::{LogParams, RngContext};
use super::trace::{NodeId, StreamTrace, Value};
use crate::countdistinct::CountDistinctEstimate;
use crate::domain::{DomainSnapshot, PropagateOutcome};
use crate::frequency::FrequencyEstimate;

/// Per-step output of a protocol instance.
#[derive(Debug, Clone)]
pub enum StepOutput {
    Responses(PropagateOutcome),
    Domain(DomainSnapshot),
    Frequencies(Vec<FrequencyEstimate>),
    CountDistinct(CountDistinctEstimate),
}

/// A protocol instance driven step by step against a fixed trace.
pub trait Protocol {
    fn id(&self) -> ProtocolId;
    fn step(&mut self, ctx: &mut StepCtx<'_>) -> StepOutput;
}

/// A contiguous range of sub-rounds reserved for one protocol invocation.
/// Recording outside the reserved range is a hard failure: the round budget
/// is declared up front and exceeding it signals an implementation bug.
#[derive(Debug, Clone, Copy)]
pub struct RoundBlock {
    base: u32,
    len: u32,
}

impl RoundBlock {
    pub fn base(&self) -> u32 {
        self.base
    }

    /// Number of sub-rounds reserved in this block.
    pub fn rounds(&self) -> u32 {
        self.len
    }
}

/// Execution context handed to a protocol while it runs one time step.
///
/// All broadcasts recorded within one sub-round are delivered to all parties
/// before the next sub-round begins; the engine runs protocols sequentially
/// but keeps their sub-round blocks disjoint, so causality within a step is
/// decided entirely by round numbers.
pub struct StepCtx<'a> {
    trace: &'a StreamTrace,
    t: u32,
    params: LogParams,
    protocol: ProtocolId,
    rng: &'a mut RngContext,
    ledger: &'a mut MessageLedger,
    next_round: &'a mut u32,
}

impl<'a> StepCtx<'a> {
    #[inline]
    pub fn t(&self) -> u32 {
        self.t
    }

    #[inline]
    pub fn trace(&self) -> &'a StreamTrace {
        self.trace
    }

    #[inline]
    pub fn params(&self) -> LogParams {
        self.params
    }

    /// The value the given node observes at the current step.
    #[inline]
    pub fn value_of(&self, i: NodeId) -> Value {
        self.trace.value(self.t, i)
    }

    /// The value the node observed at the previous step, if any.
    #[inline]
    pub fn prev_value_of(&self, i: NodeId) -> Option<Value> {
        if self.t > 1 {
            Some(self.trace.value(self.t - 1, i))
        } else {
            None
        }
    }

    #[inline]
    pub fn node_rng(&mut self, i: NodeId) -> &mut Xoshiro256PlusPlus {
        self.rng.node_rng(i)
    }

    #[inline]
    pub fn server_rng(&mut self) -> &mut Xoshiro256PlusPlus {
        self.rng.server_rng()
    }

    /// Reserves the next `len` sub-rounds of this step.
    pub fn alloc_block(&mut self, len: u32) -> RoundBlock {
        let block = RoundBlock {
            base: *self.next_round,
            len,
        };
        *self.next_round += len;
        block
    }

    /// Records one message at `block.base + offset`.
    pub fn record(
        &mut self,
        block: RoundBlock,
        offset: u32,
        origin: Origin,
        kind: MessageKind,
        payload: PayloadClass,
        value: Option<Value>,
    ) {
        assert!(
            offset < block.len,
            "protocol {} exceeded its round budget: offset {offset} in a block of {} sub-rounds",
            self.protocol.as_str(),
            block.len
        );
        self.ledger.push(LedgerEntry {
            t: self.t,
            round: block.base + offset,
            protocol: self.protocol,
            origin,
            kind,
            payload,
            value,
        });
    }
}

/// Owns the mutable state of one run: randomness and the message ledger.
/// A run is strictly sequential; concurrency only exists across runs.
pub struct Simulation<'t> {
    trace: &'t StreamTrace,
    params: LogParams,
    rng: RngContext,
    ledger: MessageLedger,
    current_t: u32,
    next_round: u32,
}

impl<'t> Simulation<'t> {
    pub fn new(trace: &'t StreamTrace, master_seed: u64) -> Self {
        Self {
            trace,
            params: LogParams::for_nodes(trace.n()),
            rng: RngContext::new(master_seed, trace.n()),
            ledger: MessageLedger::new(),
            current_t: 0,
            next_round: 0,
        }
    }

    pub fn params(&self) -> LogParams {
        self.params
    }

    pub fn trace(&self) -> &'t StreamTrace {
        self.trace
    }

    pub fn ledger(&self) -> &MessageLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> MessageLedger {
        self.ledger
    }

    /// Runs a closure inside the round-allocation scope of step `t`.
    /// Scopes opened for the same `t` share the step's sub-round space.
    pub fn step_scope<R>(
        &mut self,
        t: u32,
        protocol: ProtocolId,
        f: impl FnOnce(&mut StepCtx<'_>) -> R,
    ) -> R {
        assert!(
            t >= 1 && t <= self.trace.steps(),
            "step {t} outside 1..={}",
            self.trace.steps()
        );
        if t != self.current_t {
            self.current_t = t;
            self.next_round = 0;
        }
        let mut ctx = StepCtx {
            trace: self.trace,
            t,
            params: self.params,
            protocol,
            rng: &mut self.rng,
            ledger: &mut self.ledger,
            next_round: &mut self.next_round,
        };
        f(&mut ctx)
    }

    /// Executes every protocol's sub-round schedule for step `t` and returns
    /// their outputs in protocol order.
    pub fn run_step(&mut self, t: u32, protocols: &mut [&mut dyn Protocol]) -> Vec<StepOutput> {
        protocols
            .iter_mut()
            .map(|p| {
                let id = p.id();
                self.step_scope(t, id, |ctx| p.step(ctx))
            })
            .collect()
    }

    /// Runs all steps of the trace; `outputs[t - 1]` holds step `t`'s outputs.
    pub fn run_all(&mut self, protocols: &mut [&mut dyn Protocol]) -> Vec<Vec<StepOutput>> {
        (1..=self.trace.steps())
            .map(|t| self.run_step(t, protocols))
            .collect()
    }
}
