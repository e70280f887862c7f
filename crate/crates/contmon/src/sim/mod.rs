//! The execution model: traces, seeded randomness, message accounting and
//! the per-step round scheduler.
//!
//! A run is a sequence of discrete time steps over a fixed [`StreamTrace`].
//! Between two steps the registered protocols execute their sub-round
//! schedules; every message (node or server originated, broadcast or
//! unicast) costs one unit and lands in the [`MessageLedger`] together with
//! its step, sub-round and origin. Message size is not modeled.
//!
//! Everything is deterministic in the master seed: nodes and server draw
//! from private streams fanned out of it, so equal (trace, seed, protocol
//! configuration) gives identical transcripts.

mod engine;
mod ledger;
mod rng;
mod trace;

pub use engine::{Protocol, RoundBlock, Simulation, StepCtx, StepOutput};
pub use ledger::{LedgerEntry, MessageKind, MessageLedger, Origin, PayloadClass, ProtocolId};
pub use rng::{ceil_log2, derive_seed, geometric_height, LogParams, RngContext};
pub use trace::{NodeId, StreamTrace, TraceError, Value};
