//! Discrete-time simulator and statistical verification harness for
//! broadcast-based continuous distributed monitoring.
//!
//! The model: `n` nodes each observe one value from `1..=delta` per time
//! step; a server must know, at every step, a function of the currently
//! observed values. Nodes and server communicate between steps in a
//! polylogarithmic number of sub-rounds; node messages and server broadcasts
//! both cost one unit, and every message lands in a ledger for exact
//! accounting.
//!
//! Three protocol families are implemented on top of the shared execution
//! model ([`sim`]):
//!
//! * [`domain`] — exact tracking of the set of observed values, with a live
//!   representative node per value, paying only for churn via max-height
//!   broadcast races.
//! * [`frequency`] — randomized estimation of how many nodes observe each
//!   value, with single-shot and churn-tracking continuous variants.
//! * [`countdistinct`] — estimation of the number of distinct observed
//!   values using shared (public coin) randomness.
//!
//! [`oracle`] computes exact reference values from the trace, [`workload`]
//! generates test traces, and [`experiment`] runs seeded Monte-Carlo trials
//! that check the accuracy and message-cost guarantees empirically.

pub mod countdistinct;
pub mod domain;
pub mod experiment;
pub mod frequency;
pub mod oracle;
pub mod sim;
pub mod workload;

pub use sim::{MessageLedger, ProtocolId, Simulation, StreamTrace};
