//! Frequency estimators for the number of nodes observing a value: a
//! constant-factor estimate read off the max-height race, its median
//! amplification, the sampled (epsilon, delta) estimator and the epoch-based
//! continuous variant that only pays for churn between steps.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::propagate_max;
use crate::oracle::{sigma_of, Sigma};
use crate::sim::{
    MessageKind, MessageLedger, NodeId, Origin, PayloadClass, Protocol, ProtocolId, Simulation,
    StepCtx, StepOutput, StreamTrace, Value,
};

/// Number of parallel race instances needed to push the constant-factor
/// failure probability below `delta_prime`: `ceil(22.5 * ln(1/delta'))`.
pub fn amplification_count(delta_prime: f64) -> u32 {
    assert!(
        delta_prime > 0.0 && delta_prime < 1.0,
        "failure parameter must be in (0,1)"
    );
    (((45.0 / 2.0) * (1.0 / delta_prime).ln()).ceil() as u32).max(1)
}

/// The sampling probability broadcast by the server:
/// `min(1, 24 * ln(1/delta') / (epsilon^2 * n_const))`.
pub fn response_probability(epsilon: f64, delta_prime: f64, n_const: u64) -> f64 {
    (24.0 * (1.0 / delta_prime).ln() / (epsilon * epsilon * n_const as f64)).min(1.0)
}

/// Per-value failure budget when estimating all domain values at once.
pub fn per_value_delta(delta: f64, domain_size: usize) -> f64 {
    delta / domain_size as f64
}

/// Constant-factor estimate from a single race: two to the maximum height.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstFactorOutcome {
    pub estimate: u64,
    pub height: u32,
    pub responders: usize,
}

fn observers_of(ctx: &StepCtx<'_>, v: Value) -> Vec<NodeId> {
    (1..=ctx.trace().n())
        .filter(|&i| ctx.value_of(i) == v)
        .collect()
}

/// Races the observers of `v` once and reads the estimate `2^h` off the
/// first response (sub-round `L - h`). `None` when nobody observes `v`.
pub fn const_factor_freq(ctx: &mut StepCtx<'_>, v: Value) -> Option<ConstFactorOutcome> {
    let observers = observers_of(ctx, v);
    let (outcome, _) = propagate_max(ctx, observers, PayloadClass::Response);
    outcome.for_value(v).map(|r| ConstFactorOutcome {
        estimate: 1u64 << r.height,
        height: r.height,
        responders: r.responders.len(),
    })
}

/// Median of `ceil(22.5 * ln(1/delta'))` independent race instances, run in
/// disjoint sub-round blocks with fresh private randomness. For an even
/// number of instances the lower median is taken.
pub fn const_factor_freq_amplified(
    ctx: &mut StepCtx<'_>,
    v: Value,
    delta_prime: f64,
) -> Option<u64> {
    let d = amplification_count(delta_prime);
    let mut estimates = Vec::with_capacity(d as usize);
    for _ in 0..d {
        estimates.push(const_factor_freq(ctx, v)?.estimate);
    }
    estimates.sort_unstable();
    Some(estimates[(estimates.len() - 1) / 2])
}

/// Status markers attached to an emitted estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateFlags {
    /// The estimator found no observer of the value.
    pub absent: bool,
    /// The running count suggests the value lost all observers.
    pub empty: bool,
}

impl EstimateFlags {
    pub fn render(&self) -> String {
        let mut parts = Vec::new();
        if self.absent {
            parts.push("absent");
        }
        if self.empty {
            parts.push("empty");
        }
        parts.join("|")
    }
}

/// One emitted frequency estimate. The estimate is always the accumulated
/// response count divided by the sampling probability, computed in f64; in
/// continuous mode the count is net of departures and can go negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEstimate {
    pub t: u32,
    pub value: Value,
    /// Constant-factor pre-estimate the probability was derived from.
    pub n_const: Option<u64>,
    pub raw_count: i64,
    pub p: f64,
    pub estimate: f64,
    pub epoch: u64,
    pub flags: EstimateFlags,
}

/// Single-shot (epsilon, delta) estimate of the number of observers of `v`:
/// amplified constant-factor estimate with budget `delta/3`, then a
/// broadcast probability `p` and one Bernoulli reply per observer.
pub fn eps_factor_freq(
    ctx: &mut StepCtx<'_>,
    v: Value,
    epsilon: f64,
    delta: f64,
) -> Option<FrequencyEstimate> {
    let delta_prime = delta / 3.0;
    let n_const = const_factor_freq_amplified(ctx, v, delta_prime)?;
    let p = response_probability(epsilon, delta_prime, n_const);

    let announce = ctx.alloc_block(1);
    ctx.record(
        announce,
        0,
        Origin::Server,
        MessageKind::Broadcast,
        PayloadClass::Probability,
        Some(v),
    );

    let replies = ctx.alloc_block(1);
    let mut raw = 0u64;
    for i in observers_of(ctx, v) {
        if ctx.node_rng(i).random_bool(p) {
            raw += 1;
            ctx.record(
                replies,
                0,
                Origin::Node(i),
                MessageKind::Unicast,
                PayloadClass::SampleReply,
                Some(v),
            );
        }
    }
    Some(FrequencyEstimate {
        t: ctx.t(),
        value: v,
        n_const: Some(n_const),
        raw_count: raw as i64,
        p,
        estimate: raw as f64 / p,
        epoch: ctx.t() as u64,
        flags: EstimateFlags::default(),
    })
}

/// Continuous estimator state for one value: an epoch starts with a full
/// estimation fixing the probability `p`; afterwards only nodes that enter
/// or leave the observer set reply (with the same `p`), and the estimate is
/// `(initial + entered - left) / p`. The epoch ends after a fixed number of
/// steps or once the observed churn reaches half the initial count.
#[derive(Debug, Clone)]
struct ContState {
    value: Value,
    epsilon: f64,
    delta: f64,
    epoch_cap: u32,
    epoch: u64,
    started_at: u32,
    raw_initial: u64,
    p: f64,
    n_const: Option<u64>,
    cum_enter: u64,
    cum_leave: u64,
    absent: bool,
    empty: bool,
}

impl ContState {
    fn new(value: Value, epsilon: f64, delta: f64, epoch_cap: u32) -> Self {
        Self {
            value,
            epsilon,
            delta,
            epoch_cap,
            epoch: 0,
            started_at: 0,
            raw_initial: 0,
            p: 1.0,
            n_const: None,
            cum_enter: 0,
            cum_leave: 0,
            absent: false,
            empty: false,
        }
    }

    /// Epoch budget in steps: `ceil(1/delta)`, optionally tightened by a
    /// churn-based cap supplied by the caller.
    fn effective_cap(delta: f64, extra_cap: Option<u32>) -> u32 {
        let base = (1.0 / delta).ceil().min(u32::MAX as f64) as u32;
        extra_cap.map_or(base, |c| c.min(base)).max(1)
    }

    fn start_epoch(&mut self, ctx: &mut StepCtx<'_>) -> FrequencyEstimate {
        self.epoch += 1;
        self.started_at = ctx.t();
        self.cum_enter = 0;
        self.cum_leave = 0;
        self.empty = false;
        // The full estimation runs with a tighter accuracy budget (a third
        // of epsilon) and failure budget delta^2, so that a union bound over
        // the epoch still meets (epsilon, delta) at every step.
        match eps_factor_freq(ctx, self.value, self.epsilon / 3.0, self.delta * self.delta) {
            Some(est) => {
                self.absent = false;
                self.raw_initial = est.raw_count as u64;
                self.p = est.p;
                self.n_const = est.n_const;
                FrequencyEstimate {
                    epoch: self.epoch,
                    ..est
                }
            }
            None => {
                self.absent = true;
                self.raw_initial = 0;
                self.p = 1.0;
                self.n_const = None;
                FrequencyEstimate {
                    t: ctx.t(),
                    value: self.value,
                    n_const: None,
                    raw_count: 0,
                    p: 1.0,
                    estimate: 0.0,
                    epoch: self.epoch,
                    flags: EstimateFlags {
                        absent: true,
                        empty: false,
                    },
                }
            }
        }
    }

    /// Advances one step: either restarts the epoch (budget exhausted,
    /// previous trouble, or churn past the break threshold after receiving
    /// this step's messages) or emits the accumulated estimate.
    fn advance(
        &mut self,
        ctx: &mut StepCtx<'_>,
        leavers: &[NodeId],
        entrants: &[NodeId],
    ) -> FrequencyEstimate {
        let local_step = ctx.t() - self.started_at + 1;
        if self.absent || self.empty || local_step >= self.epoch_cap {
            return self.start_epoch(ctx);
        }

        if !leavers.is_empty() || !entrants.is_empty() {
            let block = ctx.alloc_block(1);
            for &i in leavers {
                if ctx.node_rng(i).random_bool(self.p) {
                    self.cum_leave += 1;
                    ctx.record(
                        block,
                        0,
                        Origin::Node(i),
                        MessageKind::Broadcast,
                        PayloadClass::ChurnLeave,
                        Some(self.value),
                    );
                }
            }
            for &i in entrants {
                if ctx.node_rng(i).random_bool(self.p) {
                    self.cum_enter += 1;
                    ctx.record(
                        block,
                        0,
                        Origin::Node(i),
                        MessageKind::Broadcast,
                        PayloadClass::ChurnEnter,
                        Some(self.value),
                    );
                }
            }
        }

        if 2 * (self.cum_enter + self.cum_leave) >= self.raw_initial {
            return self.start_epoch(ctx);
        }

        let raw_net = self.raw_net();
        if raw_net <= 0 {
            self.empty = true;
        }
        FrequencyEstimate {
            t: ctx.t(),
            value: self.value,
            n_const: self.n_const,
            raw_count: raw_net,
            p: self.p,
            estimate: self.current_estimate(),
            epoch: self.epoch,
            flags: EstimateFlags {
                absent: false,
                empty: self.empty,
            },
        }
    }

    fn raw_net(&self) -> i64 {
        self.raw_initial as i64 + self.cum_enter as i64 - self.cum_leave as i64
    }

    /// The accumulated estimate `(initial + entered - left) / p`.
    fn current_estimate(&self) -> f64 {
        self.raw_net() as f64 / self.p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreqMode {
    /// Re-identify the domain and estimate every value from scratch each step.
    PerStep,
    /// Track the values of the first step with the churn-based estimator.
    Continuous,
}

/// Frequency monitoring over all domain values.
pub struct FreqMonitor {
    mode: FreqMode,
    epsilon: f64,
    delta: f64,
    /// Extra epoch cap for continuous mode, derived from the trace churn.
    epoch_cap: Option<u32>,
    cont: BTreeMap<Value, ContState>,
    started: bool,
}

impl FreqMonitor {
    pub fn new(mode: FreqMode, epsilon: f64, delta: f64) -> Self {
        assert!(epsilon > 0.0 && epsilon < 1.0, "epsilon must be in (0,1)");
        assert!(delta > 0.0 && delta < 1.0, "delta must be in (0,1)");
        Self {
            mode,
            epsilon,
            delta,
            epoch_cap: None,
            cont: BTreeMap::new(),
            started: false,
        }
    }

    /// Sets the churn-derived epoch cap (`ceil(1/(2 sigma))`) used in
    /// continuous mode.
    pub fn with_epoch_cap(mut self, cap: Option<u32>) -> Self {
        self.epoch_cap = cap;
        self
    }

    fn identify_domain(ctx: &mut StepCtx<'_>) -> BTreeSet<Value> {
        let all: Vec<NodeId> = (1..=ctx.trace().n()).collect();
        let (outcome, _) = propagate_max(ctx, all, PayloadClass::Response);
        outcome.responses.iter().map(|r| r.value).collect()
    }

    fn step_impl(&mut self, ctx: &mut StepCtx<'_>) -> Vec<FrequencyEstimate> {
        match self.mode {
            FreqMode::PerStep => {
                let domain = Self::identify_domain(ctx);
                let delta_v = per_value_delta(self.delta, domain.len().max(1));
                domain
                    .iter()
                    .map(|&v| {
                        eps_factor_freq(ctx, v, self.epsilon, delta_v).expect("value observed")
                    })
                    .collect()
            }
            FreqMode::Continuous => {
                if !self.started {
                    self.started = true;
                    let d1 = Self::identify_domain(ctx);
                    let delta_v = per_value_delta(self.delta, d1.len().max(1));
                    let cap = ContState::effective_cap(delta_v, self.epoch_cap);
                    for &v in &d1 {
                        self.cont
                            .insert(v, ContState::new(v, self.epsilon, delta_v, cap));
                    }
                    return self.cont.values_mut().map(|s| s.start_epoch(ctx)).collect();
                }
                let n = ctx.trace().n();
                let mut leavers: BTreeMap<Value, Vec<NodeId>> = BTreeMap::new();
                let mut entrants: BTreeMap<Value, Vec<NodeId>> = BTreeMap::new();
                for i in 1..=n {
                    let now = ctx.value_of(i);
                    let before = ctx.prev_value_of(i).expect("continuous step at t > 1");
                    if now != before {
                        leavers.entry(before).or_default().push(i);
                        entrants.entry(now).or_default().push(i);
                    }
                }
                let empty = Vec::new();
                self.cont
                    .values_mut()
                    .map(|s| {
                        let l = leavers.get(&s.value).unwrap_or(&empty);
                        let e = entrants.get(&s.value).unwrap_or(&empty);
                        s.advance(ctx, l, e)
                    })
                    .collect()
            }
        }
    }
}

impl Protocol for FreqMonitor {
    fn id(&self) -> ProtocolId {
        match self.mode {
            FreqMode::PerStep => ProtocolId::FreqPerStep,
            FreqMode::Continuous => ProtocolId::FreqContinuous,
        }
    }

    fn step(&mut self, ctx: &mut StepCtx<'_>) -> StepOutput {
        StepOutput::Frequencies(self.step_impl(ctx))
    }
}

/// Result of a frequency monitoring run.
#[derive(Debug, Clone)]
pub struct FreqRun {
    /// `per_step[t - 1]` holds the estimates emitted at step `t`.
    pub per_step: Vec<Vec<FrequencyEstimate>>,
    pub ledger: MessageLedger,
    /// Churn bound used to cap continuous epochs, when one was derived.
    pub sigma_used: Option<f64>,
}

/// Runs frequency monitoring over the whole trace. In continuous mode the
/// epoch cap is tightened to `ceil(1/(2 sigma))` using the trace's measured
/// churn bound.
pub fn run_frequency_monitoring(
    trace: &StreamTrace,
    master_seed: u64,
    epsilon: f64,
    delta: f64,
    mode: FreqMode,
) -> FreqRun {
    let (sigma_used, cap) = match mode {
        FreqMode::Continuous => match sigma_of(trace) {
            Sigma::Bounded(s) if s > 0.0 => (
                Some(s),
                Some((1.0 / (2.0 * s)).ceil().min(u32::MAX as f64) as u32),
            ),
            Sigma::Bounded(_) => (Some(0.0), None),
            Sigma::Unbounded => (None, None),
        },
        FreqMode::PerStep => (None, None),
    };
    let mut monitor = FreqMonitor::new(mode, epsilon, delta).with_epoch_cap(cap);
    let id = match mode {
        FreqMode::PerStep => ProtocolId::FreqPerStep,
        FreqMode::Continuous => ProtocolId::FreqContinuous,
    };
    let mut sim = Simulation::new(trace, master_seed);
    let per_step = (1..=trace.steps())
        .map(|t| sim.step_scope(t, id, |ctx| monitor.step_impl(ctx)))
        .collect();
    FreqRun {
        per_step,
        ledger: sim.into_ledger(),
        sigma_used,
    }
}

/// Runs the continuous estimator for a single value over the whole trace.
pub fn run_cont_eps_factor(
    trace: &StreamTrace,
    master_seed: u64,
    value: Value,
    epsilon: f64,
    delta: f64,
    epoch_cap: Option<u32>,
) -> FreqRun {
    let cap = ContState::effective_cap(delta, epoch_cap);
    let mut state = ContState::new(value, epsilon, delta, cap);
    let mut sim = Simulation::new(trace, master_seed);
    let mut per_step = Vec::with_capacity(trace.steps() as usize);
    for t in 1..=trace.steps() {
        let est = sim.step_scope(t, ProtocolId::FreqContinuous, |ctx| {
            if t == 1 {
                state.start_epoch(ctx)
            } else {
                let mut leavers = Vec::new();
                let mut entrants = Vec::new();
                for i in 1..=trace.n() {
                    let before = trace.value(t - 1, i);
                    let now = trace.value(t, i);
                    if before == value && now != value {
                        leavers.push(i);
                    } else if before != value && now == value {
                        entrants.push(i);
                    }
                }
                state.advance(ctx, &leavers, &entrants)
            }
        });
        per_step.push(vec![est]);
    }
    FreqRun {
        per_step,
        ledger: sim.into_ledger(),
        sigma_used: None,
    }
}

/// CSV export with columns `t,value,estimate,raw_count,p,epoch_id,flags`.
pub fn estimates_to_csv(per_step: &[Vec<FrequencyEstimate>]) -> String {
    let mut out = String::from("t,value,estimate,raw_count,p,epoch_id,flags\n");
    for step in per_step {
        for e in step {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.t,
                e.value,
                e.estimate,
                e.raw_count,
                e.p,
                e.epoch,
                e.flags.render()
            ));
        }
    }
    out
}
