//! Count-distinct estimation with shared randomness.
//!
//! All nodes hold the same seed, so they read identical bits from one
//! deterministic bitstring and advance a common cursor in lockstep; nodes
//! observing the same value therefore see identical outcomes of their
//! random experiments without exchanging a single message. A per-value
//! public height turns the max-height race into one geometric draw per
//! distinct value (so the winning height estimates the number of distinct
//! values), and a per-value public coin flip thins the domain down to a
//! sample of values whose observers then race as usual.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::domain::{propagate_max, DomainMonitor};
use crate::sim::{
    geometric_height, MessageKind, MessageLedger, Origin, PayloadClass, Protocol, ProtocolId,
    Simulation, StepCtx, StepOutput, StreamTrace, Value,
};

/// A deterministic shared bitstring addressed by absolute bit index.
/// Every party with the same seed reads the same bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublicCoin {
    seed: u64,
}

impl PublicCoin {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    #[inline]
    fn word(&self, k: u64) -> u64 {
        // SplitMix64 output function, used as a counter-based generator.
        let z = self
            .seed
            .wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E3779B97F4A7C15));
        let z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        let z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// The bit at absolute index `j`.
    #[inline]
    pub fn bit(&self, j: u64) -> bool {
        (self.word(j >> 6) >> (j & 63)) & 1 == 1
    }

    /// Up to 64 consecutive bits starting at `start`, packed LSB-first.
    #[inline]
    fn bits(&self, start: u64, len: u32) -> u64 {
        debug_assert!(len <= 64);
        let off = (start & 63) as u32;
        let lo = self.word(start >> 6) >> off;
        let w = if off == 0 {
            lo
        } else {
            lo | self
                .word((start >> 6) + 1)
                .checked_shl(64 - off)
                .unwrap_or(0)
        };
        if len == 64 {
            w
        } else {
            w & ((1u64 << len) - 1)
        }
    }

    /// Length of the zero run at the start of a `len`-bit window.
    #[inline]
    pub fn zeros_run(&self, start: u64, len: u32) -> u32 {
        self.bits(start, len).trailing_zeros().min(len)
    }
}

/// Public height of value `v`: all observers read the `cap` bits at offset
/// `(v - 1) * cap` past the cursor and decode `min(cap, 1 + zero run)`,
/// which has the same pmf as the private capped geometric draw. The full
/// round consumes `delta * cap` bits on every node.
#[inline]
pub fn public_height(coin: &PublicCoin, cursor: u64, v: Value, cap: u32) -> u32 {
    (coin.zeros_run(cursor + (v - 1) as u64 * cap as u64, cap) + 1).min(cap)
}

/// Public coin flip for value `v` with success probability `2^-q`: success
/// iff the `q` bits at offset `(v - 1) * q` past the cursor are all zero.
/// The full round consumes `delta * q` bits on every node.
#[inline]
pub fn public_flip(coin: &PublicCoin, cursor: u64, v: Value, q: u32) -> bool {
    q == 0 || coin.zeros_run(cursor + (v - 1) as u64 * q as u64, q) == q
}

/// Exponent of the power-of-two sampling probability `p = 2^-q`: the largest
/// `q` with `2^q` below `epsilon^2 * d_hat / (24 ln(1/delta'))`, clamped to
/// `[0, 62]` so `p` stays a valid probability.
pub fn sampling_exponent(epsilon: f64, delta_prime: f64, d_hat: u64) -> u32 {
    let inv_target = epsilon * epsilon * d_hat as f64 / (24.0 * (1.0 / delta_prime).ln());
    if inv_target <= 1.0 {
        return 0;
    }
    (inv_target.log2().floor() as u32).min(62)
}

/// Sub-round of a node with public height `h` and private tiebreaker `g` in
/// the count-distinct race: `L^2 - (h - 1) * L - g`. Larger heights race
/// strictly earlier regardless of the tiebreaker.
#[inline]
pub fn race_round_offset(round_space: u32, cap: u32, h: u32, g: u32) -> u32 {
    round_space - (h - 1) * cap - g
}

/// The epoch update formula: `d1 + joins / p - leaves / p`.
#[inline]
pub fn continuous_estimate(d1: f64, p: f64, joins: u64, leaves: u64) -> f64 {
    d1 + (joins as f64 - leaves as f64) / p
}

/// Tally of the public-coin agreement assertion: every pair of nodes
/// observing equal values must compute equal heights and equal flips.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CoinAgreement {
    pub checks: u64,
    pub violations: u64,
}

impl CoinAgreement {
    fn observe(&mut self, groups: &mut BTreeMap<Value, u32>, v: Value, outcome: u32) {
        self.checks += 1;
        match groups.get(&v) {
            Some(&first) if first != outcome => self.violations += 1,
            Some(_) => {}
            None => {
                groups.insert(v, outcome);
            }
        }
    }
}

/// One constant-factor race: `2^h` for the first broadcast height `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CdConstOutcome {
    pub estimate: u64,
    pub height: u32,
    pub responders: usize,
}

/// Single race of the count-distinct constant-factor estimator.
///
/// Every node computes the public height of its value and a private capped
/// geometric tiebreaker `g`, and schedules a broadcast of its height for
/// sub-round `L^2 - (h - 1) * L - g`; the first broadcast suppresses
/// everyone else. Because observers of one value share `h`, the winning
/// height is the maximum public height over the observed values.
pub fn cd_const_factor(
    ctx: &mut StepCtx<'_>,
    coin: &PublicCoin,
    cursor: &mut u64,
    agreement: &mut CoinAgreement,
) -> Option<CdConstOutcome> {
    let cap = ctx.params().height_cap();
    let space = ctx.params().round_space();
    let n = ctx.trace().n();
    let block = ctx.alloc_block(space);

    let mut groups: BTreeMap<Value, u32> = BTreeMap::new();
    let mut best_key = 0u32;
    let mut winners: Vec<(u32, Value, u32)> = Vec::new(); // (node, value, height)
    for i in 1..=n {
        let v = ctx.value_of(i);
        let h = public_height(coin, *cursor, v, cap);
        agreement.observe(&mut groups, v, h);
        let g = geometric_height(ctx.node_rng(i), cap);
        let key = (h - 1) * cap + g;
        if key > best_key {
            best_key = key;
            winners.clear();
            winners.push((i, v, h));
        } else if key == best_key {
            winners.push((i, v, h));
        }
    }
    *cursor += ctx.trace().delta() as u64 * cap as u64;

    let (_, _, height) = *winners.first()?;
    debug_assert!(winners.iter().all(|&(_, _, h)| h == height));
    let g = best_key - (height - 1) * cap;
    let offset = race_round_offset(space, cap, height, g);
    for &(i, v, _) in &winners {
        ctx.record(
            block,
            offset,
            Origin::Node(i),
            MessageKind::Broadcast,
            PayloadClass::Response,
            Some(v),
        );
    }
    Some(CdConstOutcome {
        estimate: 1u64 << height,
        height,
        responders: winners.len(),
    })
}

/// Median of `ceil(22.5 * ln(1/delta'))` independent races, each consuming
/// its own slice of public bits.
pub fn cd_const_factor_amplified(
    ctx: &mut StepCtx<'_>,
    coin: &PublicCoin,
    cursor: &mut u64,
    delta_prime: f64,
    agreement: &mut CoinAgreement,
) -> Option<u64> {
    let d = crate::frequency::amplification_count(delta_prime);
    let mut estimates = Vec::with_capacity(d as usize);
    for _ in 0..d {
        estimates.push(cd_const_factor(ctx, coin, cursor, agreement)?.estimate);
    }
    estimates.sort_unstable();
    Some(estimates[(estimates.len() - 1) / 2])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CdFlags {
    /// No value passed the sampling flip, so the estimate is frozen until
    /// the epoch breaks.
    pub empty_sample: bool,
}

impl CdFlags {
    pub fn render(&self) -> String {
        if self.empty_sample {
            "empty-sample".to_string()
        } else {
            String::new()
        }
    }
}

/// One emitted count-distinct estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDistinctEstimate {
    pub t: u32,
    /// Constant-factor pre-estimate behind the sampling probability.
    pub d_const: Option<u64>,
    pub estimate: f64,
    /// Number of sampled values currently believed to be in the domain.
    pub sample_size: u64,
    pub p: f64,
    pub q: u32,
    pub epoch: u64,
    pub flags: CdFlags,
}

/// Everything a single-shot sampled estimation produces.
pub struct CdEpsOutcome {
    pub estimate: CountDistinctEstimate,
    /// Observed sampled values (the received set).
    pub observed_sample: BTreeSet<Value>,
    /// Cursor position the sampling flips were read from, so the sampled
    /// set over all of `1..=delta` can be re-derived without messages.
    pub flip_cursor: u64,
    pub q: u32,
    pub p: f64,
}

/// Single-shot (epsilon, delta) count-distinct estimate: an amplified
/// constant-factor race (budget `delta/3`) fixes `p = 2^-q`; values whose
/// public flip fails drop out entirely, and the surviving observers race
/// per value so the server receives each sampled domain value once or a few
/// times. The estimate is the number of distinct received values over `p`.
/// No probability broadcast is needed: the winning race heights were public
/// broadcasts, so every node derives the same `q` on its own.
pub fn cd_eps_factor(
    ctx: &mut StepCtx<'_>,
    coin: &PublicCoin,
    cursor: &mut u64,
    epsilon: f64,
    delta: f64,
    agreement: &mut CoinAgreement,
) -> Option<CdEpsOutcome> {
    let delta_prime = delta / 3.0;
    let d_hat = cd_const_factor_amplified(ctx, coin, cursor, delta_prime, agreement)?;
    let q = sampling_exponent(epsilon, delta_prime, d_hat);
    let p = 0.5f64.powi(q as i32);

    let flip_cursor = *cursor;
    let n = ctx.trace().n();
    let mut flip_groups: BTreeMap<Value, u32> = BTreeMap::new();
    let mut survivors = Vec::new();
    for i in 1..=n {
        let v = ctx.value_of(i);
        let success = public_flip(coin, flip_cursor, v, q);
        agreement.observe(&mut flip_groups, v, success as u32);
        if success {
            survivors.push(i);
        }
    }
    *cursor += ctx.trace().delta() as u64 * q as u64;

    let (outcome, _) = propagate_max(ctx, survivors, PayloadClass::Response);
    let observed_sample: BTreeSet<Value> = outcome.responses.iter().map(|r| r.value).collect();
    let estimate = CountDistinctEstimate {
        t: ctx.t(),
        d_const: Some(d_hat),
        estimate: observed_sample.len() as f64 / p,
        sample_size: observed_sample.len() as u64,
        p,
        q,
        epoch: ctx.t() as u64,
        flags: CdFlags {
            empty_sample: observed_sample.is_empty(),
        },
    };
    Some(CdEpsOutcome {
        estimate,
        observed_sample,
        flip_cursor,
        q,
        p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CdMode {
    /// A fresh sampled estimation every step (one shared seed for the run).
    PerStep,
    /// Epochs: estimate once, then watch the sampled values join and leave
    /// the domain and correct the estimate by `1/p` per event.
    Continuous,
}

/// Count-distinct monitoring over the whole trace.
pub struct CdMonitor {
    mode: CdMode,
    epsilon: f64,
    delta: f64,
    coin: Option<PublicCoin>,
    cursor: u64,
    agreement: CoinAgreement,
    // Continuous-mode epoch state.
    epoch: u64,
    started_at: u32,
    epoch_cap: u32,
    d1: f64,
    p: f64,
    q: u32,
    sample_initial: u64,
    cum_join: u64,
    cum_leave: u64,
    empty_sample: bool,
    monitor: Option<DomainMonitor>,
    tracked_domain: BTreeSet<Value>,
}

impl CdMonitor {
    pub fn new(mode: CdMode, epsilon: f64, delta: f64) -> Self {
        assert!(epsilon > 0.0 && epsilon < 1.0, "epsilon must be in (0,1)");
        assert!(delta > 0.0 && delta < 1.0, "delta must be in (0,1)");
        let epoch_cap = ((1.0 / delta).ceil().min(u32::MAX as f64) as u32).max(1);
        Self {
            mode,
            epsilon,
            delta,
            coin: None,
            cursor: 0,
            agreement: CoinAgreement::default(),
            epoch: 0,
            started_at: 0,
            epoch_cap,
            d1: 0.0,
            p: 1.0,
            q: 0,
            sample_initial: 0,
            cum_join: 0,
            cum_leave: 0,
            empty_sample: false,
            monitor: None,
            tracked_domain: BTreeSet::new(),
        }
    }

    pub fn agreement(&self) -> CoinAgreement {
        self.agreement
    }

    fn broadcast_seed(&mut self, ctx: &mut StepCtx<'_>) {
        let seed = ctx.server_rng().next_u64();
        let block = ctx.alloc_block(1);
        ctx.record(
            block,
            0,
            Origin::Server,
            MessageKind::Broadcast,
            PayloadClass::Seed,
            None,
        );
        self.coin = Some(PublicCoin::new(seed));
        self.cursor = 0;
    }

    fn start_epoch(&mut self, ctx: &mut StepCtx<'_>) -> CountDistinctEstimate {
        self.epoch += 1;
        self.started_at = ctx.t();
        self.cum_join = 0;
        self.cum_leave = 0;
        self.broadcast_seed(ctx);
        let coin = self.coin.expect("seed broadcast");

        // The epoch-start estimation runs with failure budget 2 * delta^2 so
        // the per-step union bound over the epoch still gives delta. For
        // delta >= 1/2 the tightening is vacuous; cap at delta to keep the
        // budget a probability.
        let eps_delta = (2.0 * self.delta * self.delta).min(self.delta);
        let mut cursor = self.cursor;
        let out = cd_eps_factor(
            ctx,
            &coin,
            &mut cursor,
            self.epsilon,
            eps_delta,
            &mut self.agreement,
        )
        .expect("every node observes a value");
        self.cursor = cursor;
        self.d1 = out.estimate.estimate;
        self.p = out.p;
        self.q = out.q;
        self.sample_initial = out.estimate.sample_size;
        self.empty_sample = out.observed_sample.is_empty();

        // The sampled values run the domain monitor so joins and leaves of
        // the sampled domain are detected exactly. With q = 0 every value is
        // sampled and no filter is needed.
        let mut monitor = if out.q == 0 {
            DomainMonitor::new()
        } else {
            let delta_values = ctx.trace().delta();
            let sampled: BTreeSet<Value> = (1..=delta_values)
                .filter(|&v| public_flip(&coin, out.flip_cursor, v, out.q))
                .collect();
            DomainMonitor::with_tracked(sampled)
        };
        let snap = monitor.advance(ctx);
        self.tracked_domain = snap.domain;
        self.monitor = Some(monitor);

        CountDistinctEstimate {
            epoch: self.epoch,
            flags: CdFlags {
                empty_sample: self.empty_sample,
            },
            ..out.estimate
        }
    }

    fn continuous_step(&mut self, ctx: &mut StepCtx<'_>) -> CountDistinctEstimate {
        if self.epoch == 0 || ctx.t() - self.started_at + 1 >= self.epoch_cap {
            return self.start_epoch(ctx);
        }
        let monitor = self.monitor.as_mut().expect("epoch running");
        let snap = monitor.advance(ctx);
        let joins = snap.domain.difference(&self.tracked_domain).count() as u64;
        let leaves = self.tracked_domain.difference(&snap.domain).count() as u64;
        self.cum_join += joins;
        self.cum_leave += leaves;
        self.tracked_domain = snap.domain;

        // Churn break. An epoch with an empty sample never sees churn and is
        // carried (flagged) until the time break instead of thrashing.
        let churn = self.cum_join + self.cum_leave;
        if churn > 0 && 2 * churn >= self.sample_initial {
            return self.start_epoch(ctx);
        }
        CountDistinctEstimate {
            t: ctx.t(),
            d_const: None,
            estimate: continuous_estimate(self.d1, self.p, self.cum_join, self.cum_leave),
            sample_size: self.tracked_domain.len() as u64,
            p: self.p,
            q: self.q,
            epoch: self.epoch,
            flags: CdFlags {
                empty_sample: self.empty_sample,
            },
        }
    }

    fn step_impl(&mut self, ctx: &mut StepCtx<'_>) -> CountDistinctEstimate {
        match self.mode {
            CdMode::PerStep => {
                if self.coin.is_none() {
                    self.broadcast_seed(ctx);
                }
                let coin = self.coin.expect("seeded");
                let mut cursor = self.cursor;
                let out = cd_eps_factor(
                    ctx,
                    &coin,
                    &mut cursor,
                    self.epsilon,
                    self.delta,
                    &mut self.agreement,
                )
                .expect("every node observes a value");
                self.cursor = cursor;
                out.estimate
            }
            CdMode::Continuous => self.continuous_step(ctx),
        }
    }
}

impl Protocol for CdMonitor {
    fn id(&self) -> ProtocolId {
        match self.mode {
            CdMode::PerStep => ProtocolId::CdPerStep,
            CdMode::Continuous => ProtocolId::CdContinuous,
        }
    }

    fn step(&mut self, ctx: &mut StepCtx<'_>) -> StepOutput {
        StepOutput::CountDistinct(self.step_impl(ctx))
    }
}

/// Result of a count-distinct monitoring run.
#[derive(Debug, Clone)]
pub struct CdRun {
    pub per_step: Vec<CountDistinctEstimate>,
    pub ledger: MessageLedger,
    pub agreement: CoinAgreement,
}

/// Runs count-distinct monitoring over the whole trace.
pub fn run_count_distinct(
    trace: &StreamTrace,
    master_seed: u64,
    epsilon: f64,
    delta: f64,
    mode: CdMode,
) -> CdRun {
    let mut monitor = CdMonitor::new(mode, epsilon, delta);
    let id = match mode {
        CdMode::PerStep => ProtocolId::CdPerStep,
        CdMode::Continuous => ProtocolId::CdContinuous,
    };
    let mut sim = Simulation::new(trace, master_seed);
    let per_step = (1..=trace.steps())
        .map(|t| sim.step_scope(t, id, |ctx| monitor.step_impl(ctx)))
        .collect();
    CdRun {
        per_step,
        ledger: sim.into_ledger(),
        agreement: monitor.agreement(),
    }
}

/// CSV export with columns `t,estimate,sample_size,p,epoch_id,flags`.
pub fn cd_estimates_to_csv(per_step: &[CountDistinctEstimate]) -> String {
    let mut out = String::from("t,estimate,sample_size,p,epoch_id,flags\n");
    for e in per_step {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.t,
            e.estimate,
            e.sample_size,
            e.p,
            e.epoch,
            e.flags.render()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::exact_count_distinct;
    use crate::sim::LogParams;

    #[test]
    fn coin_bits_are_deterministic_and_balanced() {
        let a = PublicCoin::new(123);
        let b = PublicCoin::new(123);
        let mut ones = 0u32;
        for j in 0..10_000u64 {
            assert_eq!(a.bit(j), b.bit(j));
            ones += a.bit(j) as u32;
        }
        let share = ones as f64 / 10_000.0;
        assert!((share - 0.5).abs() < 0.02, "bit share {share}");
        assert_ne!(
            (0..64).map(|j| a.bit(j) as u64).sum::<u64>(),
            (0..64)
                .map(|j| PublicCoin::new(124).bit(j) as u64)
                .sum::<u64>()
        );
    }

    /// The packed-window reader agrees with reading bits one by one.
    #[test]
    fn zeros_run_matches_naive_bit_scan() {
        let coin = PublicCoin::new(987);
        for start in (0..4096u64).step_by(7) {
            for len in [1u32, 3, 10, 31, 63, 64] {
                let mut naive = 0;
                for k in 0..len {
                    if coin.bit(start + k as u64) {
                        break;
                    }
                    naive += 1;
                }
                assert_eq!(coin.zeros_run(start, len), naive, "start {start} len {len}");
            }
        }
    }

    /// A window starting 0,0,1 decodes to height 3 (two zeros then a one).
    #[test]
    fn public_height_decodes_the_zero_run() {
        let cap = 10;
        let mut seen_example = false;
        for seed in 0..2000u64 {
            let coin = PublicCoin::new(seed);
            let h = public_height(&coin, 0, 1, cap);
            let b0 = coin.bit(0);
            let b1 = coin.bit(1);
            let b2 = coin.bit(2);
            if !b0 && !b1 && b2 {
                assert_eq!(h, 3);
                seen_example = true;
            }
            if b0 {
                assert_eq!(h, 1);
            }
        }
        assert!(seen_example, "no seed produced the 0,0,1 prefix");

        // All-zero window saturates at the cap.
        let all_zero = (0..20_000u64)
            .find(|&s| {
                let c = PublicCoin::new(s);
                (0..cap).all(|k| !c.bit(k as u64))
            })
            .expect("some seed opens with ten zeros");
        assert_eq!(public_height(&PublicCoin::new(all_zero), 0, 1, cap), cap);
    }

    #[test]
    fn nodes_with_equal_values_see_equal_outcomes() {
        let coin = PublicCoin::new(5);
        let cursor = 320;
        for v in 1..=50 {
            let h1 = public_height(&coin, cursor, v, 12);
            let h2 = public_height(&coin, cursor, v, 12);
            assert_eq!(h1, h2);
            assert_eq!(
                public_flip(&coin, cursor, v, 3),
                public_flip(&coin, cursor, v, 3)
            );
        }
        assert!(public_flip(&coin, cursor, 1, 0), "q = 0 always succeeds");
    }

    /// The public height has the same pmf as the private capped geometric:
    /// chi-square over 10 bins with 10^6 samples at significance 0.001
    /// (critical value 27.877 at 9 degrees of freedom).
    #[test]
    fn public_height_pmf_chi_square() {
        const SAMPLES: u64 = 1_000_000;
        const CAP: u32 = 10;
        let mut counts = [0u64; CAP as usize];
        for seed in 0..SAMPLES {
            let coin = PublicCoin::new(seed.wrapping_mul(0x9E3779B97F4A7C15) ^ 0xABCD);
            counts[(public_height(&coin, 0, 1, CAP) - 1) as usize] += 1;
        }
        let mut chi2 = 0.0;
        for (k, &c) in counts.iter().enumerate() {
            let p = if (k as u32) < CAP - 1 {
                0.5f64.powi(k as i32 + 1)
            } else {
                2.0 * 0.5f64.powi(CAP as i32)
            };
            let expected = p * SAMPLES as f64;
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        assert!(
            chi2 < 27.877,
            "chi-square statistic {chi2} exceeds 27.877 (df=9, alpha=0.001)"
        );
    }

    #[test]
    fn race_round_offset_formula() {
        // cap 8: height 3 with tiebreaker 2 races in sub-round 64 - 16 - 2 = 46.
        assert_eq!(race_round_offset(64, 8, 3, 2), 46);
        assert_eq!(race_round_offset(64, 8, 8, 8), 0);
        assert_eq!(race_round_offset(64, 8, 1, 1), 63);
    }

    #[test]
    fn continuous_estimate_formula() {
        assert_eq!(continuous_estimate(100.0, 0.25, 3, 1), 108.0);
        assert_eq!(continuous_estimate(10.0, 1.0, 0, 0), 10.0);
    }

    #[test]
    fn sampling_exponent_matches_the_examples() {
        // 0.04 * 4096 / (24 ln 10) = 2.9648 -> q = 1, p = 1/2.
        assert_eq!(sampling_exponent(0.2, 0.1, 4096), 1);
        assert_eq!(
            sampling_exponent(0.25, 0.2 / 3.0, 128),
            0,
            "small estimates keep p = 1"
        );
        assert_eq!(sampling_exponent(0.99, 0.99, 1 << 63), 62, "clamped at 62");
    }

    fn run_const_once(
        trace: &StreamTrace,
        sim_seed: u64,
        coin_seed: u64,
    ) -> (CdConstOutcome, MessageLedger, CoinAgreement) {
        let mut sim = Simulation::new(trace, sim_seed);
        let coin = PublicCoin::new(coin_seed);
        let mut agreement = CoinAgreement::default();
        let mut cursor = 0u64;
        let out = sim
            .step_scope(1, ProtocolId::CdPerStep, |ctx| {
                cd_const_factor(ctx, &coin, &mut cursor, &mut agreement)
            })
            .unwrap();
        (out, sim.into_ledger(), agreement)
    }

    /// With a single observed value the output is two to that value's public
    /// height and only the private-tiebreaker winners broadcast.
    #[test]
    fn const_factor_single_value_collapses_to_one_race() {
        let trace = StreamTrace::from_fn(200, 1, 5, |_, _| 4).unwrap();
        let params = LogParams::for_nodes(200);
        let mut total_msgs = 0usize;
        const TRIALS: u64 = 1000;
        for seed in 0..TRIALS {
            let (out, ledger, agreement) = run_const_once(&trace, seed, seed ^ 0xF00D);
            let coin = PublicCoin::new(seed ^ 0xF00D);
            assert_eq!(
                out.estimate,
                1u64 << public_height(&coin, 0, 4, params.height_cap())
            );
            assert_eq!(agreement.violations, 0);
            assert_eq!(agreement.checks, 200);
            total_msgs += ledger.len();
            // All broadcasts happen in the same sub-round and carry the value.
            let rounds: BTreeSet<u32> = ledger.iter().map(|e| e.round).collect();
            assert_eq!(rounds.len(), 1);
        }
        let mean = total_msgs as f64 / TRIALS as f64;
        assert!(mean < 4.0, "mean messages {mean}");
    }

    /// Broadcast heights always equal the maximum public height among the
    /// observed values, and the recovered tiebreaker stays in range.
    #[test]
    fn const_factor_winners_carry_the_max_height() {
        let trace = StreamTrace::from_fn(96, 1, 16, |_, i| i % 16 + 1).unwrap();
        let params = LogParams::for_nodes(96);
        for seed in 0..300u64 {
            let (out, ledger, _) = run_const_once(&trace, seed, seed.wrapping_mul(31));
            let coin = PublicCoin::new(seed.wrapping_mul(31));
            let max_height = (1..=16)
                .map(|v| public_height(&coin, 0, v, params.height_cap()))
                .max()
                .unwrap();
            assert_eq!(out.height, max_height);
            for e in ledger.iter() {
                let v = e.value.unwrap();
                assert_eq!(public_height(&coin, 0, v, params.height_cap()), max_height);
                let g = params.round_space() - (max_height - 1) * params.height_cap() - e.round;
                assert!(
                    (1..=params.height_cap()).contains(&g),
                    "tiebreaker {g} out of range"
                );
            }
        }
    }

    /// Each distinct value behaves as one geometric draw, so the estimate is
    /// an 8-approximation of the number of distinct values with rate >= 0.7.
    #[test]
    fn const_factor_eight_approximation_rate() {
        let distinct = 256u64;
        let trace = StreamTrace::from_fn(1024, 1, 256, |_, i| (i - 1) % 256 + 1).unwrap();
        let mut hits = 0u32;
        const TRIALS: u32 = 10_000;
        for seed in 0..TRIALS {
            let (out, _, _) = run_const_once(&trace, seed as u64, 0x5EED ^ (seed as u64) << 1);
            if out.estimate >= distinct / 8 && out.estimate <= distinct * 8 {
                hits += 1;
            }
        }
        let rate = hits as f64 / TRIALS as f64;
        assert!(rate >= 0.68, "8-approximation rate {rate}");
    }

    /// In the p = 1 regime the sampled estimator receives every domain value
    /// and is exact.
    #[test]
    fn eps_factor_with_p_one_is_exact() {
        let trace = StreamTrace::from_fn(16, 1, 16, |_, i| i).unwrap();
        let mut sim = Simulation::new(&trace, 3);
        let coin = PublicCoin::new(1234);
        let mut agreement = CoinAgreement::default();
        let mut cursor = 0u64;
        let out = sim
            .step_scope(1, ProtocolId::CdPerStep, |ctx| {
                cd_eps_factor(ctx, &coin, &mut cursor, 0.25, 0.2, &mut agreement)
            })
            .unwrap();
        assert_eq!(out.q, 0);
        assert_eq!(out.p, 1.0);
        assert_eq!(out.estimate.estimate, 16.0);
        assert_eq!(out.estimate.sample_size, 16);
        assert_eq!(out.observed_sample.len(), 16);
        assert_eq!(agreement.violations, 0);
    }

    #[test]
    fn estimate_identity_holds() {
        let trace = StreamTrace::from_fn(128, 1, 64, |_, i| (i - 1) % 64 + 1).unwrap();
        for seed in 0..50u64 {
            let run = run_count_distinct(&trace, seed, 0.25, 0.2, CdMode::PerStep);
            let est = &run.per_step[0];
            assert_eq!(
                est.estimate,
                est.sample_size as f64 / est.p,
                "identity |S|/p"
            );
            assert_eq!(
                est.p,
                0.5f64.powi(est.q as i32),
                "p is an exact power of two"
            );
        }
    }

    /// Large domains push the sampling probability below one: each domain
    /// value participates iff its public flip succeeds, so the received set
    /// is a strict sample and the estimate divides by the exact power of two.
    #[test]
    fn eps_factor_samples_large_domains() {
        let trace = StreamTrace::from_fn(8192, 1, 4096, |_, i| (i - 1) % 4096 + 1).unwrap();
        let mut sim = Simulation::new(&trace, 77);
        let coin = PublicCoin::new(4242);
        let mut agreement = CoinAgreement::default();
        let mut cursor = 0u64;
        let out = sim
            .step_scope(1, ProtocolId::CdPerStep, |ctx| {
                cd_eps_factor(ctx, &coin, &mut cursor, 0.25, 0.2, &mut agreement)
            })
            .unwrap();
        assert!(out.q >= 1, "q = {} should sample", out.q);
        assert_eq!(out.p, 0.5f64.powi(out.q as i32));
        assert_eq!(
            out.estimate.estimate,
            out.estimate.sample_size as f64 / out.p
        );
        assert_eq!(agreement.violations, 0);
        // Every received value's public flip must have succeeded.
        for &v in &out.observed_sample {
            assert!(public_flip(&coin, out.flip_cursor, v, out.q));
        }
        // The sample tracks p |D| closely (5 sigma; deterministic seed).
        let expected = 4096.0 * out.p;
        let sd = (4096.0 * out.p * (1.0 - out.p)).sqrt();
        let diff = (out.estimate.sample_size as f64 - expected).abs();
        assert!(
            diff <= 5.0 * sd,
            "sample size {} vs expected {expected}",
            out.estimate.sample_size
        );
    }

    /// Continuous mode in the sampling regime: estimate corrections between
    /// consecutive steps of one epoch are whole multiples of 1/p.
    #[test]
    fn continuous_sampling_regime_steps_by_inverse_p() {
        // 4096 base values; value 4097 joins the domain at step 3 and the
        // node observing value 1 leaves it at step 4.
        let trace = StreamTrace::from_fn(8192, 6, 4100, |t, i| {
            if i == 1 && t >= 4 {
                2
            } else if i == 2 && t >= 3 {
                4097
            } else {
                (i - 1) % 4096 + 1
            }
        })
        .unwrap();
        let run = run_count_distinct(&trace, 5, 0.25, 0.2, CdMode::Continuous);
        assert!(run.per_step[0].q >= 1, "sampling regime expected");
        assert_eq!(run.agreement.violations, 0);
        for pair in run.per_step.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.epoch != b.epoch {
                continue;
            }
            let stride = (b.estimate - a.estimate) * b.p;
            assert!(
                (stride - stride.round()).abs() < 1e-9,
                "within an epoch the estimate moves by whole 1/p strides, got {stride}"
            );
        }
    }

    #[test]
    fn continuous_static_trace_is_quiet_and_reseeds_per_epoch() {
        let trace = StreamTrace::from_fn(64, 30, 8, |_, i| i % 8 + 1).unwrap();
        let delta = 0.2f64;
        let run = run_count_distinct(&trace, 9, 0.3, delta, CdMode::Continuous);
        let epochs = run.per_step.last().unwrap().epoch;
        assert_eq!(
            run.ledger.count_payload(PayloadClass::Seed) as u64,
            epochs,
            "one seed per epoch"
        );
        let budget = (1.0 / delta).ceil() as u64;
        let mut span = 0u64;
        let mut last = 0u64;
        for (idx, est) in run.per_step.iter().enumerate() {
            let t = idx as u32 + 1;
            assert_eq!(est.estimate, 8.0, "exact under p = 1");
            if est.epoch != last {
                last = est.epoch;
                span = 1;
                assert!(run.ledger.total_at(t) > 0);
            } else {
                span += 1;
                assert_eq!(
                    run.ledger.total_at(t),
                    0,
                    "churn-free step {t} must be silent"
                );
            }
            assert!(span <= budget);
        }
    }

    /// Domain churn of sampled values adjusts the estimate by 1/p per event.
    #[test]
    fn continuous_tracks_domain_changes_exactly_in_p_one_regime() {
        // Value 9 joins the domain at step 3 and value 1 leaves at step 5.
        let trace = StreamTrace::from_fn(40, 6, 10, |t, i| {
            if i == 1 {
                if t >= 5 {
                    2
                } else {
                    1
                }
            } else if i == 2 && t >= 3 {
                9
            } else {
                2 + (i % 6)
            }
        })
        .unwrap();
        let run = run_count_distinct(&trace, 4, 0.3, 0.15, CdMode::Continuous);
        for (idx, est) in run.per_step.iter().enumerate() {
            let truth = exact_count_distinct(&trace, idx as u32 + 1) as f64;
            assert_eq!(est.estimate, truth, "step {}", idx + 1);
        }
    }

    /// An epoch whose sample came up empty is carried (flagged, frozen
    /// estimate) until the time break; the churn break cannot thrash it.
    #[test]
    fn empty_sample_epoch_is_carried_until_the_time_break() {
        let trace = StreamTrace::from_fn(8, 5, 4, |_, i| i % 4 + 1).unwrap();
        let mut sim = Simulation::new(&trace, 2);
        let mut monitor = CdMonitor::new(CdMode::Continuous, 0.3, 0.25);
        sim.step_scope(1, ProtocolId::CdContinuous, |ctx| {
            monitor.step_impl(ctx);
        });
        // Force the empty-sample epoch state an unlucky flip round would give.
        monitor.sample_initial = 0;
        monitor.empty_sample = true;
        monitor.d1 = 0.0;
        monitor.monitor = Some(DomainMonitor::with_tracked(BTreeSet::new()));
        monitor.tracked_domain = BTreeSet::new();
        for t in 2..=3 {
            let est = sim.step_scope(t, ProtocolId::CdContinuous, |ctx| monitor.step_impl(ctx));
            assert_eq!(est.epoch, 1, "carried at step {t}");
            assert!(est.flags.empty_sample);
            assert_eq!(est.estimate, 0.0);
        }
        // ceil(1/0.25) = 4: the time break restarts the epoch at step 4.
        let est = sim.step_scope(4, ProtocolId::CdContinuous, |ctx| monitor.step_impl(ctx));
        assert_eq!(est.epoch, 2);
        assert!(!est.flags.empty_sample, "fresh epoch samples again");
    }

    #[test]
    fn count_distinct_runs_are_deterministic() {
        let trace = StreamTrace::from_fn(48, 8, 6, |t, i| (t * 7 + i) % 6 + 1).unwrap();
        let a = run_count_distinct(&trace, 12, 0.25, 0.2, CdMode::Continuous);
        let b = run_count_distinct(&trace, 12, 0.25, 0.2, CdMode::Continuous);
        assert_eq!(a.per_step, b.per_step);
        assert_eq!(a.ledger, b.ledger);
        assert_eq!(a.agreement, b.agreement);
    }

    #[test]
    fn cd_csv_format() {
        let est = CountDistinctEstimate {
            t: 2,
            d_const: Some(16),
            estimate: 12.0,
            sample_size: 3,
            p: 0.25,
            q: 2,
            epoch: 1,
            flags: CdFlags {
                empty_sample: false,
            },
        };
        let csv = cd_estimates_to_csv(&[est]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("t,estimate,sample_size,p,epoch_id,flags")
        );
        assert_eq!(lines.next(), Some("2,12,3,0.25,1,"));
    }
}
