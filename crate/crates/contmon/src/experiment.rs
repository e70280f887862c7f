//! Experiment orchestration: many independent seeded trials of one protocol
//! on one workload, aggregated into a machine-readable report.
//!
//! Trials own their trace copy, randomness and ledger, so they run in
//! parallel; aggregation folds the per-trial summaries in trial order, which
//! keeps reports byte-identical across reruns of the same configuration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::countdistinct::{run_count_distinct, CdMode};
use crate::domain::{representative_changes, run_domain_monitoring, PropagateMaxProbe};
use crate::frequency::{run_frequency_monitoring, FreqMode};
use crate::oracle::{exact_count_distinct, exact_domain, exact_frequency, r_star, sigma_of, Sigma};
use crate::sim::{derive_seed, ProtocolId, Simulation, StepOutput, StreamTrace, Value};
use crate::workload::{generate, WorkloadError, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("protocol {0} needs --epsilon and --delta in (0,1)")]
    MissingEpsilonDelta(&'static str),
    #[error("no trace source: provide a workload spec or a trace")]
    MissingTrace,
    #[error("fresh-trace-per-trial requires a workload spec to regenerate from")]
    FreshTraceNeedsWorkload,
    #[error("trial count must be positive")]
    NoTrials,
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub protocol: ProtocolId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub workload: Option<WorkloadSpec>,
    /// Label of an externally provided trace (echoed into the report).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace_label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta: Option<f64>,
    pub trials: u32,
    pub master_seed: u64,
    /// Regenerate the trace with a fresh derived seed for every trial.
    #[serde(default)]
    pub fresh_trace_per_trial: bool,
    /// Target value for the propagate-max probe (whole domain when absent).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_value: Option<Value>,
}

/// Per-trial results folded into the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: u32,
    pub seed: u64,
    pub total_messages: u64,
    pub max_messages_per_step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub estimate_opportunities: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub estimate_failures: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub domain_matches_oracle: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub representative_changes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_star: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_responders: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coin_agreement_checks: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coin_agreement_violations: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_total_messages: f64,
    pub mean_messages_per_step: f64,
    pub max_messages_per_step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure_rate: Option<f64>,
    /// Binomial three-sigma slack for the failure rate at this trial count.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure_slack: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub domain_match_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_responders: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_representative_changes: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_star_total: Option<u32>,
    pub coin_agreement_violations: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// How per-trial seeds derive from the master seed.
    pub seed_scheme: String,
    pub trials: Vec<TrialSummary>,
    pub aggregate: Aggregate,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn needs_epsilon_delta(protocol: ProtocolId) -> bool {
    matches!(
        protocol,
        ProtocolId::FreqPerStep
            | ProtocolId::FreqContinuous
            | ProtocolId::CdPerStep
            | ProtocolId::CdContinuous
    )
}

fn run_trial(
    config: &ExperimentConfig,
    trace: &StreamTrace,
    trial: u32,
    seed: u64,
) -> TrialSummary {
    let steps = trace.steps();
    let mut summary = TrialSummary {
        trial,
        seed,
        total_messages: 0,
        max_messages_per_step: 0,
        estimate_opportunities: None,
        estimate_failures: None,
        domain_matches_oracle: None,
        representative_changes: None,
        r_star: None,
        mean_responders: None,
        coin_agreement_checks: None,
        coin_agreement_violations: None,
    };
    let (epsilon, delta) = (config.epsilon.unwrap_or(0.0), config.delta.unwrap_or(0.0));

    let ledger = match config.protocol {
        ProtocolId::PropagateMax => {
            let mut sim = Simulation::new(trace, seed);
            let mut probe = PropagateMaxProbe {
                value: config.target_value,
            };
            let mut protocols: Vec<&mut dyn crate::sim::Protocol> = vec![&mut probe];
            let outputs = sim.run_all(&mut protocols);
            let mut responders = 0u64;
            let mut races = 0u64;
            for step in &outputs {
                if let StepOutput::Responses(out) = &step[0] {
                    match config.target_value {
                        Some(v) => {
                            responders += out.for_value(v).map_or(0, |r| r.responders.len() as u64);
                            races += 1;
                        }
                        None => {
                            responders += out.total_responders() as u64;
                            races += out.responses.len() as u64;
                        }
                    }
                }
            }
            summary.mean_responders = Some(responders as f64 / races.max(1) as f64);
            sim.into_ledger()
        }
        ProtocolId::DomainMonitor => {
            let run = run_domain_monitoring(trace, seed);
            let mut exact = true;
            for snap in &run.snapshots {
                if snap.domain != exact_domain(trace, snap.t) {
                    exact = false;
                }
                for (&v, &rep) in &snap.representatives {
                    if trace.value(snap.t, rep) != v {
                        exact = false;
                    }
                }
            }
            summary.domain_matches_oracle = Some(exact);
            summary.representative_changes = Some(representative_changes(&run.snapshots));
            summary.r_star = Some(r_star(trace).total);
            run.ledger
        }
        ProtocolId::FreqPerStep | ProtocolId::FreqContinuous => {
            let mode = if config.protocol == ProtocolId::FreqPerStep {
                FreqMode::PerStep
            } else {
                FreqMode::Continuous
            };
            let run = run_frequency_monitoring(trace, seed, epsilon, delta, mode);
            let mut opportunities = 0u64;
            let mut failures = 0u64;
            for step in &run.per_step {
                for est in step {
                    let truth = exact_frequency(trace, est.t, est.value) as f64;
                    opportunities += 1;
                    if (est.estimate - truth).abs() > epsilon * truth {
                        failures += 1;
                    }
                }
            }
            summary.estimate_opportunities = Some(opportunities);
            summary.estimate_failures = Some(failures);
            run.ledger
        }
        ProtocolId::CdPerStep | ProtocolId::CdContinuous => {
            let mode = if config.protocol == ProtocolId::CdPerStep {
                CdMode::PerStep
            } else {
                CdMode::Continuous
            };
            let run = run_count_distinct(trace, seed, epsilon, delta, mode);
            let mut failures = 0u64;
            for est in &run.per_step {
                let truth = exact_count_distinct(trace, est.t) as f64;
                if (est.estimate - truth).abs() > epsilon * truth {
                    failures += 1;
                }
            }
            summary.estimate_opportunities = Some(run.per_step.len() as u64);
            summary.estimate_failures = Some(failures);
            summary.coin_agreement_checks = Some(run.agreement.checks);
            summary.coin_agreement_violations = Some(run.agreement.violations);
            run.ledger
        }
    };

    summary.total_messages = ledger.len() as u64;
    summary.max_messages_per_step = ledger.totals_by_step(steps).into_iter().max().unwrap_or(0);
    summary
}

/// Runs all trials of the configured experiment. An externally loaded trace
/// may be passed in; otherwise the workload spec generates one.
pub fn run_experiment(
    config: &ExperimentConfig,
    provided_trace: Option<&StreamTrace>,
) -> Result<ExperimentReport, ExperimentError> {
    if config.trials == 0 {
        return Err(ExperimentError::NoTrials);
    }
    if needs_epsilon_delta(config.protocol) {
        let ok = |x: Option<f64>| x.is_some_and(|v| v > 0.0 && v < 1.0);
        if !ok(config.epsilon) || !ok(config.delta) {
            return Err(ExperimentError::MissingEpsilonDelta(
                config.protocol.as_str(),
            ));
        }
    }
    if config.fresh_trace_per_trial && config.workload.is_none() {
        return Err(ExperimentError::FreshTraceNeedsWorkload);
    }
    let base_trace = match (provided_trace, &config.workload) {
        (Some(t), _) => Some(t.clone()),
        (None, Some(spec)) => Some(generate(spec)?),
        (None, None) => return Err(ExperimentError::MissingTrace),
    };
    // Pre-validate per-trial workloads before running anything.
    if config.fresh_trace_per_trial {
        let spec = config.workload.as_ref().expect("checked above");
        generate(&WorkloadSpec {
            seed: derive_seed(spec.seed, 0),
            ..spec.clone()
        })?;
    }

    let trials: Vec<TrialSummary> = (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = derive_seed(config.master_seed, trial as u64);
            if config.fresh_trace_per_trial {
                let spec = config.workload.as_ref().expect("checked above");
                let spec = WorkloadSpec {
                    seed: derive_seed(spec.seed, trial as u64),
                    ..spec.clone()
                };
                let trace = generate(&spec).expect("pre-validated workload");
                run_trial(config, &trace, trial, seed)
            } else {
                run_trial(
                    config,
                    base_trace.as_ref().expect("resolved above"),
                    trial,
                    seed,
                )
            }
        })
        .collect();

    let m = trials.len() as f64;
    let steps = base_trace.as_ref().map(|t| t.steps()).unwrap_or(1) as f64;
    let mean_total_messages = trials.iter().map(|t| t.total_messages as f64).sum::<f64>() / m;
    let opportunities: u64 = trials.iter().filter_map(|t| t.estimate_opportunities).sum();
    let failures: u64 = trials.iter().filter_map(|t| t.estimate_failures).sum();
    let failure_rate = if opportunities > 0 {
        Some(failures as f64 / opportunities as f64)
    } else {
        None
    };
    let failure_slack = config
        .delta
        .filter(|_| opportunities > 0)
        .map(|d| 3.0 * (d * (1.0 - d) / opportunities as f64).sqrt());
    let matches: Vec<bool> = trials
        .iter()
        .filter_map(|t| t.domain_matches_oracle)
        .collect();
    let domain_match_rate = if matches.is_empty() {
        None
    } else {
        Some(matches.iter().filter(|&&b| b).count() as f64 / matches.len() as f64)
    };
    let responder_means: Vec<f64> = trials.iter().filter_map(|t| t.mean_responders).collect();
    let mean_responders = if responder_means.is_empty() {
        None
    } else {
        Some(responder_means.iter().sum::<f64>() / responder_means.len() as f64)
    };
    let rep_changes: Vec<u64> = trials
        .iter()
        .filter_map(|t| t.representative_changes)
        .collect();
    let mean_representative_changes = if rep_changes.is_empty() {
        None
    } else {
        Some(rep_changes.iter().sum::<u64>() as f64 / rep_changes.len() as f64)
    };
    let sigma = if config.fresh_trace_per_trial {
        None
    } else {
        base_trace.as_ref().and_then(|t| match sigma_of(t) {
            Sigma::Bounded(s) => Some(s),
            Sigma::Unbounded => None,
        })
    };
    let r_star_total = if config.fresh_trace_per_trial {
        None
    } else {
        base_trace.as_ref().map(|t| r_star(t).total)
    };

    let aggregate = Aggregate {
        mean_total_messages,
        mean_messages_per_step: mean_total_messages / steps,
        max_messages_per_step: trials
            .iter()
            .map(|t| t.max_messages_per_step)
            .max()
            .unwrap_or(0),
        failure_rate,
        failure_slack,
        domain_match_rate,
        mean_responders,
        mean_representative_changes,
        sigma,
        r_star_total,
        coin_agreement_violations: trials
            .iter()
            .filter_map(|t| t.coin_agreement_violations)
            .sum(),
    };

    Ok(ExperimentReport {
        config: config.clone(),
        seed_scheme: "trial i: protocol seed = splitmix64(master_seed, i); fresh traces: workload seed = splitmix64(workload.seed, i)".to_string(),
        trials,
        aggregate,
    })
}
