//! Command-line front end: trace generation, protocol runs with report
//! output, and exact oracle reports.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser};

use contmon::countdistinct::{cd_estimates_to_csv, run_count_distinct, CdMode};
use contmon::domain::{run_domain_monitoring, snapshots_to_csv};
use contmon::experiment::{run_experiment, ExperimentConfig};
use contmon::frequency::{estimates_to_csv, run_frequency_monitoring, FreqMode};
use contmon::oracle::OracleReport;
use contmon::sim::ProtocolId;
use contmon::workload::{generate, WorkloadKind, WorkloadSpec};
use contmon::StreamTrace;

#[derive(Parser)]
#[command(
    name = "contmon",
    about = "Simulator for broadcast-based continuous monitoring protocols",
    version
)]
enum Cli {
    /// Generate a synthetic trace file.
    Generate(GenerateArgs),
    /// Run a protocol for one or more seeded trials and write a JSON report.
    Run(RunArgs),
    /// Compute the exact reference values of a trace.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Workload kind: static | adversarial-disjoint | sigma-similar.
    #[arg(long)]
    kind: String,
    /// Number of nodes.
    #[arg(long)]
    n: u32,
    /// Number of time steps.
    #[arg(long = "T")]
    steps: u32,
    /// Alphabet size.
    #[arg(long)]
    delta: u32,
    /// Per-step churn target (sigma-similar only).
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output trace file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// One of: domain | freq-step | freq-cont | cd-step | cd-cont | propagate-max.
    #[arg(long)]
    protocol: String,
    /// Trace file to run on (alternative to --workload).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Inline workload spec, e.g. `sigma-similar:n=1000,T=100,delta=10,sigma=0.1,seed=3`.
    #[arg(long)]
    workload: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Number of independent trials.
    #[arg(long, default_value_t = 1)]
    trials: u32,
    /// Master seed; per-trial seeds are derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report output file (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Target value for propagate-max (whole domain when omitted).
    #[arg(long)]
    value: Option<u32>,
    /// Regenerate the workload trace with a fresh seed per trial.
    #[arg(long)]
    fresh_trace_per_trial: bool,
    /// Write the message ledger CSV of a single-trial run.
    #[arg(long)]
    ledger_out: Option<PathBuf>,
    /// Write the domain snapshot CSV of a single-trial domain run.
    #[arg(long)]
    snapshots_out: Option<PathBuf>,
    /// Write the estimate CSV of a single-trial estimator run.
    #[arg(long)]
    estimates_out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Output JSON file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_kind(kind: &str) -> Result<WorkloadKind> {
    match kind {
        "static" => Ok(WorkloadKind::Static),
        "adversarial-disjoint" => Ok(WorkloadKind::AdversarialDisjoint),
        "sigma-similar" => Ok(WorkloadKind::SigmaSimilar),
        other => bail!("unknown workload kind `{other}` (expected static, adversarial-disjoint or sigma-similar)"),
    }
}

fn parse_protocol(name: &str) -> Result<ProtocolId> {
    match name {
        "domain" => Ok(ProtocolId::DomainMonitor),
        "freq-step" => Ok(ProtocolId::FreqPerStep),
        "freq-cont" => Ok(ProtocolId::FreqContinuous),
        "cd-step" => Ok(ProtocolId::CdPerStep),
        "cd-cont" => Ok(ProtocolId::CdContinuous),
        "propagate-max" => Ok(ProtocolId::PropagateMax),
        other => bail!("unknown protocol `{other}` (expected domain, freq-step, freq-cont, cd-step, cd-cont or propagate-max)"),
    }
}

/// Parses `kind:key=value,...` workload specs.
fn parse_workload(spec: &str) -> Result<WorkloadSpec> {
    let (kind_str, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let kind = parse_kind(kind_str)?;
    let mut n = None;
    let mut steps = None;
    let mut delta = None;
    let mut sigma = None;
    let mut seed = 0u64;
    for field in rest.split(',').filter(|f| !f.is_empty()) {
        let (key, value) = field
            .split_once('=')
            .with_context(|| format!("workload field `{field}` is not key=value"))?;
        match key {
            "n" => n = Some(value.parse().context("bad n")?),
            "T" | "t" => steps = Some(value.parse().context("bad T")?),
            "delta" => delta = Some(value.parse().context("bad delta")?),
            "sigma" => sigma = Some(value.parse().context("bad sigma")?),
            "seed" => seed = value.parse().context("bad seed")?,
            other => bail!("unknown workload field `{other}`"),
        }
    }
    Ok(WorkloadSpec {
        kind,
        nodes: n.context("workload spec needs n=")?,
        steps: steps.context("workload spec needs T=")?,
        delta: delta.context("workload spec needs delta=")?,
        sigma,
        seed,
    })
}

fn write_or_print(path: &Option<PathBuf>, content: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, content).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let spec = WorkloadSpec {
        kind: parse_kind(&args.kind)?,
        nodes: args.n,
        steps: args.steps,
        delta: args.delta,
        sigma: args.sigma,
        seed: args.seed,
    };
    let trace = generate(&spec)?;
    fs::write(&args.out, trace.to_text())
        .with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let protocol = parse_protocol(&args.protocol)?;
    let trace = match &args.trace {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(StreamTrace::parse(&text)?)
        }
        None => None,
    };
    let workload = args.workload.as_deref().map(parse_workload).transpose()?;
    if trace.is_some() && workload.is_some() {
        bail!("--trace and --workload are mutually exclusive");
    }

    let wants_detail =
        args.ledger_out.is_some() || args.snapshots_out.is_some() || args.estimates_out.is_some();
    if wants_detail && args.trials != 1 {
        bail!("--ledger-out/--snapshots-out/--estimates-out need --trials 1");
    }

    let config = ExperimentConfig {
        protocol,
        workload,
        trace_label: args.trace.as_ref().map(|p| p.display().to_string()),
        epsilon: args.epsilon,
        delta: args.delta,
        trials: args.trials,
        master_seed: args.seed,
        fresh_trace_per_trial: args.fresh_trace_per_trial,
        target_value: args.value,
    };
    let report = run_experiment(&config, trace.as_ref())?;
    write_or_print(&args.report, &(report.to_json() + "\n"))?;

    if wants_detail {
        let resolved = match (&trace, &config.workload) {
            (Some(t), _) => t.clone(),
            (None, Some(spec)) => generate(spec)?,
            _ => unreachable!("run_experiment validated the trace source"),
        };
        let seed = contmon::sim::derive_seed(config.master_seed, 0);
        match protocol {
            ProtocolId::DomainMonitor => {
                let run = run_domain_monitoring(&resolved, seed);
                if let Some(p) = &args.snapshots_out {
                    fs::write(p, snapshots_to_csv(&run.snapshots))?;
                }
                if let Some(p) = &args.ledger_out {
                    fs::write(p, run.ledger.to_csv())?;
                }
            }
            ProtocolId::FreqPerStep | ProtocolId::FreqContinuous => {
                let mode = if protocol == ProtocolId::FreqPerStep {
                    FreqMode::PerStep
                } else {
                    FreqMode::Continuous
                };
                let run = run_frequency_monitoring(
                    &resolved,
                    seed,
                    args.epsilon.unwrap_or(0.1),
                    args.delta.unwrap_or(0.1),
                    mode,
                );
                if let Some(p) = &args.estimates_out {
                    fs::write(p, estimates_to_csv(&run.per_step))?;
                }
                if let Some(p) = &args.ledger_out {
                    fs::write(p, run.ledger.to_csv())?;
                }
            }
            ProtocolId::CdPerStep | ProtocolId::CdContinuous => {
                let mode = if protocol == ProtocolId::CdPerStep {
                    CdMode::PerStep
                } else {
                    CdMode::Continuous
                };
                let run = run_count_distinct(
                    &resolved,
                    seed,
                    args.epsilon.unwrap_or(0.1),
                    args.delta.unwrap_or(0.1),
                    mode,
                );
                if let Some(p) = &args.estimates_out {
                    fs::write(p, cd_estimates_to_csv(&run.per_step))?;
                }
                if let Some(p) = &args.ledger_out {
                    fs::write(p, run.ledger.to_csv())?;
                }
            }
            ProtocolId::PropagateMax => {
                if args.snapshots_out.is_some() || args.estimates_out.is_some() {
                    bail!("propagate-max runs only support --ledger-out");
                }
                let mut sim = contmon::Simulation::new(&resolved, seed);
                let mut probe = contmon::domain::PropagateMaxProbe { value: args.value };
                let mut protocols: Vec<&mut dyn contmon::sim::Protocol> = vec![&mut probe];
                sim.run_all(&mut protocols);
                if let Some(p) = &args.ledger_out {
                    fs::write(p, sim.into_ledger().to_csv())?;
                }
            }
        }
    }
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<()> {
    let text = fs::read_to_string(&args.trace)
        .with_context(|| format!("reading {}", args.trace.display()))?;
    let trace = StreamTrace::parse(&text)?;
    let report = OracleReport::compute(&trace);
    write_or_print(&args.out, &(report.to_json() + "\n"))
}

fn main() {
    let result = match Cli::parse() {
        Cli::Generate(args) => cmd_generate(args),
        Cli::Run(args) => cmd_run(args),
        Cli::Oracle(args) => cmd_oracle(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
