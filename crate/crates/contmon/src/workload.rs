//! Synthetic trace generators: static columns, per-step disjoint domains
//! (the worst case for any monitor), and bounded-churn traces where a small
//! fraction of each value's observers moves per step.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{sigma_of, Sigma};
use crate::sim::{NodeId, StreamTrace, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    /// Every node keeps its first value forever.
    Static,
    /// Every step observes a fresh block of values, so consecutive domains
    /// are disjoint.
    AdversarialDisjoint,
    /// All of `1..=delta` stays observed; per step each value trades at most
    /// `floor(sigma * |N^v| / 2)` observers with a partner value, keeping
    /// the relative churn of every observer set within the target.
    SigmaSimilar,
}

impl WorkloadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            WorkloadKind::Static => "static",
            WorkloadKind::AdversarialDisjoint => "adversarial-disjoint",
            WorkloadKind::SigmaSimilar => "sigma-similar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub nodes: u32,
    pub steps: u32,
    pub delta: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sigma: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("workload dimensions must be positive (n={nodes}, T={steps}, delta={delta})")]
    EmptyDimension { nodes: u32, steps: u32, delta: u32 },
    #[error("sigma-similar workloads need a sigma target in [0, 1)")]
    MissingSigma,
    #[error("sigma target {0} is outside [0, 1)")]
    BadSigma(f64),
    #[error("sigma only applies to sigma-similar workloads")]
    UnexpectedSigma,
    #[error(
        "sigma-similar workloads need at least one node per value (n={nodes} < delta={delta})"
    )]
    TooFewNodes { nodes: u32, delta: u32 },
    #[error("adversarial-disjoint workloads need delta >= T to keep step domains disjoint (delta={delta}, T={steps})")]
    AlphabetTooSmall { delta: u32, steps: u32 },
    #[error("generated trace violates the sigma target: realized {realized} > {target}")]
    SigmaViolated { realized: f64, target: f64 },
}

/// Generates a trace for the given spec. Generated traces are validated
/// against the spec's own invariants (sigma-similar output is checked
/// against the churn oracle) before being returned.
pub fn generate(spec: &WorkloadSpec) -> Result<StreamTrace, WorkloadError> {
    if spec.nodes == 0 || spec.steps == 0 || spec.delta == 0 {
        return Err(WorkloadError::EmptyDimension {
            nodes: spec.nodes,
            steps: spec.steps,
            delta: spec.delta,
        });
    }
    match spec.kind {
        WorkloadKind::Static => {
            if spec.sigma.is_some() {
                return Err(WorkloadError::UnexpectedSigma);
            }
            Ok(generate_static(spec))
        }
        WorkloadKind::AdversarialDisjoint => {
            if spec.sigma.is_some() {
                return Err(WorkloadError::UnexpectedSigma);
            }
            if spec.delta < spec.steps {
                return Err(WorkloadError::AlphabetTooSmall {
                    delta: spec.delta,
                    steps: spec.steps,
                });
            }
            Ok(generate_disjoint(spec))
        }
        WorkloadKind::SigmaSimilar => {
            let sigma = spec.sigma.ok_or(WorkloadError::MissingSigma)?;
            if !(0.0..1.0).contains(&sigma) {
                return Err(WorkloadError::BadSigma(sigma));
            }
            if spec.nodes < spec.delta {
                return Err(WorkloadError::TooFewNodes {
                    nodes: spec.nodes,
                    delta: spec.delta,
                });
            }
            let trace = generate_sigma_similar(spec, sigma);
            match sigma_of(&trace) {
                Sigma::Bounded(realized) if realized <= sigma => Ok(trace),
                Sigma::Bounded(realized) => Err(WorkloadError::SigmaViolated {
                    realized,
                    target: sigma,
                }),
                Sigma::Unbounded => Err(WorkloadError::SigmaViolated {
                    realized: f64::INFINITY,
                    target: sigma,
                }),
            }
        }
    }
}

fn generate_static(spec: &WorkloadSpec) -> StreamTrace {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let column: Vec<Value> = (0..spec.nodes)
        .map(|_| rng.random_range(1..=spec.delta))
        .collect();
    StreamTrace::from_fn(spec.nodes, spec.steps, spec.delta, |_, i| {
        column[(i - 1) as usize]
    })
    .expect("static trace is well-formed")
}

fn generate_disjoint(spec: &WorkloadSpec) -> StreamTrace {
    // Per-step domain size: as many fresh values per step as the alphabet
    // affords, bounded by the node count.
    let per_step = (spec.delta / spec.steps).min(spec.nodes).max(1);
    StreamTrace::from_fn(spec.nodes, spec.steps, spec.delta, |t, i| {
        (t - 1) * per_step + 1 + (i - 1) % per_step
    })
    .expect("disjoint trace is well-formed")
}

fn generate_sigma_similar(spec: &WorkloadSpec, sigma: f64) -> StreamTrace {
    let n = spec.nodes as usize;
    let delta = spec.delta as usize;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);

    // Balanced start: every value observed, assignment shuffled.
    let mut column: Vec<Value> = (0..n).map(|i| (i % delta) as Value + 1).collect();
    column.shuffle(&mut rng);
    let mut observers: Vec<Vec<NodeId>> = vec![Vec::new(); delta];
    for (i, &v) in column.iter().enumerate() {
        observers[(v - 1) as usize].push(i as NodeId + 1);
    }

    let mut rows: Vec<Value> = Vec::with_capacity(n * spec.steps as usize);
    rows.extend_from_slice(&column);
    let mut values: Vec<Value> = (1..=spec.delta).collect();
    for _ in 2..=spec.steps {
        if delta >= 2 {
            values.shuffle(&mut rng);
            for pair in values.chunks_exact(2) {
                let (a, b) = (pair[0], pair[1]);
                let size_a = observers[(a - 1) as usize].len();
                let size_b = observers[(b - 1) as usize].len();
                // A swap churns each side by 2k observers, so k is capped at
                // sigma * size / 2 to respect the per-value churn ratio.
                let k = ((sigma * size_a.min(size_b) as f64) / 2.0).floor() as usize;
                for _ in 0..k {
                    let ia = rng.random_range(0..observers[(a - 1) as usize].len());
                    let ib = rng.random_range(0..observers[(b - 1) as usize].len());
                    let node_a = observers[(a - 1) as usize].swap_remove(ia);
                    let node_b = observers[(b - 1) as usize].swap_remove(ib);
                    observers[(a - 1) as usize].push(node_b);
                    observers[(b - 1) as usize].push(node_a);
                    column[(node_a - 1) as usize] = b;
                    column[(node_b - 1) as usize] = a;
                }
            }
        }
        rows.extend_from_slice(&column);
    }
    StreamTrace::new(spec.nodes, spec.steps, spec.delta, rows).expect("sigma trace is well-formed")
}
