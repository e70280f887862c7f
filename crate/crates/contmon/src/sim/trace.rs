use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Node identifier, 1-based.
pub type NodeId = u32;
/// Observed value, drawn from `1..=delta`.
pub type Value = u32;

/// Errors raised while constructing or parsing a trace.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace header must be `n T delta` with positive integers, got `{0}`")]
    BadHeader(String),
    #[error("trace needs {expected} value rows, found {found}")]
    RowCount { expected: u32, found: u32 },
    #[error("row {row}: expected {expected} values, found {found}")]
    RowWidth { row: u32, expected: u32, found: u32 },
    #[error("value {value} at step {t}, node {node} is outside 1..={delta}")]
    ValueOutOfRange {
        t: u32,
        node: NodeId,
        value: u64,
        delta: u32,
    },
    #[error("trace dimensions must be positive (n={n}, T={steps}, delta={delta})")]
    EmptyDimension { n: u32, steps: u32, delta: u32 },
}

/// The full input of a simulation: one value per node per time step.
///
/// Values are stored step-major, so the observations of a single step form a
/// contiguous slice. Steps and nodes are addressed 1-based to match the wire
/// and file formats.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamTrace {
    n: u32,
    steps: u32,
    delta: u32,
    values: Vec<Value>,
}

impl StreamTrace {
    /// Builds a trace from a step-major vector of `steps * n` values.
    pub fn new(n: u32, steps: u32, delta: u32, values: Vec<Value>) -> Result<Self, TraceError> {
        if n == 0 || steps == 0 || delta == 0 {
            return Err(TraceError::EmptyDimension { n, steps, delta });
        }
        if values.len() != (n as usize) * (steps as usize) {
            return Err(TraceError::RowCount {
                expected: steps,
                found: (values.len() / n.max(1) as usize) as u32,
            });
        }
        for (idx, &v) in values.iter().enumerate() {
            if v == 0 || v > delta {
                let t = (idx / n as usize) as u32 + 1;
                let node = (idx % n as usize) as u32 + 1;
                return Err(TraceError::ValueOutOfRange {
                    t,
                    node,
                    value: v as u64,
                    delta,
                });
            }
        }
        Ok(Self {
            n,
            steps,
            delta,
            values,
        })
    }

    /// Builds a trace by evaluating `f(t, node)` for every step and node.
    pub fn from_fn(
        n: u32,
        steps: u32,
        delta: u32,
        mut f: impl FnMut(u32, NodeId) -> Value,
    ) -> Result<Self, TraceError> {
        let mut values = Vec::with_capacity((n as usize) * (steps as usize));
        for t in 1..=steps {
            for i in 1..=n {
                values.push(f(t, i));
            }
        }
        Self::new(n, steps, delta, values)
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn delta(&self) -> u32 {
        self.delta
    }

    /// The value node `i` observes at step `t`.
    #[inline]
    pub fn value(&self, t: u32, i: NodeId) -> Value {
        debug_assert!(t >= 1 && t <= self.steps && i >= 1 && i <= self.n);
        self.values[(t as usize - 1) * self.n as usize + (i as usize - 1)]
    }

    /// All observations of step `t`, indexed by node - 1.
    #[inline]
    pub fn step_values(&self, t: u32) -> &[Value] {
        debug_assert!(t >= 1 && t <= self.steps);
        let base = (t as usize - 1) * self.n as usize;
        &self.values[base..base + self.n as usize]
    }

    /// Parses the line-oriented text format: a `n T delta` header followed by
    /// `T` rows of `n` space-separated values.
    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().unwrap_or("");
        let fields: Vec<&str> = header.split_whitespace().collect();
        let parse_u32 = |s: &str| s.parse::<u32>().ok().filter(|&x| x > 0);
        let (n, steps, delta) = match fields.as_slice() {
            [a, b, c] => match (parse_u32(a), parse_u32(b), parse_u32(c)) {
                (Some(n), Some(t), Some(d)) => (n, t, d),
                _ => return Err(TraceError::BadHeader(header.to_string())),
            },
            _ => return Err(TraceError::BadHeader(header.to_string())),
        };
        let mut values = Vec::with_capacity((n as usize) * (steps as usize));
        let mut rows = 0u32;
        for line in lines {
            rows += 1;
            if rows > steps {
                return Err(TraceError::RowCount {
                    expected: steps,
                    found: rows,
                });
            }
            let mut width = 0u32;
            for tok in line.split_whitespace() {
                width += 1;
                let v: u64 = tok.parse().map_err(|_| TraceError::ValueOutOfRange {
                    t: rows,
                    node: width,
                    value: 0,
                    delta,
                })?;
                if v == 0 || v > delta as u64 {
                    return Err(TraceError::ValueOutOfRange {
                        t: rows,
                        node: width,
                        value: v,
                        delta,
                    });
                }
                values.push(v as Value);
            }
            if width != n {
                return Err(TraceError::RowWidth {
                    row: rows,
                    expected: n,
                    found: width,
                });
            }
        }
        if rows != steps {
            return Err(TraceError::RowCount {
                expected: steps,
                found: rows,
            });
        }
        Self::new(n, steps, delta, values)
    }

    /// Renders the trace in the same text format accepted by [`StreamTrace::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{} {} {}\n", self.n, self.steps, self.delta));
        for t in 1..=self.steps {
            let row: Vec<String> = self.step_values(t).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}
