//! Run reports, dual overestimates, SOC trace analysis and heatmap export.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight of the violation term in the dual overestimates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualBoundConfig {
    pub gamma: f64,
}

impl Default for DualBoundConfig {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

impl DualBoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// `gamma * s * violation_sq + l_rho`.
pub fn slr_dual_overestimate(gamma: f64, s: f64, violation_sq: f64, l_rho: f64) -> f64 {
    gamma * s * violation_sq + l_rho
}

/// `gamma * rho * violation_sq + l_rho`.
pub fn admm_dual_overestimate(gamma: f64, rho: f64, violation_sq: f64, l_rho: f64) -> f64 {
    gamma * rho * violation_sq + l_rho
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Slr,
    Admm,
    Baseline,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Slr => "slr",
            Method::Admm => "admm",
            Method::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slr" => Ok(Self::Slr),
            "admm" => Ok(Self::Admm),
            "baseline" => Ok(Self::Baseline),
            other => Err(Error::InvalidConfig(format!(
                "unknown method `{other}` (expected slr, admm or baseline)"
            ))),
        }
    }
}

/// One iteration of either engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    /// Training epochs consumed so far (fractional when an iteration is shorter than an epoch).
    pub epoch: f64,
    /// Mean minibatch loss over the iteration's inner steps.
    pub train_loss: f64,
    /// Augmented Lagrangian at the new `(W, Z)` and the multipliers the iteration started with.
    pub l_rho: f64,
    /// Global `‖W − Z‖_F` after the iteration.
    pub violation: f64,
    pub s: f64,
    pub s_prime: f64,
    pub alpha: Option<f64>,
    pub soc1: bool,
    pub soc2: bool,
    pub qbar_slr: Option<f64>,
    pub qbar_admm: Option<f64>,
    pub hardprune_accuracy: Option<f64>,
    pub wall_time: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SocCondition {
    Soc1,
    Soc2,
}

/// Non-iteration lines of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    /// First line of every run.
    RunStart {
        method: Method,
        seed: u64,
        first_batch_checksum: Option<String>,
    },
    /// A multiplier update applied despite a failing condition.
    SocOverride { k: usize, condition: SocCondition },
    PruneOutcome {
        hardprune_accuracy: f64,
        compression_rate: f64,
        epochs_used: f64,
        popcount: usize,
    },
    /// First check where the hardprune accuracy met the threshold.
    ThresholdReached { k: usize, epoch: f64, accuracy: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReportLine {
    Event(Event),
    Iteration(IterationRecord),
}

/// Ordered log of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub lines: Vec<ReportLine>,
}

impl RunReport {
    pub fn push_event(&mut self, e: Event) {
        self.lines.push(ReportLine::Event(e));
    }

    pub fn push_record(&mut self, r: IterationRecord) {
        self.lines.push(ReportLine::Iteration(r));
    }

    pub fn records(&self) -> impl Iterator<Item = &IterationRecord> {
        self.lines.iter().filter_map(|l| match l {
            ReportLine::Iteration(r) => Some(r),
            ReportLine::Event(_) => None,
        })
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.lines.iter().filter_map(|l| match l {
            ReportLine::Event(e) => Some(e),
            ReportLine::Iteration(_) => None,
        })
    }

    pub fn last_record(&self) -> Option<&IterationRecord> {
        self.records().last()
    }

    /// Line-delimited JSON.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&serde_json::to_string(line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            lines.push(serde_json::from_str(line)?);
        }
        Ok(Self { lines })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut lines = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if !line.trim().is_empty() {
                lines.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { lines })
    }
}

/// True when every failing iteration of each condition is followed by a later
/// iteration where that condition holds.
pub fn soc_recurrence_holds(records: &[IterationRecord]) -> bool {
    let recurs = |flags: Vec<bool>| match flags.iter().rposition(|&f| !f) {
        None => true,
        Some(last_fail) => flags[last_fail + 1..].iter().any(|&f| f),
    };
    recurs(records.iter().map(|r| r.soc1).collect())
        && recurs(records.iter().map(|r| r.soc2).collect())
}

/// Last iteration where either condition failed (0 when none did).
pub fn kappa(records: &[IterationRecord]) -> usize {
    records
        .iter()
        .filter(|r| !(r.soc1 && r.soc2))
        .map(|r| r.k)
        .max()
        .unwrap_or(0)
}

/// Smallest `kappa` such that `slr[k] < admm[k]` for every paired `k > kappa`.
///
/// Records are paired by `k`; `None` when the last paired iteration already
/// violates the ordering or nothing is paired.
pub fn dual_ordering_kappa(slr: &[IterationRecord], admm: &[IterationRecord]) -> Option<usize> {
    let mut pairs: Vec<(usize, f64, f64)> = Vec::new();
    for a in slr {
        if let (Some(q_slr), Some(b)) = (a.qbar_slr, admm.iter().find(|b| b.k == a.k)) {
            if let Some(q_admm) = b.qbar_admm {
                pairs.push((a.k, q_slr, q_admm));
            }
        }
    }
    let (&(last_k, ..), _) = pairs.split_last()?;
    match pairs.iter().rposition(|&(_, s, a)| s >= a) {
        None => Some(pairs[0].0.saturating_sub(1)),
        Some(i) if pairs[i].0 == last_k => None,
        Some(i) => Some(pairs[i].0),
    }
}

/// View a layer as a matrix: `[n] → [1, n]`, `[a, b, ...] → [a, b·...]`.
fn as_matrix(layer: &Tensor) -> (usize, usize) {
    match layer.dims() {
        [n] => (1, *n),
        [rows, rest @ ..] => (*rows, rest.iter().product()),
        [] => (1, 1),
    }
}

/// Whitespace-separated `|w|` grid, one matrix row per line.
pub fn heatmap_text(layer: &Tensor) -> String {
    let (rows, cols) = as_matrix(layer);
    let mut out = String::with_capacity(layer.len() * 8);
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                out.push(' ');
            }
            let v = layer.data()[r * cols + c].abs();
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn export_sparsity_heatmap(layer: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, heatmap_text(layer))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parse a heatmap back into rows of values.
pub fn read_heatmap(path: &Path) -> Result<Vec<Vec<f32>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .map(|line| {
            line.split_whitespace()
                .map(|v| {
                    v.parse::<f32>()
                        .map_err(|_| Error::InvalidTensor(format!("bad heatmap cell `{v}`")))
                })
                .collect()
        })
        .collect()
}
