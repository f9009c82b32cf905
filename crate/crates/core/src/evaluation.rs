//! Confusion matrices, per-class precision/recall/F1, and aggregation of F1
//! over classes and repeated runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::class::{TissueClass, NUM_CLASSES};
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum();
        ratio(diag, self.total())
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize]) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: predicted.len(),
        });
    }
    let mut m = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= NUM_CLASSES || p >= NUM_CLASSES {
            return Err(Error::Input(format!(
                "label pair ({t}, {p}) outside the six classes"
            )));
        }
        m.counts[t][p] += 1;
    }
    Ok(m)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Metrics of a single evaluation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub per_class: [ClassMetrics; NUM_CLASSES],
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Undefined precision, recall, or F1 (zero denominator) is reported as 0.
pub fn f1_scores(m: &ConfusionMatrix) -> RunMetrics {
    let mut per_class = [ClassMetrics::default(); NUM_CLASSES];
    for (c, out) in per_class.iter_mut().enumerate() {
        let tp = m.counts[c][c];
        let precision = ratio(tp, m.col_sum(c));
        let recall = ratio(tp, m.row_sum(c));
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        *out = ClassMetrics {
            precision,
            recall,
            f1,
        };
    }
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / NUM_CLASSES as f64;
    RunMetrics {
        per_class,
        macro_f1,
        accuracy: m.accuracy(),
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    match values {
        [] => return (0.0, 0.0),
        [first, rest @ ..] if rest.iter().all(|v| v == first) => return (*first, 0.0),
        _ => {}
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    /// Per-class metrics averaged over runs.
    pub per_class: [ClassMetrics; NUM_CLASSES],
    /// Mean of the pooled per-class-per-run F1 values.
    pub macro_f1_mean: f64,
    /// Population standard deviation of the same pool.
    pub f1_std: f64,
    /// Population standard deviation of the per-run macro F1 values.
    pub run_macro_std: f64,
    pub run_count: usize,
}

/// Pools the six per-class F1 values of every run. Values are sorted before
/// reduction so the result does not depend on run order.
pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<MetricsReport> {
    if runs.is_empty() {
        return Err(Error::InsufficientData("no runs to aggregate".into()));
    }
    let sorted = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v
    };
    let pool = sorted(
        runs.iter()
            .flat_map(|r| r.per_class.iter().map(|c| c.f1))
            .collect(),
    );
    let (macro_f1_mean, f1_std) = mean_std(&pool);
    let (_, run_macro_std) = mean_std(&sorted(runs.iter().map(|r| r.macro_f1).collect()));
    let mut per_class = [ClassMetrics::default(); NUM_CLASSES];
    for (c, out) in per_class.iter_mut().enumerate() {
        let field = |f: fn(&ClassMetrics) -> f64| {
            mean_std(&sorted(runs.iter().map(|r| f(&r.per_class[c])).collect())).0
        };
        *out = ClassMetrics {
            precision: field(|m| m.precision),
            recall: field(|m| m.recall),
            f1: field(|m| m.f1),
        };
    }
    Ok(MetricsReport {
        per_class,
        macro_f1_mean,
        f1_std,
        run_macro_std,
        run_count: runs.len(),
    })
}

/// One row per (run, class), then `macro,<mean>,<std>` over the pooled F1
/// values and `run_macro,<mean>,<std>` over per-run macro F1.
pub fn metrics_csv(runs: &[RunMetrics]) -> Result<String> {
    let report = aggregate_runs(runs)?;
    let mut out = String::from("run,class,precision,recall,f1\n");
    for (i, r) in runs.iter().enumerate() {
        for (c, m) in TissueClass::ALL.iter().zip(&r.per_class) {
            writeln!(
                out,
                "{i},{c},{:.6},{:.6},{:.6}",
                m.precision, m.recall, m.f1
            )
            .unwrap();
        }
    }
    writeln!(
        out,
        "macro,{:.6},{:.6}",
        report.macro_f1_mean, report.f1_std
    )
    .unwrap();
    let (run_mean, _) = mean_std(&runs.iter().map(|r| r.macro_f1).collect::<Vec<_>>());
    writeln!(out, "run_macro,{:.6},{:.6}", run_mean, report.run_macro_std).unwrap();
    Ok(out)
}

pub fn write_metrics_csv(runs: &[RunMetrics], path: &Path) -> Result<()> {
    fs::write(path, metrics_csv(runs)?).map_err(|e| Error::io(path, e))
}
