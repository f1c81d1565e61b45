//! Exact-match span F1, split aggregation and the paired t-test.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::SpanSet;
use crate::error::{Error, Result};

/// Micro-averaged span scores over a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub true_positives: usize,
    pub predicted_count: usize,
    pub gold_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Report {
    pub fn from_counts(true_positives: usize, predicted_count: usize, gold_count: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(true_positives, predicted_count);
        let recall = ratio(true_positives, gold_count);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        F1Report {
            true_positives,
            predicted_count,
            gold_count,
            precision,
            recall,
            f1,
        }
    }
}

impl fmt::Display for F1Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P={:.4}\tR={:.4}\tF1={:.4}\ttp={}\tpred={}\tgold={}",
            self.precision, self.recall, self.f1, self.true_positives, self.predicted_count, self.gold_count
        )
    }
}

/// A predicted span counts only when both of its boundaries match a gold span.
pub fn exact_match_f1(predicted: &[SpanSet], gold: &[SpanSet]) -> Result<F1Report> {
    if predicted.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predicted sentences vs {} gold sentences",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut tp, mut pred, mut gold_n) = (0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        tp += p.intersection_count(g);
        pred += p.len();
        gold_n += g.len();
    }
    Ok(F1Report::from_counts(tp, pred, gold_n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single split.
    pub sd: f64,
    pub n: usize,
}

impl fmt::Display for SplitSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}±{:.4} (n={})", self.mean, self.sd, self.n)
    }
}

pub fn aggregate_splits(reports: &[F1Report]) -> Result<SplitSummary> {
    let values: Vec<f64> = reports.iter().map(|r| r.f1).collect();
    summarize(&values)
}

pub fn summarize(values: &[f64]) -> Result<SplitSummary> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Validation("no reports to aggregate".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(SplitSummary { mean, sd, n })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: usize,
}

impl TTest {
    pub fn significant_at(&self, alpha: f64) -> bool {
        self.p < alpha
    }
}

/// Paired t-test on `a - b`. Differences with zero variance give `t = 0,
/// p = 1` when they are all zero and `t = ±inf, p = 0` otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Validation("a paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = n - 1;
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / df as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, df }
        } else {
            TTest {
                t: f64::INFINITY.copysign(mean),
                p: 0.0,
                df,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest { t, p, df })
}
