//! Losses, per-location metrics, locational fairness and method comparison.
//!
//! Predictions are `n x 1` values for regression and `n x C` class
//! probabilities for classification. Class 1 is the positive class for F1.

mod report;

pub use report::{
    comparison_matrix, read_reports_csv, summarize, write_reports_csv, ComparisonMatrix,
    MethodSummary, ReportRow, TaskReport,
};

use crate::diffengine::{Graph, Tensor, Var};
use crate::geodata::ProblemKind;

/// Floor applied to the true-class probability inside cross-entropy.
pub const CE_EPSILON: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("empty batch")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} is not a class of a {classes}-class output")]
    Label { label: f64, classes: usize },
    #[error("methods were scored on different task sets: {0}")]
    TaskMismatch(String),
    #[error("report line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("I/O: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricMode {
    /// Differentiable: soft-F1 for classification, RMSE for regression.
    Surrogate,
    /// Reported: hard F1 for classification, RMSE for regression.
    Eval,
}

/// A metric value plus whether it fell back to a convention (F1 with no
/// positives anywhere).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub undefined: bool,
}

/// Whether larger metric values mean better predictions.
pub fn higher_is_better(kind: ProblemKind) -> bool {
    kind == ProblemKind::Classification
}

fn check(kind: ProblemKind, preds: &Tensor, labels: &[f64]) -> Result<(), MetricError> {
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    if preds.rows() != labels.len() {
        return Err(MetricError::Shape(format!(
            "{} predictions for {} labels",
            preds.rows(),
            labels.len()
        )));
    }
    match kind {
        ProblemKind::Regression if preds.cols() != 1 => Err(MetricError::Shape(format!(
            "regression predictions need 1 column, found {}",
            preds.cols()
        ))),
        ProblemKind::Classification => {
            let classes = preds.cols();
            if classes < 2 {
                return Err(MetricError::Shape("classification needs at least 2 columns".into()));
            }
            match labels
                .iter()
                .find(|&&y| y < 0.0 || y.fract() != 0.0 || y as usize >= classes)
            {
                Some(&label) => Err(MetricError::Label { label, classes }),
                None => Ok(()),
            }
        }
        ProblemKind::Regression => Ok(()),
    }
}

/// Mean cross-entropy (classification) or mean squared error (regression).
pub fn loss(kind: ProblemKind, preds: &Tensor, labels: &[f64]) -> Result<f64, MetricError> {
    check(kind, preds, labels)?;
    let n = labels.len() as f64;
    Ok(match kind {
        ProblemKind::Regression => {
            preds.data().iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n
        }
        ProblemKind::Classification => {
            -labels
                .iter()
                .enumerate()
                .map(|(i, &y)| preds.get(i, y as usize).max(CE_EPSILON).ln())
                .sum::<f64>()
                / n
        }
    })
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> f64 {
    let mse = preds.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / labels.len() as f64;
    mse.sqrt()
}

/// F1 of the positive class from counts; 1 when there are no positives in
/// either labels or predictions.
pub fn f1_from_counts(tp: f64, fp: f64, fn_: f64) -> Score {
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        Score { value: 1.0, undefined: true }
    } else {
        Score { value: 2.0 * tp / denom, undefined: false }
    }
}

/// Index of the largest entry, first one on ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn metric(
    kind: ProblemKind,
    preds: &Tensor,
    labels: &[f64],
    mode: MetricMode,
) -> Result<Score, MetricError> {
    check(kind, preds, labels)?;
    if kind == ProblemKind::Regression {
        return Ok(Score { value: rmse(preds.data(), labels), undefined: false });
    }
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (i, &y) in labels.iter().enumerate() {
        let pos = f64::from(u8::from(y == 1.0));
        let p = match mode {
            MetricMode::Eval => f64::from(u8::from(argmax(preds.row(i)) == 1)),
            MetricMode::Surrogate => preds.get(i, 1),
        };
        tp += p * pos;
        fp += p * (1.0 - pos);
        fn_ += (1.0 - p) * pos;
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

fn label_mask(labels: &[f64], classes: usize) -> Tensor {
    let mut m = Tensor::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        m.data_mut()[i * classes + y as usize] = 1.0;
    }
    m
}

/// [`loss`] recorded on a graph.
pub fn loss_graph(
    g: &mut Graph,
    kind: ProblemKind,
    preds: Var,
    labels: &[f64],
) -> Result<Var, MetricError> {
    check(kind, g.value(preds), labels)?;
    Ok(match kind {
        ProblemKind::Regression => {
            let y = g.constant(Tensor::column(labels));
            let d = g.sub(preds, y);
            let sq = g.square(d);
            g.mean(sq)
        }
        ProblemKind::Classification => {
            let classes = g.shape(preds).1;
            let mask = g.constant(label_mask(labels, classes));
            let picked = g.mul(preds, mask);
            let truth = g.sum_cols(picked);
            let floored = g.clamp_min(truth, CE_EPSILON);
            let logs = g.ln(floored);
            let m = g.mean(logs);
            g.neg(m)
        }
    })
}

/// Surrogate metric recorded on a graph: RMSE or soft-F1 as `1 x 1`.
pub fn surrogate_metric_graph(
    g: &mut Graph,
    kind: ProblemKind,
    preds: Var,
    labels: &[f64],
) -> Result<Var, MetricError> {
    check(kind, g.value(preds), labels)?;
    Ok(match kind {
        ProblemKind::Regression => {
            let y = g.constant(Tensor::column(labels));
            let d = g.sub(preds, y);
            let sq = g.square(d);
            let mse = g.mean(sq);
            g.sqrt(mse)
        }
        ProblemKind::Classification => {
            let pos: Vec<f64> = labels.iter().map(|&y| f64::from(u8::from(y == 1.0))).collect();
            let p1 = g.slice_cols(preds, 1, 1);
            let yv = g.constant(Tensor::column(&pos));
            let tp = g.mul(p1, yv);
            let tp = g.sum(tp);
            let two_tp = g.scale(tp, 2.0);
            let sp = g.sum(p1);
            // 2TP / (2TP + FP + FN) = 2 sum(p y) / (sum p + sum y)
            let denom = g.offset(sp, pos.iter().sum());
            if g.item(denom) == 0.0 {
                g.scalar(1.0)
            } else {
                let inv = g.safe_recip(denom);
                g.mul(two_tp, inv)
            }
        }
    })
}

/// Root-mean-square deviation of per-location metrics from a benchmark.
pub fn locational_fairness(metrics: &[f64], benchmark: f64) -> Result<f64, MetricError> {
    if metrics.is_empty() {
        return Err(MetricError::Empty);
    }
    let ms = metrics.iter().map(|m| (m - benchmark).powi(2)).sum::<f64>() / metrics.len() as f64;
    Ok(ms.sqrt())
}

/// Same formula as [`locational_fairness`] around the best method's mean quality.
pub fn adjusted_fairness(qualities: &[f64], reference: f64) -> Result<f64, MetricError> {
    locational_fairness(qualities, reference)
}

/// [`locational_fairness`] on a graph; each metric is a `1 x 1` var and the
/// benchmark is a constant.
pub fn fairness_graph(g: &mut Graph, metrics: &[Var], benchmark: f64) -> Result<Var, MetricError> {
    let (first, rest) = metrics.split_first().ok_or(MetricError::Empty)?;
    let dev = |g: &mut Graph, m: Var| {
        let d = g.offset(m, -benchmark);
        g.square(d)
    };
    let mut acc = dev(g, *first);
    for &m in rest {
        let sq = dev(g, m);
        acc = g.add(acc, sq);
    }
    let mean = g.scale(acc, 1.0 / metrics.len() as f64);
    Ok(g.sqrt(mean))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn population_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64
}
