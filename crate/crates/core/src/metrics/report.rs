use super::{adjusted_fairness, higher_is_better, locational_fairness, mean, MetricError};
use crate::geodata::{LocationId, ProblemKind};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

/// Evaluation of one method on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub task_id: u64,
    pub method: String,
    pub locations: Vec<LocationId>,
    /// Per-location quality `p_i`, aligned with `locations`.
    pub qualities: Vec<f64>,
    /// Metric over the task's pooled evaluation data; the LF benchmark.
    pub pooled: f64,
    /// Mean of `qualities`.
    pub quality: f64,
    pub lf: f64,
    pub alf: f64,
    /// `p*` that `alf` was computed against.
    pub reference: f64,
    /// Some location (or the pooled metric) fell back to the undefined-F1 convention.
    pub undefined: bool,
}

impl TaskReport {
    /// Report with ALF provisionally computed around the method's own mean.
    pub fn new(
        task_id: u64,
        method: &str,
        locations: Vec<LocationId>,
        qualities: Vec<f64>,
        pooled: f64,
        undefined: bool,
    ) -> Result<Self, MetricError> {
        if locations.len() != qualities.len() {
            return Err(MetricError::Shape(format!(
                "{} locations with {} qualities",
                locations.len(),
                qualities.len()
            )));
        }
        let lf = locational_fairness(&qualities, pooled)?;
        let quality = mean(&qualities);
        let alf = adjusted_fairness(&qualities, quality)?;
        Ok(Self {
            task_id,
            method: method.to_string(),
            locations,
            qualities,
            pooled,
            quality,
            lf,
            alf,
            reference: quality,
            undefined,
        })
    }

    pub fn set_reference(&mut self, reference: f64) {
        self.reference = reference;
        self.alf = adjusted_fairness(&self.qualities, reference).expect("qualities are non-empty");
    }

    pub fn row(&self) -> ReportRow {
        ReportRow {
            task_id: self.task_id,
            method: self.method.clone(),
            quality: self.quality,
            lf: self.lf,
            alf: self.alf,
        }
    }

    /// Sets each report's `p*` to the best mean quality on its task across all
    /// methods present, then recomputes ALF.
    pub fn assign_references(reports: &mut [TaskReport], kind: ProblemKind) {
        let better = |a: f64, b: f64| if higher_is_better(kind) { a.max(b) } else { a.min(b) };
        let mut best: BTreeMap<u64, f64> = BTreeMap::new();
        for r in reports.iter() {
            best.entry(r.task_id)
                .and_modify(|b| *b = better(*b, r.quality))
                .or_insert(r.quality);
        }
        for r in reports.iter_mut() {
            r.set_reference(best[&r.task_id]);
        }
    }
}

/// One line of a report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub task_id: u64,
    pub method: String,
    pub quality: f64,
    pub lf: f64,
    pub alf: f64,
}

fn io_err(e: impl std::fmt::Display) -> MetricError {
    MetricError::Io(e.to_string())
}

pub fn write_reports_csv<W: Write>(rows: &[ReportRow], writer: W) -> Result<(), MetricError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["task_id", "method", "quality", "LF", "ALF"]).map_err(io_err)?;
    for r in rows {
        w.write_record([
            r.task_id.to_string(),
            r.method.clone(),
            r.quality.to_string(),
            r.lf.to_string(),
            r.alf.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_reports_csv<R: Read>(reader: R) -> Result<Vec<ReportRow>, MetricError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(io_err)?.iter().map(String::from).collect();
    if header != ["task_id", "method", "quality", "LF", "ALF"] {
        return Err(MetricError::Csv {
            line: 1,
            message: format!("expected header task_id,method,quality,LF,ALF, found {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| MetricError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64, MetricError> {
            record[i].parse().map_err(|_| MetricError::Csv {
                line,
                message: format!("column {} value {:?} is not a number", i + 1, &record[i]),
            })
        };
        rows.push(ReportRow {
            task_id: record[0].parse().map_err(|_| MetricError::Csv {
                line,
                message: format!("bad task_id {:?}", &record[0]),
            })?,
            method: record[1].to_string(),
            quality: num(2)?,
            lf: num(3)?,
            alf: num(4)?,
        });
    }
    Ok(rows)
}

/// Pairwise win counts: `counts[r][c]` is the number of tasks on which
/// method `r` scored strictly lower than method `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonMatrix {
    pub methods: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    pub tasks: usize,
}

impl ComparisonMatrix {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), MetricError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["method".to_string()];
        header.extend(self.methods.iter().cloned());
        w.write_record(&header).map_err(io_err)?;
        for (m, row) in self.methods.iter().zip(&self.counts) {
            let mut rec = vec![m.clone()];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }
}

/// Groups rows by method (first-appearance order) and checks that every
/// method covers the same tasks exactly once.
fn by_method(rows: &[ReportRow]) -> Result<Vec<(String, BTreeMap<u64, &ReportRow>)>, MetricError> {
    let mut out: Vec<(String, BTreeMap<u64, &ReportRow>)> = Vec::new();
    for r in rows {
        let pos = match out.iter().position(|(m, _)| *m == r.method) {
            Some(p) => p,
            None => {
                out.push((r.method.clone(), BTreeMap::new()));
                out.len() - 1
            }
        };
        if out[pos].1.insert(r.task_id, r).is_some() {
            return Err(MetricError::TaskMismatch(format!(
                "method {} scored task {} twice",
                r.method, r.task_id
            )));
        }
    }
    if let Some((first, tasks)) = out.first() {
        let reference: BTreeSet<u64> = tasks.keys().copied().collect();
        for (m, t) in &out[1..] {
            let mine: BTreeSet<u64> = t.keys().copied().collect();
            if mine != reference {
                let diff: Vec<_> = mine.symmetric_difference(&reference).take(5).collect();
                return Err(MetricError::TaskMismatch(format!(
                    "{m} and {first} differ on tasks {diff:?}"
                )));
            }
        }
    }
    Ok(out)
}

pub fn comparison_matrix(
    rows: &[ReportRow],
    score: impl Fn(&ReportRow) -> f64,
) -> Result<ComparisonMatrix, MetricError> {
    let grouped = by_method(rows)?;
    let tasks = grouped.first().map_or(0, |(_, t)| t.len());
    let k = grouped.len();
    let mut counts = vec![vec![0; k]; k];
    for (r, (_, a)) in grouped.iter().enumerate() {
        for (c, (_, b)) in grouped.iter().enumerate() {
            counts[r][c] = a
                .iter()
                .filter(|(task, row)| score(row) < score(b[*task]))
                .count();
        }
    }
    Ok(ComparisonMatrix {
        methods: grouped.into_iter().map(|(m, _)| m).collect(),
        counts,
        tasks,
    })
}

/// Per-method means over tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub tasks: usize,
    pub quality: f64,
    pub lf: f64,
    pub alf: f64,
}

impl MethodSummary {
    pub fn write_csv<W: Write>(summaries: &[MethodSummary], writer: W) -> Result<(), MetricError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "tasks", "quality", "LF", "ALF"]).map_err(io_err)?;
        for s in summaries {
            w.write_record([
                s.method.clone(),
                s.tasks.to_string(),
                s.quality.to_string(),
                s.lf.to_string(),
                s.alf.to_string(),
            ])
            .map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }
}

pub fn summarize(rows: &[ReportRow]) -> Result<Vec<MethodSummary>, MetricError> {
    Ok(by_method(rows)?
        .into_iter()
        .map(|(method, tasks)| {
            let col = |f: fn(&ReportRow) -> f64| mean(&tasks.values().map(|r| f(r)).collect::<Vec<_>>());
            MethodSummary {
                tasks: tasks.len(),
                quality: col(|r| r.quality),
                lf: col(|r| r.lf),
                alf: col(|r| r.alf),
                method,
            }
        })
        .collect())
}
