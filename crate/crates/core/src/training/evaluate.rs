use super::{maml_inner_step, phase1_evaluate, phase2_assign_rates, TrainError};
use crate::diffengine::{Graph, GraphConfig};
use crate::geodata::{GeoDataset, Region};
use crate::metrics::{metric, MetricMode, TaskReport};
use crate::nets::{MetaRefParams, ModelParams};
use crate::tasks::{SpatialTask, TaskBatches};

fn require_test_region(dataset: &GeoDataset, task: &SpatialTask) -> Result<(), TrainError> {
    for &id in &task.locations {
        match dataset.location(id) {
            Some(l) if l.region == Some(Region::Test) => {}
            _ => return Err(TrainError::NotTestRegion(id)),
        }
    }
    Ok(())
}

/// Few-shot adaptation on a test-region task: per-location losses and
/// metrics on the adaptation samples, rates from the frozen referee under
/// the frozen benchmark and final schedule bounds, then one combined step.
/// Repeated `steps` times. The referee is never modified.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    model: &ModelParams,
    referee: &MetaRefParams,
    dataset: &GeoDataset,
    task: &SpatialTask,
    adaptation: &TaskBatches,
    benchmark: f64,
    bounds: (f64, f64),
    steps: usize,
) -> Result<ModelParams, TrainError> {
    require_test_region(dataset, task)?;
    let mut current = model.clone();
    for _ in 0..steps {
        let mut g = Graph::with_config(GraphConfig { first_order: true, ..GraphConfig::default() });
        let theta = current.load(&mut g);
        let w = referee.load(&mut g);
        let evals = phase1_evaluate(&mut g, current.shape(), &theta, dataset, adaptation, false)?;
        let (_, adapted) = phase2_assign_rates(&mut g, referee.shape(), &w, &theta, &evals, benchmark, bounds)?;
        let tensors = adapted.iter().map(|&v| g.value(v).clone()).collect();
        current = ModelParams::from_tensors(*current.shape(), tensors)?;
    }
    Ok(current)
}

/// How a method adapts to a test task before scoring.
#[derive(Debug, Clone, Copy)]
pub enum Adaptation<'a> {
    /// Direct inference.
    None,
    /// Uniform-rate gradient steps on the pooled adaptation data.
    Maml { beta: f64, steps: usize },
    /// Referee-assigned rates; see [`fine_tune`].
    MetaRef {
        referee: &'a MetaRefParams,
        benchmark: f64,
        bounds: (f64, f64),
        steps: usize,
    },
}

/// Adapts on `split.train` samples, then scores every location on its
/// `split.val` samples with the evaluation metric. The LF benchmark is the
/// metric over the task's pooled evaluation samples.
pub fn evaluate_task(
    method: &str,
    model: &ModelParams,
    adaptation: Adaptation<'_>,
    dataset: &GeoDataset,
    task: &SpatialTask,
    split: &TaskBatches,
) -> Result<TaskReport, TrainError> {
    require_test_region(dataset, task)?;
    let kind = dataset.kind();
    let adapted = match adaptation {
        Adaptation::None => model.clone(),
        Adaptation::Maml { beta, steps } => {
            let (x, y) = dataset.rows(&split.training());
            let mut m = model.clone();
            for _ in 0..steps {
                m = maml_inner_step(&m, kind, &x, &y, beta)?;
            }
            m
        }
        Adaptation::MetaRef { referee, benchmark, bounds, steps } => {
            fine_tune(model, referee, dataset, task, split, benchmark, bounds, steps)?
        }
    };
    let mut qualities = Vec::with_capacity(split.locations.len());
    let mut undefined = false;
    for b in &split.locations {
        let (x, y) = dataset.rows(&b.val);
        let s = metric(kind, &adapted.predict(&x)?, &y, MetricMode::Eval)?;
        undefined |= s.undefined;
        qualities.push(s.value);
    }
    let (x, y) = dataset.rows(&split.validation());
    let pooled = metric(kind, &adapted.predict(&x)?, &y, MetricMode::Eval)?;
    Ok(TaskReport::new(
        task.id,
        method,
        split.locations.iter().map(|b| b.location).collect(),
        qualities,
        pooled.value,
        undefined || pooled.undefined,
    )?)
}
