use super::{clip_global_norm, TrainError};
use crate::diffengine::{Graph, GraphConfig, Tensor, Var};
use crate::geodata::{GeoDataset, ProblemKind};
use crate::metrics::loss_graph;
use crate::nets::{ModelParams, ModelShape};
use crate::tasks::TaskBatches;

/// Records `theta - beta * grad L(x, y)` on `g`. The result stays
/// differentiable w.r.t. `theta` unless the graph is in first-order mode.
pub fn maml_inner(
    g: &mut Graph,
    shape: &ModelShape,
    kind: ProblemKind,
    theta: &[Var],
    x: &Tensor,
    y: &[f64],
    beta: f64,
) -> Result<Vec<Var>, TrainError> {
    let xv = g.constant(x.clone());
    let preds = shape.predict(g, theta, xv)?;
    let loss = loss_graph(g, kind, preds, y)?;
    let grads = g.grad(loss, theta)?;
    Ok(theta
        .iter()
        .zip(grads)
        .map(|(&p, d)| {
            let step = g.scale(d, beta);
            g.sub(p, step)
        })
        .collect())
}

/// Value-level inner step.
pub fn maml_inner_step(
    params: &ModelParams,
    kind: ProblemKind,
    x: &Tensor,
    y: &[f64],
    beta: f64,
) -> Result<ModelParams, TrainError> {
    let mut g = Graph::with_config(GraphConfig { first_order: true, ..GraphConfig::default() });
    let theta = params.load(&mut g);
    let updated = maml_inner(&mut g, params.shape(), kind, &theta, x, y, beta)?;
    g.check_finite()?;
    let tensors = updated.iter().map(|&v| g.value(v).clone()).collect();
    Ok(ModelParams::from_tensors(*params.shape(), tensors)?)
}

/// One outer step over a batch of tasks: each task adapts on its pooled
/// training batch, the adapted models are scored on their pooled validation
/// batches, and `theta` moves against the gradient of the summed score.
/// Returns the new parameters, the mean validation loss, and whether
/// clipping fired.
pub fn maml_outer(
    params: &ModelParams,
    dataset: &GeoDataset,
    tasks: &[&TaskBatches],
    beta: f64,
    alpha: f64,
    clip_norm: f64,
    second_order: bool,
) -> Result<(ModelParams, f64, bool), TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::Config("outer step needs at least one task".into()));
    }
    let kind = dataset.kind();
    let shape = *params.shape();
    let mut g = Graph::with_config(GraphConfig { first_order: !second_order, ..GraphConfig::default() });
    let theta = params.load(&mut g);
    let mut total: Option<Var> = None;
    for batches in tasks {
        let (x, y) = dataset.rows(&batches.training());
        let adapted = maml_inner(&mut g, &shape, kind, &theta, &x, &y, beta)?;
        let (xv, yv) = dataset.rows(&batches.validation());
        let xc = g.constant(xv);
        let preds = shape.predict(&mut g, &adapted, xc)?;
        let l = loss_graph(&mut g, kind, preds, &yv)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l),
        });
    }
    let total = total.expect("at least one task");
    g.check_finite()?;
    let mean_loss = g.item(total) / tasks.len() as f64;
    let mut grads = g.gradients(total, &theta)?;
    let clipped = clip_global_norm(&mut grads, clip_norm);
    Ok((params.stepped(&grads, alpha)?, mean_loss, clipped))
}
