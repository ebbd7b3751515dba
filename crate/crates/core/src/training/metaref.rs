use super::{clip_global_norm, TrainConfig, TrainError};
use crate::diffengine::{Graph, GraphConfig, Tensor, Var};
use crate::geodata::{GeoDataset, LocationId};
use crate::metrics::{fairness_graph, loss_graph, surrogate_metric_graph};
use crate::nets::{MetaRefParams, ModelParams, ModelShape, RefereeShape};
use crate::tasks::TaskBatches;

/// Phase-1 quantities for one location, recorded on the step's graph.
#[derive(Debug, Clone)]
pub struct LocalEval {
    pub location: LocationId,
    /// Size of the location's training minibatch.
    pub count: usize,
    pub loss: Var,
    /// Surrogate metric `m_i`.
    pub metric: Var,
    /// `grad_theta l_i`, one var per parameter tensor.
    pub grads: Vec<Var>,
    /// Mean embedding of the minibatch, `1 x embedding_dim`.
    pub summary: Var,
}

/// Per-location losses, metrics, gradients and embedding summaries on the
/// training minibatches.
pub fn phase1_evaluate(
    g: &mut Graph,
    shape: &ModelShape,
    theta: &[Var],
    dataset: &GeoDataset,
    batches: &TaskBatches,
    detach_embeddings: bool,
) -> Result<Vec<LocalEval>, TrainError> {
    let kind = dataset.kind();
    batches
        .locations
        .iter()
        .map(|b| {
            if b.train.is_empty() {
                return Err(TrainError::Config(format!(
                    "location {} has an empty training batch",
                    b.location
                )));
            }
            let (x, y) = dataset.rows(&b.train);
            let xv = g.constant(x);
            let (h, preds) = shape.encode_predict(g, theta, xv)?;
            let loss = loss_graph(g, kind, preds, &y)?;
            let metric = surrogate_metric_graph(g, kind, preds, &y)?;
            let grads = g.grad(loss, theta)?;
            let mut summary = g.mean_rows(h);
            if detach_embeddings {
                summary = g.stop_gradient(summary);
            }
            Ok(LocalEval {
                location: b.location,
                count: b.train.len(),
                loss,
                metric,
                grads,
                summary,
            })
        })
        .collect()
}

/// Referee outputs and the rates derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessFactors {
    /// Raw factors `eta_i`.
    pub raw: Vec<f64>,
    /// Factors rescaled to `[0, 1]`; all 0.5 when the raw factors coincide.
    pub standardized: Vec<f64>,
    /// Inner-loop rates `beta_i`.
    pub rates: Vec<f64>,
    /// `(beta_plus, beta_minus)` used.
    pub bounds: (f64, f64),
}

/// Assigns per-location rates and records the temporary update
/// `theta - sum_i beta_i g_i`, differentiable in both `theta` and the referee.
pub fn phase2_assign_rates(
    g: &mut Graph,
    referee: &RefereeShape,
    w: &[Var],
    theta: &[Var],
    evals: &[LocalEval],
    benchmark: f64,
    bounds: (f64, f64),
) -> Result<(FairnessFactors, Vec<Var>), TrainError> {
    if evals.is_empty() {
        return Err(TrainError::Config("task has no locations".into()));
    }
    let (hi, lo) = bounds;
    let etas = evals
        .iter()
        .map(|e| {
            let rel = g.offset(e.metric, -benchmark);
            referee.factor(g, w, e.summary, rel)
        })
        .collect::<Result<Vec<Var>, _>>()?;
    let mut row = etas[0];
    for &e in &etas[1..] {
        row = g.concat_cols(row, e);
    }
    let mn = g.min_all(row);
    let mx = g.max_all(row);
    let degenerate = g.item(mx) == g.item(mn);
    let range = g.sub(mx, mn);
    let gap = hi - lo;
    let mut standardized = Vec::with_capacity(etas.len());
    let mut rates = Vec::with_capacity(etas.len());
    let mut rate_vars = Vec::with_capacity(etas.len());
    for &eta in &etas {
        let s = if degenerate {
            g.scalar(0.5)
        } else {
            let num = g.sub(eta, mn);
            g.div(num, range)
        };
        let scaled = g.scale(s, gap);
        let mut beta = g.offset(scaled, lo);
        // rounding in gap + lo may overshoot the bounds by an ulp
        if g.item(beta) > hi {
            beta = g.scalar(hi);
        } else if g.item(beta) < lo {
            beta = g.scalar(lo);
        }
        standardized.push(g.item(s));
        rates.push(g.item(beta));
        rate_vars.push(beta);
    }
    let updated = theta
        .iter()
        .enumerate()
        .map(|(p, &param)| {
            let mut step: Option<Var> = None;
            for (e, &beta) in evals.iter().zip(&rate_vars) {
                let term = g.scale_by(e.grads[p], beta);
                step = Some(match step {
                    None => term,
                    Some(acc) => g.add(acc, term),
                });
            }
            g.sub(param, step.expect("non-empty task"))
        })
        .collect();
    g.check_finite()?;
    let factors = FairnessFactors {
        raw: etas.iter().map(|&e| g.item(e)).collect(),
        standardized,
        rates,
        bounds,
    };
    Ok((factors, updated))
}

/// Phase-3 gradients, all taken from the same temporary update before any
/// parameter moves. A `None` entry was not requested.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradients {
    /// Validation loss w.r.t. the predictor.
    pub p2p: Option<Vec<Tensor>>,
    /// Fairness loss w.r.t. the referee.
    pub f2m: Option<Vec<Tensor>>,
    /// Fairness loss w.r.t. the predictor.
    pub f2p: Option<Vec<Tensor>>,
    /// Whole-task validation loss.
    pub val_loss: f64,
    /// Fairness loss over per-location validation metrics.
    pub fair_loss: f64,
    pub val_metrics: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn phase3_gradients(
    g: &mut Graph,
    shape: &ModelShape,
    theta: &[Var],
    w: &[Var],
    adapted: &[Var],
    dataset: &GeoDataset,
    batches: &TaskBatches,
    benchmark: f64,
    want: [bool; 3],
) -> Result<MetaGradients, TrainError> {
    let kind = dataset.kind();
    let total: usize = batches.locations.iter().map(|b| b.val.len()).sum();
    if total == 0 {
        return Err(TrainError::Config("task has no validation data".into()));
    }
    let mut val_loss: Option<Var> = None;
    let mut metrics = Vec::with_capacity(batches.locations.len());
    for b in &batches.locations {
        if b.val.is_empty() {
            return Err(TrainError::Config(format!(
                "location {} has an empty validation batch",
                b.location
            )));
        }
        let (x, y) = dataset.rows(&b.val);
        let xv = g.constant(x);
        let preds = shape.predict(g, adapted, xv)?;
        let l = loss_graph(g, kind, preds, &y)?;
        let weighted = g.scale(l, b.val.len() as f64 / total as f64);
        val_loss = Some(match val_loss {
            None => weighted,
            Some(acc) => g.add(acc, weighted),
        });
        metrics.push(surrogate_metric_graph(g, kind, preds, &y)?);
    }
    let val_loss = val_loss.expect("non-empty task");
    let fair = fairness_graph(g, &metrics, benchmark)?;
    g.check_finite()?;
    let [p2p, f2m, f2p] = want;
    Ok(MetaGradients {
        p2p: if p2p { Some(g.gradients(val_loss, theta)?) } else { None },
        f2m: if f2m { Some(g.gradients(fair, w)?) } else { None },
        f2p: if f2p { Some(g.gradients(fair, theta)?) } else { None },
        val_loss: g.item(val_loss),
        fair_loss: g.item(fair),
        val_metrics: metrics.iter().map(|&m| g.item(m)).collect(),
    })
}

/// Applies the requested phase-3 updates in order: predictor by the
/// validation loss, referee by the fairness loss, predictor by the fairness
/// loss. Each update is clipped separately. Returns the number of clips.
pub fn phase3_meta_update(
    model: &ModelParams,
    referee: &MetaRefParams,
    grads: MetaGradients,
    config: &TrainConfig,
) -> Result<(ModelParams, MetaRefParams, usize), TrainError> {
    let mut clips = 0;
    let mut model = model.clone();
    let mut referee = referee.clone();
    if let Some(mut d) = grads.p2p {
        clips += usize::from(clip_global_norm(&mut d, config.clip_norm));
        model = model.stepped(&d, config.alpha1)?;
    }
    if let Some(mut d) = grads.f2m {
        clips += usize::from(clip_global_norm(&mut d, config.clip_norm));
        referee = referee.stepped(&d, config.alpha2())?;
    }
    if let Some(mut d) = grads.f2p {
        clips += usize::from(clip_global_norm(&mut d, config.clip_norm));
        model = model.stepped(&d, config.alpha3())?;
    }
    Ok((model, referee, clips))
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub model: ModelParams,
    pub referee: MetaRefParams,
    pub factors: FairnessFactors,
    pub val_loss: f64,
    pub fair_loss: f64,
    pub clips: usize,
}

/// One full three-phase Meta-Ref step on a task at global counter `t`.
pub fn meta_ref_step(
    model: &ModelParams,
    referee: &MetaRefParams,
    dataset: &GeoDataset,
    batches: &TaskBatches,
    benchmark: f64,
    t: u64,
    config: &TrainConfig,
) -> Result<StepOutcome, TrainError> {
    let mut g = Graph::with_config(GraphConfig {
        first_order: !config.second_order,
        ..GraphConfig::default()
    });
    let theta = model.load(&mut g);
    let w = referee.load(&mut g);
    let shape = model.shape();
    let evals = phase1_evaluate(&mut g, shape, &theta, dataset, batches, config.detach_embeddings)?;
    let bounds = config.schedule().bounds(t);
    let (factors, adapted) =
        phase2_assign_rates(&mut g, referee.shape(), &w, &theta, &evals, benchmark, bounds)?;
    let want = [
        !config.disable_p2p,
        !config.disable_f2m && config.alpha2() > 0.0,
        !config.disable_f2p && config.alpha3() > 0.0,
    ];
    let grads = phase3_gradients(
        &mut g, shape, &theta, &w, &adapted, dataset, batches, benchmark, want,
    )?;
    let (val_loss, fair_loss) = (grads.val_loss, grads.fair_loss);
    let (model, referee, clips) = phase3_meta_update(model, referee, grads, config)?;
    Ok(StepOutcome {
        model,
        referee,
        factors,
        val_loss,
        fair_loss,
        clips,
    })
}
