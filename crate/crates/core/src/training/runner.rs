use super::{
    clip_global_norm, global_metric, maml_outer, meta_ref_step, train_region_samples,
    EpisodeSampler, TrainConfig, TrainError,
};
use crate::diffengine::{Graph, Var};
use crate::geodata::GeoDataset;
use crate::metrics::{locational_fairness, loss, loss_graph, metric, MetricMode};
use crate::nets::{Head, MetaRefParams, ModelParams, ModelShape, RefereeShape};
use crate::tasks::{derive_seed, SpatialTask, TaskConfig};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;

const MODEL_STREAM: u64 = 0;
const REFEREE_STREAM: u64 = 1;
const SUBSAMPLE_STREAM: u64 = 4;

/// One line of the training log. Row 0 describes the initial parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub t: u64,
    /// Loss over the benchmark subsample.
    pub mean_loss: f64,
    /// Mean LF over the held-out training-region tasks.
    pub heldout_lf: f64,
    pub beta_plus: f64,
    pub beta_minus: f64,
}

pub fn write_log_csv<W: Write>(rows: &[LogRow], writer: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| TrainError::Config(format!("writing log: {e}"));
    w.write_record(["epoch", "t", "mean_loss", "heldout_LF", "beta_plus", "beta_minus"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.t.to_string(),
            r.mean_loss.to_string(),
            r.heldout_lf.to_string(),
            r.beta_plus.to_string(),
            r.beta_minus.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| TrainError::Config(format!("writing log: {e}")))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    /// Present for the meta-learning methods.
    pub referee: Option<MetaRefParams>,
    pub log: Vec<LogRow>,
    /// Benchmark of the final model, frozen for fine-tuning.
    pub global_metric: f64,
    /// Tasks processed.
    pub t: u64,
    pub clips: usize,
}

fn model_shape(dataset: &GeoDataset, config: &TrainConfig) -> Result<ModelShape, TrainError> {
    let head = match dataset.kind() {
        crate::geodata::ProblemKind::Regression => Head::Regression,
        crate::geodata::ProblemKind::Classification => {
            let top = dataset.labels().iter().fold(0.0f64, |a, &b| a.max(b)) as usize;
            Head::Classification { classes: (top + 1).max(2) }
        }
    };
    Ok(ModelShape::new(dataset.feature_dim(), config.width, config.depth, head)?)
}

/// Initial predictor and referee for a seed; shared by every method.
pub fn initial_params(dataset: &GeoDataset, config: &TrainConfig) -> Result<(ModelParams, MetaRefParams), TrainError> {
    let shape = model_shape(dataset, config)?;
    let model = ModelParams::init(shape, &mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, MODEL_STREAM)));
    let rshape = RefereeShape::new(shape.embedding_dim(), config.referee_hidden)?;
    let referee =
        MetaRefParams::init(rshape, &mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, REFEREE_STREAM)));
    Ok((model, referee))
}

fn subsample(dataset: &GeoDataset, config: &TrainConfig) -> Vec<usize> {
    let pool = train_region_samples(dataset);
    let k = config.global_subsample.min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SUBSAMPLE_STREAM));
    let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Mean LF over tasks, each location scored on all of its samples without adaptation.
fn heldout_lf(model: &ModelParams, dataset: &GeoDataset, tasks: &[SpatialTask]) -> Result<f64, TrainError> {
    let kind = dataset.kind();
    let mut total = 0.0;
    for task in tasks {
        let mut per_location = Vec::with_capacity(task.locations.len());
        let mut all = Vec::new();
        for &id in &task.locations {
            let loc = dataset.location(id).expect("tasks come from the dataset");
            let (x, y) = dataset.rows(&loc.samples);
            per_location.push(metric(kind, &model.predict(&x)?, &y, MetricMode::Eval)?.value);
            all.extend_from_slice(&loc.samples);
        }
        let (x, y) = dataset.rows(&all);
        let pooled = metric(kind, &model.predict(&x)?, &y, MetricMode::Eval)?.value;
        total += locational_fairness(&per_location, pooled)?;
    }
    Ok(total / tasks.len() as f64)
}

struct Tracker<'a> {
    dataset: &'a GeoDataset,
    sampler: &'a EpisodeSampler,
    subsample: &'a [usize],
    log: Vec<LogRow>,
}

impl Tracker<'_> {
    fn record(&mut self, epoch: usize, t: u64, model: &ModelParams, bounds: (f64, f64)) -> Result<(), TrainError> {
        let (x, y) = self.dataset.rows(self.subsample);
        let mean_loss = loss(self.dataset.kind(), &model.predict(&x)?, &y)?;
        let heldout_lf = heldout_lf(model, self.dataset, self.sampler.heldout())?;
        log::info!("epoch {epoch} t {t}: loss {mean_loss:.6} held-out LF {heldout_lf:.6}");
        self.log.push(LogRow {
            epoch,
            t,
            mean_loss,
            heldout_lf,
            beta_plus: bounds.0,
            beta_minus: bounds.1,
        });
        Ok(())
    }
}

fn prepare(
    dataset: &GeoDataset,
    tasks: TaskConfig,
    config: &TrainConfig,
) -> Result<(EpisodeSampler, Vec<usize>), TrainError> {
    config.validate()?;
    if config.heldout_tasks == 0 {
        return Err(TrainError::Config("heldout_tasks must be positive".into()));
    }
    if !dataset.is_split() {
        return Err(TrainError::Config("dataset has no train/test split".into()));
    }
    let sampler = EpisodeSampler::new(
        dataset,
        tasks,
        config.tasks_per_epoch,
        config.heldout_tasks,
        config.k_train,
        config.k_val,
        config.seed,
    )?;
    let sub = subsample(dataset, config);
    Ok((sampler, sub))
}

fn diverged(task: u64) -> impl Fn(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Diverged { .. } | TrainError::Config(_) => e,
        other => TrainError::Diverged {
            task,
            reason: other.to_string(),
        },
    }
}

/// Meta-trains a predictor and referee over `epochs` passes of the task pool.
/// With `lambda = 0` every step is a plain MAML step at rate `beta0` and the
/// referee is never touched.
pub fn train(dataset: &GeoDataset, tasks: TaskConfig, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let (sampler, sub) = prepare(dataset, tasks, config)?;
    let (mut model, mut referee) = initial_params(dataset, config)?;
    let schedule = config.schedule();
    let mut tracker = Tracker { dataset, sampler: &sampler, subsample: &sub, log: Vec::new() };
    tracker.record(0, 0, &model, schedule.bounds(0))?;
    let mut t = 0u64;
    let mut clips = 0usize;
    for epoch in 0..config.epochs {
        let benchmark = global_metric(&model, dataset, &sub)?.value;
        for ep in sampler.epoch(dataset, epoch)? {
            if config.lambda == 0.0 {
                let (next, _, clipped) = maml_outer(
                    &model,
                    dataset,
                    &[&ep.batches],
                    config.beta0,
                    config.alpha1,
                    config.clip_norm,
                    config.second_order,
                )
                .map_err(diverged(ep.task.id))?;
                model = next;
                clips += usize::from(clipped);
            } else {
                let out = meta_ref_step(&model, &referee, dataset, &ep.batches, benchmark, ep.t, config)
                    .map_err(diverged(ep.task.id))?;
                model = out.model;
                referee = out.referee;
                clips += out.clips;
            }
            t = ep.t + 1;
        }
        tracker.record(epoch + 1, t, &model, schedule.bounds(t))?;
    }
    if clips > 0 {
        log::info!("gradient clipping fired {clips} times");
    }
    let global = global_metric(&model, dataset, &sub)?.value;
    Ok(TrainOutcome {
        model,
        referee: Some(referee),
        log: tracker.log,
        global_metric: global,
        t,
        clips,
    })
}

/// Population variance of `1 x 1` values recorded on a graph.
pub fn population_variance_graph(g: &mut Graph, values: &[Var]) -> Var {
    let n = values.len() as f64;
    let mut sum = values[0];
    for &v in &values[1..] {
        sum = g.add(sum, v);
    }
    let mean = g.scale(sum, 1.0 / n);
    let mut acc: Option<Var> = None;
    for &v in values {
        let d = g.sub(v, mean);
        let sq = g.square(d);
        acc = Some(match acc {
            None => sq,
            Some(a) => g.add(a, sq),
        });
    }
    g.scale(acc.expect("non-empty"), 1.0 / n)
}

/// Non-meta training on the same episode stream: each step minimizes the mean
/// per-location loss plus `reg_lambda` times its population variance over all
/// of the episode's minibatch samples. `reg_lambda = 0` is the plain baseline.
pub fn baseline_reg(
    dataset: &GeoDataset,
    tasks: TaskConfig,
    config: &TrainConfig,
    reg_lambda: f64,
) -> Result<TrainOutcome, TrainError> {
    if !(reg_lambda.is_finite() && reg_lambda >= 0.0) {
        return Err(TrainError::Config(format!("reg_lambda must be non-negative, got {reg_lambda}")));
    }
    let (sampler, sub) = prepare(dataset, tasks, config)?;
    let (mut model, _) = initial_params(dataset, config)?;
    let kind = dataset.kind();
    let mut tracker = Tracker { dataset, sampler: &sampler, subsample: &sub, log: Vec::new() };
    tracker.record(0, 0, &model, (0.0, 0.0))?;
    let mut t = 0u64;
    let mut clips = 0usize;
    for epoch in 0..config.epochs {
        for ep in sampler.epoch(dataset, epoch)? {
            let step = || -> Result<(ModelParams, bool), TrainError> {
                let mut g = Graph::new();
                let theta = model.load(&mut g);
                let mut losses = Vec::with_capacity(ep.batches.locations.len());
                for b in &ep.batches.locations {
                    let idx: Vec<usize> = b.train.iter().chain(&b.val).copied().collect();
                    let (x, y) = dataset.rows(&idx);
                    let xv = g.constant(x);
                    let preds = model.shape().predict(&mut g, &theta, xv)?;
                    losses.push(loss_graph(&mut g, kind, preds, &y)?);
                }
                let mut sum = losses[0];
                for &l in &losses[1..] {
                    sum = g.add(sum, l);
                }
                let mean = g.scale(sum, 1.0 / losses.len() as f64);
                let objective = if reg_lambda > 0.0 {
                    let var = population_variance_graph(&mut g, &losses);
                    let weighted = g.scale(var, reg_lambda);
                    g.add(mean, weighted)
                } else {
                    mean
                };
                g.check_finite()?;
                let mut grads = g.gradients(objective, &theta)?;
                let clipped = clip_global_norm(&mut grads, config.clip_norm);
                Ok((model.stepped(&grads, config.alpha1)?, clipped))
            };
            let (next, clipped) = step().map_err(diverged(ep.task.id))?;
            model = next;
            clips += usize::from(clipped);
            t = ep.t + 1;
        }
        tracker.record(epoch + 1, t, &model, (0.0, 0.0))?;
    }
    let global = global_metric(&model, dataset, &sub)?.value;
    Ok(TrainOutcome {
        model,
        referee: None,
        log: tracker.log,
        global_metric: global,
        t,
        clips,
    })
}
