//! Meta-training: the MAML baseline, the three-phase Meta-Ref loop with its
//! rate schedule and ablation switches, the variance-regularized baseline,
//! and few-shot fine-tuning on test-region tasks.

mod episodes;
mod evaluate;
mod maml;
mod metaref;
mod runner;

pub use episodes::{Episode, EpisodeSampler};
pub use evaluate::{evaluate_task, fine_tune, Adaptation};
pub use maml::{maml_inner, maml_inner_step, maml_outer};
pub use metaref::{
    meta_ref_step, phase1_evaluate, phase2_assign_rates, phase3_gradients, phase3_meta_update,
    FairnessFactors, LocalEval, MetaGradients, StepOutcome,
};
pub use runner::{
    baseline_reg, initial_params, population_variance_graph, train, write_log_csv, LogRow, TrainOutcome,
};

use crate::diffengine::{AdError, Tensor};
use crate::geodata::{GeoDataset, LocationId, Region};
use crate::metrics::{metric, MetricError, MetricMode};
use crate::nets::{ModelParams, NetError};
use crate::tasks::TaskError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("task {task} diverged: {reason}")]
    Diverged { task: u64, reason: String },
    #[error("location {0} is not in the test region")]
    NotTestRegion(LocationId),
}

/// Hyperparameters of every training method.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Outer step on the validation loss.
    pub alpha1: f64,
    /// Fairness loss scaling; the referee and fairness steps use `lambda * alpha1`.
    pub lambda: f64,
    /// Baseline inner-loop rate.
    pub beta0: f64,
    /// Schedule scaling: the rate bounds separate over roughly `rho` tasks.
    pub rho: f64,
    pub epochs: usize,
    /// Size of the training-task pool visited once per epoch.
    pub tasks_per_epoch: usize,
    pub disable_p2p: bool,
    pub disable_f2m: bool,
    pub disable_f2p: bool,
    /// Differentiate through inner-loop gradients.
    pub second_order: bool,
    /// Stop gradients at the location embeddings fed to the referee.
    pub detach_embeddings: bool,
    /// Global-norm clip on every applied outer update; 0 disables.
    pub clip_norm: f64,
    /// Pooled training-region points used for the global benchmark.
    pub global_subsample: usize,
    pub k_train: usize,
    pub k_val: usize,
    /// Training-region tasks scored after each epoch for the log.
    pub heldout_tasks: usize,
    pub fine_tune_steps: usize,
    /// Share of each test location used for adaptation.
    pub few_shot_fraction: f64,
    /// Weight of the per-location loss variance in the Reg baseline.
    pub reg_lambda: f64,
    pub width: usize,
    pub depth: usize,
    pub referee_hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha1: 1e-3,
            lambda: 0.1,
            beta0: 1e-4,
            rho: 50.0,
            epochs: 1,
            tasks_per_epoch: 1000,
            disable_p2p: false,
            disable_f2m: false,
            disable_f2p: false,
            second_order: true,
            detach_embeddings: false,
            clip_norm: 10.0,
            global_subsample: 2048,
            k_train: 8,
            k_val: 8,
            heldout_tasks: 5,
            fine_tune_steps: 1,
            few_shot_fraction: 0.05,
            reg_lambda: 1.0,
            width: 32,
            depth: 2,
            referee_hidden: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn alpha2(&self) -> f64 {
        self.lambda * self.alpha1
    }

    pub fn alpha3(&self) -> f64 {
        self.lambda * self.alpha1
    }

    pub fn schedule(&self) -> RateSchedule {
        RateSchedule::new(self.beta0, self.rho)
    }

    /// All problems found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{name} must be positive, got {v}"));
            }
        };
        positive("alpha1", self.alpha1);
        positive("beta0", self.beta0);
        positive("rho", self.rho);
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            out.push(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.reg_lambda.is_finite() && self.reg_lambda >= 0.0) {
            out.push(format!("reg_lambda must be non-negative, got {}", self.reg_lambda));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            out.push(format!("clip_norm must be non-negative, got {}", self.clip_norm));
        }
        if !(self.few_shot_fraction > 0.0 && self.few_shot_fraction < 1.0) {
            out.push(format!(
                "few_shot_fraction must lie in (0, 1), got {}",
                self.few_shot_fraction
            ));
        }
        for (name, v) in [
            ("tasks_per_epoch", self.tasks_per_epoch),
            ("global_subsample", self.global_subsample),
            ("k_train", self.k_train),
            ("k_val", self.k_val),
            ("width", self.width),
            ("depth", self.depth),
            ("referee_hidden", self.referee_hidden),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        match self.problems().as_slice() {
            [] => Ok(()),
            all => Err(TrainError::Config(all.join("; "))),
        }
    }
}

/// Inner-loop rate bounds at global task counter `t`:
/// `beta_plus = beta0 * s` and `beta_minus = beta0 * (1 - s)` with `s = sigmoid(t / rho)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSchedule {
    pub beta0: f64,
    pub rho: f64,
}

impl RateSchedule {
    pub fn new(beta0: f64, rho: f64) -> Self {
        Self { beta0, rho }
    }

    /// `(beta_plus, beta_minus)` at step `t`.
    pub fn bounds(&self, t: u64) -> (f64, f64) {
        let e = (-(t as f64) / self.rho).exp();
        let s = 1.0 / (1.0 + e);
        let s_minus = e / (1.0 + e);
        (self.beta0 * s, self.beta0 * s_minus)
    }
}

/// Scales a gradient set down to global norm `max_norm` if it exceeds it.
/// Returns whether clipping fired.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> bool {
    if max_norm <= 0.0 {
        return false;
    }
    let norm = grads.iter().map(Tensor::norm_squared).sum::<f64>().sqrt();
    if norm <= max_norm {
        return false;
    }
    let factor = max_norm / norm;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
    true
}

/// The global benchmark: surrogate metric of the model over a pooled sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalMetric {
    pub value: f64,
    pub samples: usize,
}

pub fn global_metric(
    model: &ModelParams,
    dataset: &GeoDataset,
    samples: &[usize],
) -> Result<GlobalMetric, TrainError> {
    let (x, y) = dataset.rows(samples);
    let preds = model.predict(&x)?;
    let value = metric(dataset.kind(), &preds, &y, MetricMode::Surrogate)?.value;
    if !value.is_finite() {
        return Err(TrainError::Diverged {
            task: 0,
            reason: "global benchmark is not finite".into(),
        });
    }
    Ok(GlobalMetric {
        value,
        samples: samples.len(),
    })
}

/// Sample indices of every train-region location, in location order.
pub fn train_region_samples(dataset: &GeoDataset) -> Vec<usize> {
    dataset
        .locations_in(Region::Train)
        .flat_map(|l| l.samples.iter().copied())
        .collect()
}
