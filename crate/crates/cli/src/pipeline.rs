//! The experiment pipeline behind each subcommand. Every artifact lives under
//! one output directory:
//!
//! ```text
//! data.csv, data.manifest      gen-data
//! split.csv, eval_tasks.csv    gen-tasks (or the first train)
//! checkpoints/<method>.ckpt    train
//! logs/<method>.csv            train
//! reports/task_reports.csv     evaluate
//! reports/comparison_LF.csv, reports/comparison_ALF.csv, reports/summary.csv   compare
//! ```

use crate::config::{DataSource, ExperimentConfig};
use crate::CliError;
use metaref_core::geodata::{
    export_csv, generate_synthetic, ingest_csv, read_csv, read_split_csv, split_locations, write_split_csv, GeoDataset,
    Region, SyntheticSpec,
};
use metaref_core::metrics::{
    comparison_matrix, read_reports_csv, summarize, write_reports_csv, MethodSummary, ReportRow, TaskReport,
};
use metaref_core::nets::Checkpoint;
use metaref_core::tasks::{derive_seed, few_shot_split, read_tasks_csv, write_tasks_csv, SpatialTask, TaskDistribution};
use metaref_core::training::{
    baseline_reg, evaluate_task, train, write_log_csv, Adaptation, RateSchedule, TrainConfig, TrainOutcome,
};
use rayon::prelude::*;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

const SPLIT_STREAM: u64 = 1;
const EVAL_TASK_STREAM: u64 = 2;
const FEW_SHOT_STREAM: u64 = 3;

/// Paths of every artifact under an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("data.manifest")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.csv")
    }

    pub fn eval_tasks(&self) -> PathBuf {
        self.root.join("eval_tasks.csv")
    }

    pub fn checkpoint(&self, method: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{method}.ckpt"))
    }

    pub fn log(&self, method: &str) -> PathBuf {
        self.root.join("logs").join(format!("{method}.csv"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn task_reports(&self) -> PathBuf {
        self.reports().join("task_reports.csv")
    }
}

fn runtime(context: &str) -> impl Fn(&dyn std::fmt::Display) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| runtime("creating output directory")(&e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", path.display())))
}

fn refuse_overwrite(paths: &[PathBuf], force: bool) -> Result<(), CliError> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(CliError::Validation(format!("{} already exists; pass --force to overwrite", p.display()))),
        None => Ok(()),
    }
}

fn open(path: &Path, hint: &str) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Runtime(format!("reading {}: {e}{hint}", path.display())))
}

/// Writes the synthetic dataset and its manifest.
pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> Result<SyntheticSpec, CliError> {
    let spec = cfg
        .synthetic_spec()
        .ok_or_else(|| CliError::Validation("gen-data needs data.source = synthetic".into()))?;
    refuse_overwrite(&[layout.data(), layout.manifest()], force)?;
    let (ds, _) = generate_synthetic(&spec).map_err(|e| CliError::Validation(e.to_string()))?;
    create(&layout.data())?;
    export_csv(&ds, &layout.data()).map_err(|e| runtime("writing data")(&e))?;
    fs::write(layout.manifest(), spec.to_manifest()).map_err(|e| runtime("writing manifest")(&e))?;
    log::info!(
        "wrote {} samples at {} locations to {}",
        ds.len(),
        ds.locations().len(),
        layout.data().display()
    );
    Ok(spec)
}

/// The unsplit dataset named by the configuration.
pub fn load_dataset(cfg: &ExperimentConfig, layout: &Layout) -> Result<GeoDataset, CliError> {
    match &cfg.data {
        DataSource::Csv { path, kind } => ingest_csv(path, *kind).map_err(|e| CliError::Validation(e.to_string())),
        DataSource::Synthetic(_) => {
            let want = cfg.synthetic_spec().expect("synthetic source");
            let text = fs::read_to_string(layout.manifest()).map_err(|e| {
                CliError::Runtime(format!("reading {}: {e}; run gen-data first", layout.manifest().display()))
            })?;
            let have = SyntheticSpec::from_manifest(&text).map_err(|e| CliError::Validation(e.to_string()))?;
            if have != want {
                return Err(CliError::Validation(format!(
                    "{} was generated from a different spec; rerun gen-data --force",
                    layout.data().display()
                )));
            }
            read_csv(open(&layout.data(), "; run gen-data first")?, have.kind)
                .map_err(|e| CliError::Validation(e.to_string()))
        }
    }
}

/// Writes the train/test split and the frozen evaluation tasks.
pub fn gen_tasks(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> Result<(), CliError> {
    refuse_overwrite(&[layout.split(), layout.eval_tasks()], force)?;
    let ds = load_dataset(cfg, layout)?;
    let split = split_locations(&ds, cfg.split_fraction, derive_seed(cfg.seed, SPLIT_STREAM))
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let mut dist = TaskDistribution::new(&split, Region::Test, cfg.tasks, derive_seed(cfg.seed, EVAL_TASK_STREAM))
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let tasks = dist.sample_tasks(cfg.eval_tasks).map_err(|e| runtime("sampling evaluation tasks")(&e))?;
    write_split_csv(&split, create(&layout.split())?).map_err(|e| runtime("writing split")(&e))?;
    write_tasks_csv(&tasks, create(&layout.eval_tasks())?).map_err(|e| runtime("writing tasks")(&e))?;
    log::info!("wrote split and {} evaluation tasks", tasks.len());
    Ok(())
}

/// The dataset with its stored train/test split.
pub fn load_split_dataset(cfg: &ExperimentConfig, layout: &Layout) -> Result<GeoDataset, CliError> {
    let ds = load_dataset(cfg, layout)?;
    let regions = read_split_csv(open(&layout.split(), "; run gen-tasks first")?)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    ds.with_regions(&regions).map_err(|e| CliError::Validation(e.to_string()))
}

pub fn load_eval_tasks(layout: &Layout, ds: &GeoDataset) -> Result<Vec<SpatialTask>, CliError> {
    read_tasks_csv(open(&layout.eval_tasks(), "; run gen-tasks first")?, ds)
        .map_err(|e| CliError::Validation(e.to_string()))
}

/// Training configuration for a method name.
pub fn method_config(method: &str, base: &TrainConfig) -> TrainConfig {
    let mut cfg = base.clone();
    match method {
        "maml" => cfg.lambda = 0.0,
        "mr-p2p" => cfg.disable_p2p = true,
        "mr-f2m" => cfg.disable_f2m = true,
        "mr-f2p" => cfg.disable_f2p = true,
        _ => {}
    }
    cfg
}

pub fn train_method(cfg: &ExperimentConfig, ds: &GeoDataset, method: &str) -> Result<TrainOutcome, CliError> {
    let tc = method_config(method, &cfg.train_config());
    let out = match method {
        "plain" => baseline_reg(ds, cfg.tasks, &tc, 0.0),
        "reg" => baseline_reg(ds, cfg.tasks, &tc, tc.reg_lambda),
        _ => train(ds, cfg.tasks, &tc),
    };
    out.map_err(|e| CliError::Runtime(format!("training {method}: {e}")))
}

/// Trains each method and writes its checkpoint and log. Creates the split
/// and evaluation tasks first if neither exists.
pub fn train_all(cfg: &ExperimentConfig, layout: &Layout, methods: &[String], force: bool) -> Result<(), CliError> {
    match (layout.split().exists(), layout.eval_tasks().exists()) {
        (false, false) => gen_tasks(cfg, layout, false)?,
        (true, true) => {}
        _ => {
            return Err(CliError::Validation(
                "only one of split.csv and eval_tasks.csv exists; rerun gen-tasks --force".into(),
            ))
        }
    }
    let targets: Vec<PathBuf> = methods.iter().flat_map(|m| [layout.checkpoint(m), layout.log(m)]).collect();
    refuse_overwrite(&targets, force)?;
    let ds = load_split_dataset(cfg, layout)?;
    for method in methods {
        log::info!("training {method}");
        let out = train_method(cfg, &ds, method)?;
        let tc = method_config(method, &cfg.train_config());
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("method", method);
        ckpt.set_meta("seed", cfg.seed);
        ckpt.set_meta("t", out.t);
        ckpt.set_meta("global_metric", out.global_metric);
        ckpt.set_meta("beta0", tc.beta0);
        ckpt.set_meta("rho", tc.rho);
        ckpt.set_meta("fine_tune_steps", tc.fine_tune_steps);
        ckpt.put_model(&out.model);
        if let Some(r) = &out.referee {
            ckpt.put_referee(r);
        }
        let path = layout.checkpoint(method);
        create(&path)?;
        ckpt.save(&path).map_err(|e| runtime("writing checkpoint")(&e))?;
        write_log_csv(&out.log, create(&layout.log(method))?).map_err(|e| runtime("writing log")(&e))?;
    }
    Ok(())
}

struct Trained {
    method: String,
    ckpt: Checkpoint,
}

impl Trained {
    fn load(layout: &Layout, method: &str) -> Result<Self, CliError> {
        let path = layout.checkpoint(method);
        let ckpt = Checkpoint::load(&path)
            .map_err(|e| CliError::Runtime(format!("checkpoint for {method} at {}: {e}", path.display())))?;
        Ok(Self { method: method.to_string(), ckpt })
    }

    fn report(&self, ds: &GeoDataset, task: &SpatialTask, split: &metaref_core::tasks::TaskBatches) -> Result<TaskReport, String> {
        let c = &self.ckpt;
        let model = c.model().map_err(|e| e.to_string())?;
        let num = |k: &str| c.meta_parse::<f64>(k).map_err(|e| e.to_string());
        let steps: usize = c.meta_parse("fine_tune_steps").map_err(|e| e.to_string())?;
        let referee = c.referee().map_err(|e| e.to_string())?;
        let adaptation = match self.method.as_str() {
            "plain" | "reg" => Adaptation::None,
            "maml" => Adaptation::Maml { beta: num("beta0")?, steps },
            _ => {
                let t: u64 = c.meta_parse("t").map_err(|e| e.to_string())?;
                Adaptation::MetaRef {
                    referee: referee.as_ref().ok_or("checkpoint has no referee")?,
                    benchmark: num("global_metric")?,
                    bounds: RateSchedule::new(num("beta0")?, num("rho")?).bounds(t),
                    steps,
                }
            }
        };
        evaluate_task(&self.method, &model, adaptation, ds, task, split).map_err(|e| e.to_string())
    }
}

/// Scores every method on every frozen task, assigns the per-task best
/// quality as the ALF reference, and writes `reports/task_reports.csv`.
pub fn evaluate_all(
    cfg: &ExperimentConfig,
    layout: &Layout,
    methods: &[String],
    threads: usize,
    force: bool,
) -> Result<Vec<TaskReport>, CliError> {
    refuse_overwrite(&[layout.task_reports()], force)?;
    let ds = load_split_dataset(cfg, layout)?;
    let tasks = load_eval_tasks(layout, &ds)?;
    let trained = methods.iter().map(|m| Trained::load(layout, m)).collect::<Result<Vec<_>, _>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| runtime("starting worker threads")(&e))?;
    let few_shot = derive_seed(cfg.seed, FEW_SHOT_STREAM);
    let per_task: Vec<Vec<TaskReport>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|task| {
                let split = few_shot_split(&ds, task, cfg.train.few_shot_fraction, derive_seed(few_shot, task.id))
                    .map_err(|e| format!("task {}: {e}", task.id))?;
                trained
                    .iter()
                    .map(|m| m.report(&ds, task, &split).map_err(|e| format!("task {} {}: {e}", task.id, m.method)))
                    .collect::<Result<Vec<_>, String>>()
            })
            .collect::<Result<_, String>>()
    })
    .map_err(CliError::Runtime)?;
    let mut reports: Vec<TaskReport> = per_task.into_iter().flatten().collect();
    TaskReport::assign_references(&mut reports, ds.kind());
    let rows: Vec<ReportRow> = reports.iter().map(TaskReport::row).collect();
    write_reports_csv(&rows, create(&layout.task_reports())?).map_err(|e| runtime("writing reports")(&e))?;
    Ok(reports)
}

#[derive(Debug)]
pub struct Comparison {
    pub summaries: Vec<MethodSummary>,
}

/// Pairwise LF and ALF win matrices and per-method means over report CSVs.
pub fn compare(layout: &Layout, inputs: &[PathBuf], force: bool) -> Result<Comparison, CliError> {
    let out = layout.reports();
    let targets = ["comparison_LF.csv", "comparison_ALF.csv", "summary.csv"].map(|f| out.join(f));
    refuse_overwrite(&targets, force)?;
    let mut rows = Vec::new();
    for path in inputs {
        rows.extend(read_reports_csv(open(path, "; run evaluate first")?).map_err(|e| CliError::Validation(e.to_string()))?);
    }
    let lf = comparison_matrix(&rows, |r| r.lf).map_err(|e| CliError::Validation(e.to_string()))?;
    let alf = comparison_matrix(&rows, |r| r.alf).map_err(|e| CliError::Validation(e.to_string()))?;
    let summaries = summarize(&rows).map_err(|e| CliError::Validation(e.to_string()))?;
    lf.write_csv(create(&targets[0])?).map_err(|e| runtime("writing comparison")(&e))?;
    alf.write_csv(create(&targets[1])?).map_err(|e| runtime("writing comparison")(&e))?;
    MethodSummary::write_csv(&summaries, create(&targets[2])?).map_err(|e| runtime("writing summary")(&e))?;
    Ok(Comparison { summaries })
}
