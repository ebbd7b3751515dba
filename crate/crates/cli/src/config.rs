//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every file must carry
//! `schema_version = 1`. Unknown or repeated keys are errors, and all problems
//! in a file are reported together. [`ExperimentConfig::to_text`] writes a
//! complete, commented file that parses back to the same configuration.

use metaref_core::geodata::{BiasProfile, ProblemKind, SyntheticSpec};
use metaref_core::tasks::TaskConfig;
use metaref_core::training::TrainConfig;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

pub const SCHEMA_VERSION: u32 = 1;

/// Every method the harness can train and evaluate.
pub const METHODS: [&str; 7] = ["plain", "reg", "maml", "meta-ref", "mr-p2p", "mr-f2m", "mr-f2p"];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv { path: PathBuf, kind: ProblemKind },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataSource,
    /// Share of locations assigned to the training region.
    pub split_fraction: f64,
    pub tasks: TaskConfig,
    pub train: TrainConfig,
    /// Frozen test-region tasks scored by `evaluate`.
    pub eval_tasks: usize,
    pub methods: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            data: DataSource::Synthetic(SyntheticSpec::default()),
            split_fraction: 0.5,
            tasks: TaskConfig::default(),
            train: TrainConfig::default(),
            eval_tasks: 30,
            methods: ["plain", "reg", "maml", "meta-ref"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid configuration:\n  {}", .0.join("\n  "))]
pub struct ConfigError(pub Vec<String>);

struct Fields {
    map: BTreeMap<String, (usize, String)>,
    problems: Vec<String>,
}

impl Fields {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) {
        if let Some((line, raw)) = self.map.remove(key) {
            match raw.parse() {
                Ok(v) => *slot = v,
                Err(_) => self.problems.push(format!("line {line}: {key} = {raw:?} is malformed")),
            }
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut fields = Fields { map: BTreeMap::new(), problems: Vec::new() };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                fields.problems.push(format!("line {}: expected key = value, found {line:?}", i + 1));
                continue;
            };
            let key = k.trim().to_string();
            if fields.map.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                fields.problems.push(format!("line {}: {key} is set twice", i + 1));
            }
        }

        let mut version = 0u32;
        if !fields.map.contains_key("schema_version") {
            fields.problems.push("schema_version is missing".into());
        }
        fields.take("schema_version", &mut version);
        if version != 0 && version != SCHEMA_VERSION {
            fields.problems.push(format!("schema_version {version} is not supported (expected {SCHEMA_VERSION})"));
        }

        let mut cfg = ExperimentConfig::default();
        fields.take("seed", &mut cfg.seed);
        if let Some((_, out)) = fields.map.remove("out") {
            cfg.out = Some(PathBuf::from(out));
        }
        cfg.data = parse_data(&mut fields);
        fields.take("split.fraction", &mut cfg.split_fraction);

        let t = &mut cfg.tasks;
        fields.take("tasks.window", &mut t.window);
        fields.take("tasks.mix", &mut t.mix);
        fields.take("tasks.min_locations", &mut t.min_locations);
        fields.take("tasks.max_locations", &mut t.max_locations);
        fields.take("tasks.max_retries", &mut t.max_retries);

        let tr = &mut cfg.train;
        fields.take("train.alpha1", &mut tr.alpha1);
        fields.take("train.lambda", &mut tr.lambda);
        fields.take("train.beta0", &mut tr.beta0);
        fields.take("train.rho", &mut tr.rho);
        fields.take("train.epochs", &mut tr.epochs);
        fields.take("train.tasks_per_epoch", &mut tr.tasks_per_epoch);
        fields.take("train.second_order", &mut tr.second_order);
        fields.take("train.detach_embeddings", &mut tr.detach_embeddings);
        fields.take("train.clip_norm", &mut tr.clip_norm);
        fields.take("train.global_subsample", &mut tr.global_subsample);
        fields.take("train.k_train", &mut tr.k_train);
        fields.take("train.k_val", &mut tr.k_val);
        fields.take("train.heldout_tasks", &mut tr.heldout_tasks);
        fields.take("train.fine_tune_steps", &mut tr.fine_tune_steps);
        fields.take("train.few_shot_fraction", &mut tr.few_shot_fraction);
        fields.take("train.reg_lambda", &mut tr.reg_lambda);
        fields.take("train.width", &mut tr.width);
        fields.take("train.depth", &mut tr.depth);
        fields.take("train.referee_hidden", &mut tr.referee_hidden);

        fields.take("eval.tasks", &mut cfg.eval_tasks);
        if let Some((_, list)) = fields.map.remove("methods") {
            cfg.methods = split_methods(&list);
        }

        let leftover: Vec<String> = fields.map.iter().map(|(k, (line, _))| format!("line {line}: unknown key {k}")).collect();
        fields.problems.extend(leftover);
        fields.problems.extend(cfg.problems());
        if fields.problems.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError(fields.problems))
        }
    }

    /// Semantic problems; an empty list means the configuration is usable.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match &self.data {
            DataSource::Synthetic(spec) => {
                if spec.n_locations < 4 {
                    out.push(format!("synthetic.n_locations must be at least 4, got {}", spec.n_locations));
                }
                if spec.points_per_location < 2 {
                    out.push("synthetic.points_per_location must be at least 2".into());
                }
                if spec.feature_dim == 0 {
                    out.push("synthetic.feature_dim must be positive".into());
                }
                if !spec.signal.is_finite() {
                    out.push("synthetic.signal must be finite".into());
                }
            }
            DataSource::Csv { path, .. } => {
                if !path.is_file() {
                    out.push(format!("data.path {} does not exist", path.display()));
                }
            }
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            out.push(format!("split.fraction must lie in (0, 1), got {}", self.split_fraction));
        }
        if let Err(e) = self.tasks.validate() {
            out.push(e.to_string());
        }
        out.extend(self.train.problems());
        if self.train.heldout_tasks == 0 {
            out.push("train.heldout_tasks must be positive".into());
        }
        if self.eval_tasks == 0 {
            out.push("eval.tasks must be positive".into());
        }
        if self.methods.is_empty() {
            out.push("methods must name at least one method".into());
        }
        for m in &self.methods {
            if !METHODS.contains(&m.as_str()) {
                out.push(format!("unknown method {m:?} (expected one of {})", METHODS.join(", ")));
            }
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            out.push("methods lists a method twice".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.problems() {
            p if p.is_empty() => Ok(()),
            p => Err(ConfigError(p)),
        }
    }

    /// Training configuration with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn kind(&self) -> ProblemKind {
        match &self.data {
            DataSource::Synthetic(spec) => spec.kind,
            DataSource::Csv { kind, .. } => *kind,
        }
    }

    /// Synthetic spec with the experiment seed applied, if the data is synthetic.
    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match &self.data {
            DataSource::Synthetic(spec) => Some(SyntheticSpec { seed: self.seed, ..spec.clone() }),
            DataSource::Csv { .. } => None,
        }
    }

    /// Complete configuration file text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |comment: &str, key: &str, value: String| {
            if !comment.is_empty() {
                let _ = writeln!(s, "# {comment}");
            }
            let _ = writeln!(s, "{key} = {value}");
        };
        put("format version of this file", "schema_version", SCHEMA_VERSION.to_string());
        put("base seed for data, splits, tasks and training", "seed", self.seed.to_string());
        if let Some(out) = &self.out {
            put("output directory", "out", out.display().to_string());
        }
        match &self.data {
            DataSource::Synthetic(spec) => {
                put("synthetic | csv", "data.source", "synthetic".into());
                put("", "synthetic.n_locations", spec.n_locations.to_string());
                put("", "synthetic.points_per_location", spec.points_per_location.to_string());
                put("", "synthetic.feature_dim", spec.feature_dim.to_string());
                put("regression | classification", "synthetic.kind", spec.kind.to_string());
                put("", "synthetic.signal", spec.signal.to_string());
                put("uniform | linear-noise | drift", "synthetic.profile", spec.profile.name().into());
                for (k, v) in profile_params(&spec.profile) {
                    put("", &format!("synthetic.{k}"), v.to_string());
                }
            }
            DataSource::Csv { path, kind } => {
                put("synthetic | csv", "data.source", "csv".into());
                put("", "data.path", path.display().to_string());
                put("regression | classification", "data.kind", kind.to_string());
            }
        }
        put("share of locations in the training region", "split.fraction", self.split_fraction.to_string());
        let t = &self.tasks;
        put("task window side as a share of the region bounding box", "tasks.window", t.window.to_string());
        put("probability of a uniformly random task", "tasks.mix", t.mix.to_string());
        put("", "tasks.min_locations", t.min_locations.to_string());
        put("", "tasks.max_locations", t.max_locations.to_string());
        put("", "tasks.max_retries", t.max_retries.to_string());
        let tr = &self.train;
        put("outer step size; referee and fairness steps use lambda * alpha1", "train.alpha1", tr.alpha1.to_string());
        put("", "train.lambda", tr.lambda.to_string());
        put("inner-loop rate", "train.beta0", tr.beta0.to_string());
        put("rate-bound schedule scale, in tasks", "train.rho", tr.rho.to_string());
        put("", "train.epochs", tr.epochs.to_string());
        put("size of the training-task pool", "train.tasks_per_epoch", tr.tasks_per_epoch.to_string());
        put("", "train.second_order", tr.second_order.to_string());
        put("", "train.detach_embeddings", tr.detach_embeddings.to_string());
        put("global-norm clip of each update; 0 disables", "train.clip_norm", tr.clip_norm.to_string());
        put("", "train.global_subsample", tr.global_subsample.to_string());
        put("per-location minibatch sizes", "train.k_train", tr.k_train.to_string());
        put("", "train.k_val", tr.k_val.to_string());
        put("", "train.heldout_tasks", tr.heldout_tasks.to_string());
        put("", "train.fine_tune_steps", tr.fine_tune_steps.to_string());
        put("share of each test location used for adaptation", "train.few_shot_fraction", tr.few_shot_fraction.to_string());
        put("variance weight of the reg baseline", "train.reg_lambda", tr.reg_lambda.to_string());
        put("", "train.width", tr.width.to_string());
        put("", "train.depth", tr.depth.to_string());
        put("", "train.referee_hidden", tr.referee_hidden.to_string());
        put("frozen test tasks", "eval.tasks", self.eval_tasks.to_string());
        put(&format!("any of {}", METHODS.join(", ")), "methods", self.methods.join(","));
        s
    }
}

pub fn split_methods(list: &str) -> Vec<String> {
    list.split(',').map(str::trim).filter(|m| !m.is_empty()).map(String::from).collect()
}

fn profile_params(p: &BiasProfile) -> Vec<(&'static str, f64)> {
    match *p {
        BiasProfile::Uniform { noise } => vec![("noise", noise)],
        BiasProfile::LinearNoise { base, slope } => vec![("base", base), ("slope", slope)],
        BiasProfile::Drift { noise, strength } => vec![("noise", noise), ("strength", strength)],
    }
}

fn parse_data(fields: &mut Fields) -> DataSource {
    let mut source = String::from("synthetic");
    fields.take("data.source", &mut source);
    match source.as_str() {
        "csv" => {
            let mut kind = ProblemKind::Regression;
            fields.take("data.kind", &mut kind);
            match fields.map.remove("data.path") {
                Some((_, path)) => DataSource::Csv { path: PathBuf::from(path), kind },
                None => {
                    fields.problems.push("data.source = csv requires data.path".into());
                    DataSource::Csv { path: PathBuf::new(), kind }
                }
            }
        }
        other => {
            if other != "synthetic" {
                fields.problems.push(format!("data.source must be synthetic or csv, got {other:?}"));
            }
            let mut spec = SyntheticSpec::default();
            fields.take("synthetic.n_locations", &mut spec.n_locations);
            fields.take("synthetic.points_per_location", &mut spec.points_per_location);
            fields.take("synthetic.feature_dim", &mut spec.feature_dim);
            fields.take("synthetic.kind", &mut spec.kind);
            fields.take("synthetic.signal", &mut spec.signal);
            if let Some((line, name)) = fields.map.remove("synthetic.profile") {
                match BiasProfile::named(&name) {
                    Ok(p) => spec.profile = p,
                    Err(e) => fields.problems.push(format!("line {line}: {e}")),
                }
            }
            spec.profile = match spec.profile {
                BiasProfile::Uniform { mut noise } => {
                    fields.take("synthetic.noise", &mut noise);
                    BiasProfile::Uniform { noise }
                }
                BiasProfile::LinearNoise { mut base, mut slope } => {
                    fields.take("synthetic.base", &mut base);
                    fields.take("synthetic.slope", &mut slope);
                    BiasProfile::LinearNoise { base, slope }
                }
                BiasProfile::Drift { mut noise, mut strength } => {
                    fields.take("synthetic.noise", &mut noise);
                    fields.take("synthetic.strength", &mut strength);
                    BiasProfile::Drift { noise, strength }
                }
            };
            DataSource::Synthetic(spec)
        }
    }
}
