//! Spatial tasks and the distribution they are drawn from.
//!
//! A task is a set of locations from one region. Tasks are drawn either from
//! a random square window over the region or uniformly from the whole region.
//! Draws may overlap. Per-location minibatches for the inner and outer loop
//! come from [`sample_batches`]; test-time adaptation data from [`few_shot_split`].

use crate::geodata::{GeoDataset, LocationId, Region};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("task configuration: {0}")]
    Config(String),
    #[error("no window held at least {min} locations after {attempts} attempts")]
    WindowTooSparse { min: usize, attempts: usize },
    #[error("location {location} has {have} samples, needs {need}")]
    InsufficientSamples {
        location: LocationId,
        have: usize,
        need: usize,
    },
    #[error("unknown location {0}")]
    UnknownLocation(LocationId),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialTask {
    pub id: u64,
    pub locations: Vec<LocationId>,
    pub region: Region,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskConfig {
    /// Side of the square sampling window in map units.
    pub window: f64,
    /// Probability of a fully random task instead of a windowed one.
    pub mix: f64,
    pub min_locations: usize,
    pub max_locations: usize,
    /// Windows tried per task before giving up.
    pub max_retries: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            window: 0.8,
            mix: 0.2,
            min_locations: 10,
            max_locations: 15,
            max_retries: 100,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(TaskError::Config(format!("mix must lie in [0, 1], got {}", self.mix)));
        }
        if !(self.window.is_finite() && self.window > 0.0) {
            return Err(TaskError::Config(format!("window must be positive, got {}", self.window)));
        }
        if self.min_locations == 0 || self.min_locations > self.max_locations {
            return Err(TaskError::Config(format!(
                "location bounds {}..={} are invalid",
                self.min_locations, self.max_locations
            )));
        }
        if self.max_retries == 0 {
            return Err(TaskError::Config("max_retries must be positive".into()));
        }
        Ok(())
    }
}

/// Seeded stream of tasks over one region of a dataset.
#[derive(Debug, Clone)]
pub struct TaskDistribution<'a> {
    dataset: &'a GeoDataset,
    region: Region,
    config: TaskConfig,
    pool: Vec<(LocationId, f64, f64)>,
    rng: ChaCha8Rng,
    next_id: u64,
}

impl<'a> TaskDistribution<'a> {
    pub fn new(
        dataset: &'a GeoDataset,
        region: Region,
        config: TaskConfig,
        seed: u64,
    ) -> Result<Self, TaskError> {
        config.validate()?;
        let pool: Vec<_> = dataset
            .locations_in(region)
            .map(|l| (l.id, l.x, l.y))
            .collect();
        if pool.len() < config.min_locations {
            return Err(TaskError::Config(format!(
                "{region} region has {} locations, tasks need at least {}",
                pool.len(),
                config.min_locations
            )));
        }
        Ok(Self {
            dataset,
            region,
            config,
            pool,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
        })
    }

    pub fn dataset(&self) -> &'a GeoDataset {
        self.dataset
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn sample_task(&mut self) -> Result<SpatialTask, TaskError> {
        let chosen = if self.rng.random::<f64>() < self.config.mix {
            let pool: Vec<usize> = (0..self.pool.len()).collect();
            self.pick(&pool)
        } else {
            self.windowed()?
        };
        let id = self.next_id;
        self.next_id += 1;
        Ok(SpatialTask {
            id,
            locations: chosen.into_iter().map(|i| self.pool[i].0).collect(),
            region: self.region,
        })
    }

    pub fn sample_tasks(&mut self, n: usize) -> Result<Vec<SpatialTask>, TaskError> {
        (0..n).map(|_| self.sample_task()).collect()
    }

    /// Between `min_locations` and `max_locations` of `candidates`, in pool order.
    fn pick(&mut self, candidates: &[usize]) -> Vec<usize> {
        let hi = self.config.max_locations.min(candidates.len());
        let k = self.rng.random_range(self.config.min_locations..=hi);
        let mut picked: Vec<usize> = index::sample(&mut self.rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        picked.sort_unstable();
        picked
    }

    fn windowed(&mut self) -> Result<Vec<usize>, TaskError> {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(_, x, y) in &self.pool {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let w = self.config.window;
        for _ in 0..self.config.max_retries {
            let cx = x0 + self.rng.random::<f64>() * (x1 - x0 - w).max(0.0);
            let cy = y0 + self.rng.random::<f64>() * (y1 - y0 - w).max(0.0);
            let inside: Vec<usize> = self
                .pool
                .iter()
                .enumerate()
                .filter(|(_, &(_, x, y))| x >= cx && x <= cx + w && y >= cy && y <= cy + w)
                .map(|(i, _)| i)
                .collect();
            if inside.len() < self.config.min_locations {
                continue;
            }
            if inside.len() <= self.config.max_locations {
                return Ok(inside);
            }
            return Ok(self.pick(&inside));
        }
        Err(TaskError::WindowTooSparse {
            min: self.config.min_locations,
            attempts: self.config.max_retries,
        })
    }
}

/// Disjoint train and validation sample indices for one location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocationBatch {
    pub location: LocationId,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskBatches {
    pub locations: Vec<LocationBatch>,
}

impl TaskBatches {
    /// Whole-task validation indices: per-location validation sets concatenated.
    pub fn validation(&self) -> Vec<usize> {
        self.locations.iter().flat_map(|b| b.val.iter().copied()).collect()
    }

    pub fn training(&self) -> Vec<usize> {
        self.locations.iter().flat_map(|b| b.train.iter().copied()).collect()
    }
}

pub fn sample_batches(
    dataset: &GeoDataset,
    task: &SpatialTask,
    k_train: usize,
    k_val: usize,
    seed: u64,
) -> Result<TaskBatches, TaskError> {
    if k_train == 0 || k_val == 0 {
        return Err(TaskError::Config("minibatch sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let need = k_train + k_val;
    let locations = task
        .locations
        .iter()
        .map(|&id| {
            let loc = dataset.location(id).ok_or(TaskError::UnknownLocation(id))?;
            if loc.samples.len() < need {
                return Err(TaskError::InsufficientSamples {
                    location: id,
                    have: loc.samples.len(),
                    need,
                });
            }
            let picked = index::sample(&mut rng, loc.samples.len(), need);
            let idx: Vec<usize> = picked.into_iter().map(|i| loc.samples[i]).collect();
            Ok(LocationBatch {
                location: id,
                train: idx[..k_train].to_vec(),
                val: idx[k_train..].to_vec(),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(TaskBatches { locations })
}

/// Per-location split of a test task into adaptation data (`train`, a
/// `fraction` of each location, at least one sample) and evaluation data
/// (`val`, the rest, at least one sample).
pub fn few_shot_split(
    dataset: &GeoDataset,
    task: &SpatialTask,
    fraction: f64,
    seed: u64,
) -> Result<TaskBatches, TaskError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TaskError::Config(format!(
            "adaptation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locations = task
        .locations
        .iter()
        .map(|&id| {
            let loc = dataset.location(id).ok_or(TaskError::UnknownLocation(id))?;
            let n = loc.samples.len();
            if n < 2 {
                return Err(TaskError::InsufficientSamples { location: id, have: n, need: 2 });
            }
            let k = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
            let mut idx = loc.samples.clone();
            idx.shuffle(&mut rng);
            let val = idx.split_off(k);
            Ok(LocationBatch { location: id, train: idx, val })
        })
        .collect::<Result<_, _>>()?;
    Ok(TaskBatches { locations })
}

/// Deterministic child seed for stream `index` of a base seed (SplitMix64 finaliser).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn write_tasks_csv<W: Write>(tasks: &[SpatialTask], writer: W) -> Result<(), TaskError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| TaskError::Io(e.into());
    w.write_record(["task_id", "location_id"]).map_err(io)?;
    for t in tasks {
        for l in &t.locations {
            w.write_record([t.id.to_string(), l.to_string()]).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a frozen task list. Every location must exist in `dataset`, carry a
/// region tag, and share it with the rest of its task.
pub fn read_tasks_csv<R: Read>(reader: R, dataset: &GeoDataset) -> Result<Vec<SpatialTask>, TaskError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let csv_err = |e: csv::Error| TaskError::Csv {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    };
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != ["task_id", "location_id"] {
        return Err(TaskError::Csv {
            line: 1,
            message: format!("expected header task_id,location_id, found {header:?}"),
        });
    }
    let mut order: Vec<u64> = Vec::new();
    let mut tasks: BTreeMap<u64, (Vec<LocationId>, Region, HashSet<LocationId>)> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |message: String| TaskError::Csv { line, message };
        let tid: u64 = record[0].parse().map_err(|_| err(format!("bad task_id {:?}", &record[0])))?;
        let lid: LocationId = record[1]
            .parse()
            .map_err(|_| err(format!("bad location_id {:?}", &record[1])))?;
        let loc = dataset.location(lid).ok_or_else(|| err(format!("unknown location {lid}")))?;
        let region = loc
            .region
            .ok_or_else(|| err(format!("location {lid} has no region; split the dataset first")))?;
        let entry = tasks.entry(tid).or_insert_with(|| {
            order.push(tid);
            (Vec::new(), region, HashSet::new())
        });
        if entry.1 != region {
            return Err(err(format!("task {tid} mixes train and test locations")));
        }
        if !entry.2.insert(lid) {
            return Err(err(format!("task {tid} lists location {lid} twice")));
        }
        entry.0.push(lid);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let (locations, region, _) = tasks.remove(&id).expect("recorded above");
            SpatialTask { id, locations, region }
        })
        .collect())
}
