use super::TrainError;
use crate::geodata::{GeoDataset, Region};
use crate::tasks::{derive_seed, sample_batches, SpatialTask, TaskBatches, TaskConfig, TaskDistribution};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const POOL_STREAM: u64 = 2;
const HELDOUT_STREAM: u64 = 3;
const ORDER_STREAM: u64 = 1 << 20;
const BATCH_STREAM: u64 = 1 << 40;

/// One training visit: the global task counter, the task and its minibatches.
#[derive(Debug, Clone)]
pub struct Episode {
    pub t: u64,
    pub task: SpatialTask,
    pub batches: TaskBatches,
}

/// Fixed pool of training tasks, visited in a seeded order each epoch with
/// fresh minibatches per visit. Every training method sharing a seed sees the
/// same episode stream.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    pool: Vec<SpatialTask>,
    heldout: Vec<SpatialTask>,
    seed: u64,
    k_train: usize,
    k_val: usize,
}

impl EpisodeSampler {
    pub fn new(
        dataset: &GeoDataset,
        tasks: TaskConfig,
        pool_size: usize,
        heldout: usize,
        k_train: usize,
        k_val: usize,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut dist = TaskDistribution::new(dataset, Region::Train, tasks, derive_seed(seed, POOL_STREAM))?;
        let pool = dist.sample_tasks(pool_size)?;
        let mut dist = TaskDistribution::new(dataset, Region::Train, tasks, derive_seed(seed, HELDOUT_STREAM))?;
        let heldout = dist.sample_tasks(heldout)?;
        Ok(Self {
            pool,
            heldout,
            seed,
            k_train,
            k_val,
        })
    }

    pub fn pool(&self) -> &[SpatialTask] {
        &self.pool
    }

    pub fn heldout(&self) -> &[SpatialTask] {
        &self.heldout
    }

    /// Episodes of one epoch; `t` continues from `epoch * pool size`.
    pub fn epoch(&self, dataset: &GeoDataset, epoch: usize) -> Result<Vec<Episode>, TrainError> {
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, ORDER_STREAM + epoch as u64));
        order.shuffle(&mut rng);
        let base = (epoch * self.pool.len()) as u64;
        order
            .into_iter()
            .enumerate()
            .map(|(i, idx)| {
                let t = base + i as u64;
                let task = self.pool[idx].clone();
                let batches = sample_batches(
                    dataset,
                    &task,
                    self.k_train,
                    self.k_val,
                    derive_seed(self.seed, BATCH_STREAM + t),
                )?;
                Ok(Episode { t, task, batches })
            })
            .collect()
    }
}
