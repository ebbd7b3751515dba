//! Geo-located datasets: locations with attached samples, a seeded synthetic
//! generator with controllable location-dependent bias, CSV ingestion and
//! export, and the train/test split over locations.

mod csvio;
mod synthetic;

pub use csvio::{export_csv, ingest_csv, read_csv, read_split_csv, write_csv, write_split_csv};
pub use synthetic::{generate_synthetic, BiasProfile, GroundTruth, SyntheticSpec};

use crate::diffengine::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("split: {0}")]
    Split(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    Classification,
    Regression,
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProblemKind::Classification => "classification",
            ProblemKind::Regression => "regression",
        })
    }
}

impl FromStr for ProblemKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classification" => Ok(ProblemKind::Classification),
            "regression" => Ok(ProblemKind::Regression),
            _ => Err(DataError::Invalid(format!("unknown problem kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Train,
    Test,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Train => "train",
            Region::Test => "test",
        })
    }
}

impl FromStr for Region {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Region::Train),
            "test" => Ok(Region::Test),
            _ => Err(DataError::Invalid(format!("unknown region {s:?}"))),
        }
    }
}

pub type LocationId = u64;

/// A point in map units with the indices of the samples observed there.
#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    pub id: LocationId,
    pub x: f64,
    pub y: f64,
    pub samples: Vec<usize>,
    /// Set by [`split_locations`]; `None` before splitting.
    pub region: Option<Region>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoDataset {
    features: Tensor,
    labels: Vec<f64>,
    locations: Vec<Location>,
    kind: ProblemKind,
    index: BTreeMap<LocationId, usize>,
}

impl GeoDataset {
    /// Validates and assembles a dataset. Every sample must belong to exactly
    /// one location, location ids must be unique, and classification labels
    /// must be non-negative integers.
    pub fn new(
        features: Tensor,
        labels: Vec<f64>,
        locations: Vec<Location>,
        kind: ProblemKind,
    ) -> Result<Self, DataError> {
        let n = features.rows();
        if labels.len() != n {
            return Err(DataError::Invalid(format!(
                "{} labels for {n} feature rows",
                labels.len()
            )));
        }
        if features.cols() == 0 {
            return Err(DataError::Invalid("no feature columns".into()));
        }
        if !features.is_finite() || labels.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature or label".into()));
        }
        if kind == ProblemKind::Classification
            && labels.iter().any(|&v| v < 0.0 || v.fract() != 0.0)
        {
            return Err(DataError::Invalid(
                "classification labels must be non-negative integers".into(),
            ));
        }
        let mut index = BTreeMap::new();
        let mut owner = vec![None::<LocationId>; n];
        for (pos, loc) in locations.iter().enumerate() {
            if index.insert(loc.id, pos).is_some() {
                return Err(DataError::Invalid(format!("duplicate location id {}", loc.id)));
            }
            if loc.samples.is_empty() {
                return Err(DataError::Invalid(format!("location {} has no samples", loc.id)));
            }
            if !loc.x.is_finite() || !loc.y.is_finite() {
                return Err(DataError::Invalid(format!(
                    "location {} has non-finite coordinates",
                    loc.id
                )));
            }
            for &s in &loc.samples {
                let slot = owner.get_mut(s).ok_or_else(|| {
                    DataError::Invalid(format!("location {} references sample {s} of {n}", loc.id))
                })?;
                if let Some(other) = slot.replace(loc.id) {
                    return Err(DataError::Invalid(format!(
                        "sample {s} belongs to locations {other} and {}",
                        loc.id
                    )));
                }
            }
        }
        if let Some(orphan) = owner.iter().position(Option::is_none) {
            return Err(DataError::Invalid(format!("sample {orphan} has no location")));
        }
        Ok(Self {
            features,
            labels,
            locations,
            kind,
            index,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn location(&self, id: LocationId) -> Option<&Location> {
        self.index.get(&id).map(|&i| &self.locations[i])
    }

    /// Feature rows and labels for the given sample indices.
    pub fn rows(&self, samples: &[usize]) -> (Tensor, Vec<f64>) {
        let x = self.features.select_rows(samples);
        let y = samples.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn is_split(&self) -> bool {
        self.locations.iter().all(|l| l.region.is_some())
    }

    pub fn locations_in(&self, region: Region) -> impl Iterator<Item = &Location> {
        self.locations
            .iter()
            .filter(move |l| l.region == Some(region))
    }

    /// Copy of the dataset with region tags taken from `regions`, which must
    /// cover every location exactly.
    pub fn with_regions(&self, regions: &BTreeMap<LocationId, Region>) -> Result<Self, DataError> {
        if regions.len() != self.locations.len() {
            return Err(DataError::Split(format!(
                "{} region tags for {} locations",
                regions.len(),
                self.locations.len()
            )));
        }
        let mut out = self.clone();
        for loc in &mut out.locations {
            let r = regions
                .get(&loc.id)
                .ok_or_else(|| DataError::Split(format!("location {} has no region", loc.id)))?;
            loc.region = Some(*r);
        }
        Ok(out)
    }

    pub fn regions(&self) -> BTreeMap<LocationId, Region> {
        self.locations
            .iter()
            .filter_map(|l| l.region.map(|r| (l.id, r)))
            .collect()
    }
}

/// Partitions location ids into train and test regions. `fraction` is the
/// share of train-region locations, rounded, with at least one location on
/// each side. Per-location data is untouched.
pub fn split_locations(
    dataset: &GeoDataset,
    fraction: f64,
    seed: u64,
) -> Result<GeoDataset, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Split(format!(
            "fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = dataset.locations.len();
    if n < 2 {
        return Err(DataError::Split(format!("need at least 2 locations, have {n}")));
    }
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut ids: Vec<LocationId> = dataset.locations.iter().map(|l| l.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let train: HashSet<LocationId> = ids[..n_train].iter().copied().collect();
    let regions = dataset
        .locations
        .iter()
        .map(|l| {
            let r = if train.contains(&l.id) {
                Region::Train
            } else {
                Region::Test
            };
            (l.id, r)
        })
        .collect();
    dataset.with_regions(&regions)
}
