use super::{DataError, GeoDataset, Location, ProblemKind};
use crate::diffengine::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::fmt;

/// How label noise and the feature/label relationship vary over the map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BiasProfile {
    /// Constant noise everywhere.
    Uniform { noise: f64 },
    /// Noise standard deviation `base + slope * x` for a location at map `x`.
    LinearNoise { base: f64, slope: f64 },
    /// Constant noise plus a coordinate-dependent tilt of the ground truth.
    Drift { noise: f64, strength: f64 },
}

impl BiasProfile {
    pub fn name(&self) -> &'static str {
        match self {
            BiasProfile::Uniform { .. } => "uniform",
            BiasProfile::LinearNoise { .. } => "linear-noise",
            BiasProfile::Drift { .. } => "drift",
        }
    }

    /// Profile with default parameters for a name.
    pub fn named(name: &str) -> Result<Self, DataError> {
        match name {
            "uniform" => Ok(BiasProfile::Uniform { noise: 0.1 }),
            "linear-noise" => Ok(BiasProfile::LinearNoise { base: 0.05, slope: 0.2 }),
            "drift" => Ok(BiasProfile::Drift { noise: 0.1, strength: 0.5 }),
            _ => Err(DataError::Invalid(format!("unknown bias profile {name:?}"))),
        }
    }

    /// Noise standard deviation at map coordinate `x`.
    pub fn noise_at(&self, x: f64) -> f64 {
        match *self {
            BiasProfile::Uniform { noise } | BiasProfile::Drift { noise, .. } => noise,
            BiasProfile::LinearNoise { base, slope } => base + slope * x,
        }
    }

    fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            BiasProfile::Uniform { noise } => vec![("noise", noise)],
            BiasProfile::LinearNoise { base, slope } => vec![("base", base), ("slope", slope)],
            BiasProfile::Drift { noise, strength } => {
                vec![("noise", noise), ("strength", strength)]
            }
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = self
            .params()
            .into_iter()
            .find(|(_, v)| !v.is_finite() || *v < 0.0 && !matches!(self, BiasProfile::Drift { .. }));
        match bad {
            Some((k, v)) => Err(DataError::Invalid(format!(
                "bias profile {}: {k} = {v} must be finite and non-negative",
                self.name()
            ))),
            None => Ok(()),
        }
    }

    fn is_noiseless(&self) -> bool {
        match *self {
            BiasProfile::Uniform { noise } | BiasProfile::Drift { noise, .. } => noise == 0.0,
            BiasProfile::LinearNoise { base, slope } => base == 0.0 && slope == 0.0,
        }
    }
}

impl fmt::Display for BiasProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameters of a synthetic dataset. `signal` scales the ground-truth
/// function.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_locations: usize,
    pub points_per_location: usize,
    pub feature_dim: usize,
    pub profile: BiasProfile,
    pub kind: ProblemKind,
    pub signal: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_locations: 40,
            points_per_location: 50,
            feature_dim: 4,
            profile: BiasProfile::LinearNoise { base: 0.05, slope: 0.2 },
            kind: ProblemKind::Regression,
            signal: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn is_degenerate(&self) -> bool {
        self.signal == 0.0 && self.profile.is_noiseless()
    }

    /// `key=value` lines describing the spec; parsed back by [`Self::from_manifest`].
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        put("seed", self.seed.to_string());
        put("n_locations", self.n_locations.to_string());
        put("points_per_location", self.points_per_location.to_string());
        put("feature_dim", self.feature_dim.to_string());
        put("kind", self.kind.to_string());
        put("signal", self.signal.to_string());
        put("profile", self.profile.name().to_string());
        for (k, v) in self.profile.params() {
            put(&format!("profile.{k}"), v.to_string());
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self, DataError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| DataError::Csv {
                line: i as u64 + 1,
                message: format!("expected key=value, found {line:?}"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, k: &str) -> Result<T, DataError> {
            let raw = map
                .get(k)
                .ok_or_else(|| DataError::Invalid(format!("manifest is missing {k}")))?;
            raw.parse()
                .map_err(|_| DataError::Invalid(format!("manifest {k} = {raw:?} is malformed")))
        }
        let profile_name: String = get(&map, "profile")?;
        let profile = match profile_name.as_str() {
            "uniform" => BiasProfile::Uniform { noise: get(&map, "profile.noise")? },
            "linear-noise" => BiasProfile::LinearNoise {
                base: get(&map, "profile.base")?,
                slope: get(&map, "profile.slope")?,
            },
            "drift" => BiasProfile::Drift {
                noise: get(&map, "profile.noise")?,
                strength: get(&map, "profile.strength")?,
            },
            other => return Err(DataError::Invalid(format!("unknown bias profile {other:?}"))),
        };
        Ok(Self {
            seed: get(&map, "seed")?,
            n_locations: get(&map, "n_locations")?,
            points_per_location: get(&map, "points_per_location")?,
            feature_dim: get(&map, "feature_dim")?,
            profile,
            kind: get::<String>(&map, "kind")?.parse()?,
            signal: get(&map, "signal")?,
        })
    }
}

/// The noiseless function behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    weights: Vec<f64>,
    signal: f64,
    profile: BiasProfile,
}

impl GroundTruth {
    /// Noiseless target for one feature row at a location with map x-coordinate `loc_x`.
    pub fn value(&self, features: &[f64], loc_x: f64) -> f64 {
        let lin: f64 = features.iter().zip(&self.weights).map(|(a, b)| a * b).sum();
        let mut f = self.signal * (lin + 0.3 * (2.0 * lin).sin());
        if let BiasProfile::Drift { strength, .. } = self.profile {
            f += strength * (loc_x - 0.5) * features[0];
        }
        f
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Deterministic synthetic dataset on a jittered grid over the unit square.
///
/// Features are standard normal with the first two coordinates shifted by the
/// location's offset from the map centre. Regression labels are the ground
/// truth plus Gaussian noise; classification labels threshold that at zero.
/// Samples of each location occupy a contiguous block of rows.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(GeoDataset, GroundTruth), DataError> {
    if spec.n_locations < 4 {
        return Err(DataError::Invalid(format!(
            "need at least 4 locations, got {}",
            spec.n_locations
        )));
    }
    if spec.points_per_location == 0 || spec.feature_dim == 0 {
        return Err(DataError::Invalid(
            "points_per_location and feature_dim must be positive".into(),
        ));
    }
    if !spec.signal.is_finite() {
        return Err(DataError::Invalid("signal must be finite".into()));
    }
    spec.profile.validate()?;
    if spec.is_degenerate() {
        log::warn!("synthetic profile has zero signal and zero noise; labels are constant");
    }

    let mut truth_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    truth_rng.set_stream(1);
    let mut weights: Vec<f64> = (0..spec.feature_dim)
        .map(|_| truth_rng.random_range(-1.0..1.0))
        .collect();
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt().max(1e-12);
    weights.iter_mut().for_each(|w| *w /= norm);
    let truth = GroundTruth {
        weights,
        signal: spec.signal,
        profile: spec.profile,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_locations;
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let d = spec.feature_dim;
    let m = spec.points_per_location;
    let mut features = Vec::with_capacity(n * m * d);
    let mut labels = Vec::with_capacity(n * m);
    let mut locations = Vec::with_capacity(n);
    for k in 0..n {
        let (c, r) = (k % cols, k / cols);
        let jx: f64 = rng.random_range(-0.3..0.3);
        let jy: f64 = rng.random_range(-0.3..0.3);
        let x = ((c as f64 + 0.5 + jx) / cols as f64).clamp(0.0, 1.0);
        let y = ((r as f64 + 0.5 + jy) / rows as f64).clamp(0.0, 1.0);
        let sigma = spec.profile.noise_at(x);
        let start = labels.len();
        for _ in 0..m {
            let mut row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            row[0] += x - 0.5;
            if d > 1 {
                row[1] += y - 0.5;
            }
            let eps: f64 = rng.sample(StandardNormal);
            let target = truth.value(&row, x) + sigma * eps;
            labels.push(match spec.kind {
                ProblemKind::Regression => target,
                ProblemKind::Classification => f64::from(u8::from(target > 0.0)),
            });
            features.extend(row);
        }
        locations.push(Location {
            id: k as u64,
            x,
            y,
            samples: (start..start + m).collect(),
            region: None,
        });
    }
    let ds = GeoDataset::new(
        Tensor::new(n * m, d, features),
        labels,
        locations,
        spec.kind,
    )?;
    Ok((ds, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        for profile in ["uniform", "linear-noise", "drift"] {
            let spec = SyntheticSpec {
                seed: 9,
                profile: BiasProfile::named(profile).unwrap(),
                kind: ProblemKind::Classification,
                signal: 1.5,
                ..SyntheticSpec::default()
            };
            assert_eq!(SyntheticSpec::from_manifest(&spec.to_manifest()).unwrap(), spec);
        }
    }

    #[test]
    fn too_few_locations_is_an_error() {
        let spec = SyntheticSpec { n_locations: 3, ..SyntheticSpec::default() };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn degenerate_profile_still_generates() {
        let spec = SyntheticSpec {
            profile: BiasProfile::Uniform { noise: 0.0 },
            signal: 0.0,
            n_locations: 4,
            points_per_location: 3,
            ..SyntheticSpec::default()
        };
        assert!(spec.is_degenerate());
        let (ds, _) = generate_synthetic(&spec).unwrap();
        assert!(ds.labels().iter().all(|&y| y == 0.0));
    }

    #[test]
    fn coordinates_stay_in_unit_square() {
        let (ds, _) = generate_synthetic(&SyntheticSpec { n_locations: 17, ..SyntheticSpec::default() }).unwrap();
        for l in ds.locations() {
            assert!((0.0..=1.0).contains(&l.x) && (0.0..=1.0).contains(&l.y));
        }
    }
}
