use metaref_core::geodata::{
    generate_synthetic, read_csv, split_locations, write_csv, BiasProfile, GeoDataset,
    ProblemKind, Region, SyntheticSpec,
};
use proptest::prelude::*;
use std::collections::HashSet;

fn residual_sd_per_location(ds: &GeoDataset, truth: &metaref_core::geodata::GroundTruth) -> Vec<(f64, f64)> {
    ds.locations()
        .iter()
        .map(|loc| {
            let r: Vec<f64> = loc
                .samples
                .iter()
                .map(|&i| ds.labels()[i] - truth.value(ds.features().row(i), loc.x))
                .collect();
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
            (loc.x, var.sqrt())
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn same_seed_gives_bitwise_identical_data() {
    let spec = SyntheticSpec { seed: 31, ..SyntheticSpec::default() };
    let (a, _) = generate_synthetic(&spec).unwrap();
    let (b, _) = generate_synthetic(&spec).unwrap();
    assert_eq!(a, b);
    let bits = |d: &GeoDataset| -> Vec<u64> {
        d.features().data().iter().chain(d.labels()).map(|v| v.to_bits()).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    let (c, _) = generate_synthetic(&SyntheticSpec { seed: 32, ..spec }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn linear_noise_profile_orders_noise_by_x() {
    let spec = SyntheticSpec {
        seed: 4,
        n_locations: 40,
        points_per_location: 500,
        profile: BiasProfile::LinearNoise { base: 0.05, slope: 0.2 },
        ..SyntheticSpec::default()
    };
    let (ds, truth) = generate_synthetic(&spec).unwrap();
    let (xs, sds): (Vec<f64>, Vec<f64>) = residual_sd_per_location(&ds, &truth).into_iter().unzip();
    let rho = spearman(&xs, &sds);
    assert!(rho > 0.9, "rank correlation {rho}");
    for (x, sd) in xs.iter().zip(&sds) {
        let sigma = 0.05 + 0.2 * x;
        assert!((sd - sigma).abs() < 5.0 * sigma / (2.0f64 * 500.0).sqrt(), "x={x}: {sd} vs {sigma}");
    }
}

#[test]
fn uniform_profile_has_equal_optimal_error_everywhere() {
    let noise = 0.1;
    let spec = SyntheticSpec {
        seed: 8,
        n_locations: 25,
        points_per_location: 500,
        profile: BiasProfile::Uniform { noise },
        ..SyntheticSpec::default()
    };
    let (ds, truth) = generate_synthetic(&spec).unwrap();
    // standard error of a sample sd is about sigma / sqrt(2n)
    let tol = 5.0 * noise / (2.0f64 * 500.0).sqrt();
    for (x, sd) in residual_sd_per_location(&ds, &truth) {
        assert!((sd - noise).abs() < tol, "x={x}: {sd}");
    }
}

#[test]
fn feature_statistics_are_pinned_for_a_fixed_seed() {
    let (ds, _) = generate_synthetic(&SyntheticSpec { seed: 2024, ..SyntheticSpec::default() }).unwrap();
    let data = ds.features().data();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!((mean - PINNED_MEAN).abs() < 1e-12, "{mean:e}");
    assert!((var - PINNED_VAR).abs() < 1e-12, "{var:e}");
}

const PINNED_MEAN: f64 = -4.837265426359275e-3;
const PINNED_VAR: f64 = 1.0273840840697988;

#[test]
fn export_then_ingest_is_identical() {
    for kind in [ProblemKind::Regression, ProblemKind::Classification] {
        let (ds, _) = generate_synthetic(&SyntheticSpec { seed: 5, kind, ..SyntheticSpec::default() }).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), kind).unwrap();
        assert_eq!(back, ds);
    }
}

fn assert_partition(ds: &GeoDataset) {
    let mut seen = HashSet::new();
    for loc in ds.locations() {
        assert!(!loc.samples.is_empty());
        for &s in &loc.samples {
            assert!(seen.insert(s), "sample {s} owned twice");
        }
    }
    assert_eq!(seen.len(), ds.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constructors_keep_locations_disjoint_and_covering(
        seed in 0u64..10_000,
        n_locations in 4usize..30,
        points in 1usize..12,
        dim in 1usize..5,
        fraction in 0.05f64..0.95,
        classify in any::<bool>(),
    ) {
        let kind = if classify { ProblemKind::Classification } else { ProblemKind::Regression };
        let spec = SyntheticSpec {
            seed, n_locations, points_per_location: points, feature_dim: dim, kind,
            profile: BiasProfile::named("drift").unwrap(),
            ..SyntheticSpec::default()
        };
        let (ds, _) = generate_synthetic(&spec).unwrap();
        assert_partition(&ds);
        let split = split_locations(&ds, fraction, seed).unwrap();
        assert_partition(&split);
        let train: HashSet<_> = split.locations_in(Region::Train).map(|l| l.id).collect();
        let test: HashSet<_> = split.locations_in(Region::Test).map(|l| l.id).collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), n_locations);
        prop_assert!(!train.is_empty() && !test.is_empty());
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), kind).unwrap();
        assert_partition(&back);
        prop_assert_eq!(back, ds);
    }
}
