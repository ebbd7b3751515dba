//! Training loop checked against closed forms, finite differences and
//! hand-built equivalents.

use metaref_core::diffengine::{Graph, Tensor};
use metaref_core::geodata::{
    generate_synthetic, split_locations, GeoDataset, Location, ProblemKind, Region, SyntheticSpec,
};
use metaref_core::nets::{Head, MetaRefParams, ModelParams, ModelShape, RefereeShape};
use metaref_core::tasks::{sample_batches, LocationBatch, SpatialTask, TaskBatches, TaskConfig};
use metaref_core::training::{
    baseline_reg, fine_tune, initial_params, maml_inner_step, maml_outer, meta_ref_step,
    phase1_evaluate, phase2_assign_rates, phase3_gradients, population_variance_graph, train,
    EpisodeSampler, LocalEval, RateSchedule, TrainConfig, TrainError,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dataset of `groups` locations, each a list of `(features, label)` rows.
fn dataset(groups: &[(Region, Vec<(Vec<f64>, f64)>)], kind: ProblemKind) -> GeoDataset {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut locations = Vec::new();
    for (i, (region, samples)) in groups.iter().enumerate() {
        let start = rows.len();
        for (x, y) in samples {
            rows.push(x.clone());
            labels.push(*y);
        }
        locations.push(Location {
            id: i as u64,
            x: (i % 5) as f64 / 5.0,
            y: (i / 5) as f64 / 5.0,
            samples: (start..rows.len()).collect(),
            region: Some(*region),
        });
    }
    GeoDataset::new(Tensor::from_rows(&rows), labels, locations, kind).unwrap()
}

fn synthetic(seed: u64) -> GeoDataset {
    let spec = SyntheticSpec { seed, ..SyntheticSpec::default() };
    let (ds, _) = generate_synthetic(&spec).unwrap();
    split_locations(&ds, 0.5, seed).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        tasks_per_epoch: 12,
        epochs: 2,
        width: 8,
        heldout_tasks: 2,
        global_subsample: 256,
        referee_hidden: 4,
        ..TrainConfig::default()
    }
}

fn random_model(shape: ModelShape, seed: u64) -> ModelParams {
    ModelParams::init(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn scalar_model() -> ModelParams {
    ModelParams::zeros(ModelShape::new(1, 1, 1, Head::Regression).unwrap())
}

fn one_location_task(train_label: f64, val_label: f64) -> (GeoDataset, TaskBatches) {
    let ds = dataset(
        &[(Region::Train, vec![(vec![0.5], train_label), (vec![0.5], val_label)])],
        ProblemKind::Regression,
    );
    let b = TaskBatches { locations: vec![LocationBatch { location: 0, train: vec![0], val: vec![1] }] };
    (ds, b)
}

fn decoder_bias(m: &ModelParams) -> f64 {
    m.tensors().last().unwrap().item()
}

#[test]
fn quadratic_maml_matches_closed_form() {
    // With zero encoder weights the prediction is the decoder bias theta,
    // so l(theta) = (theta - 1)^2 on both splits.
    let (ds, b) = one_location_task(1.0, 1.0);
    let m = scalar_model();
    let (x, y) = ds.rows(&b.training());
    let inner = maml_inner_step(&m, ProblemKind::Regression, &x, &y, 0.1).unwrap();
    assert!((decoder_bias(&inner) - 0.2).abs() < 1e-15);

    // d/dtheta (theta' - 1)^2 = 2 (theta' - 1)(1 - 2 beta) = -1.28
    let (second, loss, _) = maml_outer(&m, &ds, &[&b], 0.1, 1.0, 0.0, true).unwrap();
    assert!((loss - 0.64).abs() < 1e-15);
    assert!((decoder_bias(&second) - 1.28).abs() < 1e-14);
    let (first, _, _) = maml_outer(&m, &ds, &[&b], 0.1, 1.0, 0.0, false).unwrap();
    assert!((decoder_bias(&first) - 1.6).abs() < 1e-14);
    for (t, z) in second.tensors().iter().zip(m.tensors()).take(3) {
        assert_eq!(t, z);
    }
}

#[test]
fn zero_rates_leave_parameters_alone() {
    let (ds, b) = one_location_task(1.0, 1.0);
    let m = scalar_model();
    let (x, y) = ds.rows(&b.training());
    assert_eq!(maml_inner_step(&m, ProblemKind::Regression, &x, &y, 0.0).unwrap(), m);
    let (same, _, _) = maml_outer(&m, &ds, &[&b], 0.1, 0.0, 0.0, true).unwrap();
    assert_eq!(same, m);
}

#[test]
fn identical_tasks_double_the_outer_update() {
    let ds = synthetic(3);
    let m = random_model(ModelShape::new(4, 6, 2, Head::Regression).unwrap(), 1);
    let task = SpatialTask {
        id: 0,
        locations: ds.locations_in(Region::Train).take(3).map(|l| l.id).collect(),
        region: Region::Train,
    };
    let b = sample_batches(&ds, &task, 4, 4, 9).unwrap();
    let (one, _, _) = maml_outer(&m, &ds, &[&b], 0.05, 0.01, 0.0, true).unwrap();
    let (two, _, _) = maml_outer(&m, &ds, &[&b, &b], 0.05, 0.01, 0.0, true).unwrap();
    for ((a, b), base) in one.tensors().iter().zip(two.tensors()).zip(m.tensors()) {
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(base.data()) {
            assert!(((y - z) - 2.0 * (x - z)).abs() < 1e-14);
        }
    }
}

#[test]
fn local_gradients_match_least_squares_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut row = || (vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], rng.random_range(-1.0..1.0));
    let groups: Vec<_> = (0..2).map(|_| (Region::Train, (0..6).map(|_| row()).collect())).collect();
    let ds = dataset(&groups, ProblemKind::Regression);
    let m = random_model(ModelShape::new(2, 3, 1, Head::Regression).unwrap(), 2);
    let b = TaskBatches {
        locations: vec![
            LocationBatch { location: 0, train: vec![0, 1, 2, 3], val: vec![4, 5] },
            LocationBatch { location: 1, train: vec![6, 7, 8], val: vec![9, 10, 11] },
        ],
    };
    let mut g = Graph::new();
    let theta = m.load(&mut g);
    let evals = phase1_evaluate(&mut g, m.shape(), &theta, &ds, &b, false).unwrap();
    assert_eq!(evals.len(), 2);
    for (e, lb) in evals.iter().zip(&b.locations) {
        let (x, y) = ds.rows(&lb.train);
        let h = m.encode(&x).unwrap();
        let p = m.predict(&x).unwrap();
        let n = y.len() as f64;
        let r: Vec<f64> = p.data().iter().zip(&y).map(|(a, b)| a - b).collect();
        let mse = r.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((g.item(e.loss) - mse).abs() < 1e-12);
        assert!((g.item(e.metric) - mse.sqrt()).abs() < 1e-12);
        assert_eq!(e.count, lb.train.len());
        let dw = g.value(e.grads[2]);
        for j in 0..3 {
            let want = 2.0 / n * (0..y.len()).map(|i| h.get(i, j) * r[i]).sum::<f64>();
            assert!((dw.get(j, 0) - want).abs() < 1e-10);
        }
        let db = g.value(e.grads[3]).item();
        assert!((db - 2.0 / n * r.iter().sum::<f64>()).abs() < 1e-10);
        let summary = g.value(e.summary);
        for j in 0..3 {
            let mean = (0..y.len()).map(|i| h.get(i, j)).sum::<f64>() / n;
            assert!((summary.get(0, j) - mean).abs() < 1e-12);
        }
    }
}

/// Referee whose factor equals the relative performance it is given.
fn identity_referee(width: usize) -> MetaRefParams {
    let shape = RefereeShape::new(width, 1).unwrap();
    let mut w = vec![Tensor::zeros(width + 1, 1), Tensor::scalar(10.0), Tensor::scalar(1.0), Tensor::scalar(-10.0)];
    w[0].data_mut()[width] = 1.0;
    MetaRefParams::from_tensors(shape, w).unwrap()
}

/// Locations with fixed metrics and per-parameter gradients `(i + 1) * ones`.
fn fixed_evals(g: &mut Graph, m: &ModelParams, metrics: &[f64]) -> Vec<LocalEval> {
    metrics
        .iter()
        .enumerate()
        .map(|(i, &v)| LocalEval {
            location: i as u64,
            count: 1,
            loss: g.scalar(v * v),
            metric: g.scalar(v),
            grads: m
                .tensors()
                .iter()
                .map(|t| g.constant(Tensor::full(t.rows(), t.cols(), (i + 1) as f64)))
                .collect(),
            summary: g.constant(Tensor::zeros(1, m.shape().width)),
        })
        .collect()
}

fn assign(metrics: &[f64], bounds: (f64, f64)) -> (metaref_core::training::FairnessFactors, Vec<Tensor>) {
    let m = scalar_model();
    let referee = identity_referee(1);
    let mut g = Graph::new();
    let theta = m.load(&mut g);
    let w = referee.load(&mut g);
    let evals = fixed_evals(&mut g, &m, metrics);
    let (f, updated) = phase2_assign_rates(&mut g, referee.shape(), &w, &theta, &evals, 0.0, bounds).unwrap();
    (f, updated.iter().map(|&v| g.value(v).clone()).collect())
}

#[test]
fn rates_span_the_bounds_in_factor_order() {
    let beta0 = 1e-4;
    let late = RateSchedule::new(beta0, 50.0).bounds(1_000_000);
    assert_eq!(late, (beta0, 0.0));
    let (f, updated) = assign(&[1.0, 2.0, 3.0], late);
    assert_eq!(f.raw, vec![1.0, 2.0, 3.0]);
    assert_eq!(f.standardized, vec![0.0, 0.5, 1.0]);
    assert_eq!(f.rates, vec![0.0, beta0 / 2.0, beta0]);
    // theta' = 0 - sum_i beta_i (i + 1)
    let step = -(beta0 / 2.0 * 2.0 + beta0 * 3.0);
    for t in &updated {
        assert!(t.data().iter().all(|&v| (v - step).abs() < 1e-18));
    }
}

#[test]
fn equal_factors_share_the_midpoint_rate() {
    let bounds = RateSchedule::new(1e-4, 50.0).bounds(50);
    let (f, _) = assign(&[2.0, 2.0, 2.0], bounds);
    assert_eq!(f.standardized, vec![0.5; 3]);
    let mid = bounds.1 + 0.5 * (bounds.0 - bounds.1);
    assert!(f.rates.iter().all(|&r| (r - mid).abs() < 1e-20));

    let (single, _) = assign(&[0.7], (1e-4, 0.0));
    assert_eq!(single.rates, vec![0.5e-4]);

    let (start, _) = assign(&[1.0, 5.0], RateSchedule::new(1e-4, 50.0).bounds(0));
    assert_eq!(start.rates, vec![0.5e-4, 0.5e-4]);
}

#[test]
fn schedule_at_landmark_steps() {
    let s = RateSchedule::new(1e-4, 50.0);
    let mut prev = 0.0;
    for t in [0u64, 1, 50, 500, 1_000_000] {
        let (hi, lo) = s.bounds(t);
        assert!(hi >= lo && lo >= 0.0 && hi <= 1e-4);
        assert!(((hi + lo) - 1e-4).abs() < 1e-19);
        assert!(hi >= prev);
        prev = hi;
    }
    assert_eq!(s.bounds(0), (0.5e-4, 0.5e-4));
}

proptest! {
    #[test]
    fn schedule_bounds_sum_and_separate(t1 in 0u64..10_000_000, dt in 0u64..1000, beta0 in 1e-6f64..1.0, rho in 1.0f64..500.0) {
        let s = RateSchedule::new(beta0, rho);
        let (hi, lo) = s.bounds(t1);
        prop_assert!(hi >= lo && lo >= 0.0);
        prop_assert!(((hi + lo) - beta0).abs() <= 4.0 * f64::EPSILON * beta0);
        let (hi2, lo2) = s.bounds(t1 + dt);
        prop_assert!(hi2 - lo2 >= hi - lo);
    }

    #[test]
    fn rates_stay_in_bounds_and_follow_factors(
        metrics in prop::collection::vec(-3.0f64..3.0, 1..8),
        t in 0u64..2000,
    ) {
        let bounds = RateSchedule::new(1e-3, 50.0).bounds(t);
        let (f, _) = assign(&metrics, bounds);
        for (i, &r) in f.rates.iter().enumerate() {
            prop_assert!(r >= bounds.1 && r <= bounds.0);
            for (j, &q) in f.rates.iter().enumerate() {
                if f.raw[i] < f.raw[j] {
                    prop_assert!(r <= q);
                }
            }
        }
    }
}

/// Validation loss and fairness loss of the full three-phase forward pass.
fn objectives(
    m: &ModelParams,
    r: &MetaRefParams,
    ds: &GeoDataset,
    b: &TaskBatches,
    bench: f64,
    bounds: (f64, f64),
    want: [bool; 3],
) -> metaref_core::training::MetaGradients {
    let mut g = Graph::new();
    let theta = m.load(&mut g);
    let w = r.load(&mut g);
    let evals = phase1_evaluate(&mut g, m.shape(), &theta, ds, b, false).unwrap();
    let (_, adapted) = phase2_assign_rates(&mut g, r.shape(), &w, &theta, &evals, bench, bounds).unwrap();
    phase3_gradients(&mut g, m.shape(), &theta, &w, &adapted, ds, b, bench, want).unwrap()
}

fn relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| x.zip_map(y, |p, q| p - q).norm_squared()).sum();
    let scale: f64 = b.iter().map(Tensor::norm_squared).sum();
    (diff / scale).sqrt()
}

fn finite_difference(
    base: &[Tensor],
    h: f64,
    f: impl Fn(&[Tensor]) -> f64,
) -> Vec<Tensor> {
    let mut work = base.to_vec();
    let mut out: Vec<Tensor> = base.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
    for p in 0..base.len() {
        for k in 0..base[p].len() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + h;
            let up = f(&work);
            work[p].data_mut()[k] = orig - h;
            let down = f(&work);
            work[p].data_mut()[k] = orig;
            out[p].data_mut()[k] = (up - down) / (2.0 * h);
        }
    }
    out
}

fn composite_check(n_locations: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<_> = (0..n_locations)
        .map(|i| {
            let shift = i as f64 * 0.7;
            let rows = (0..6)
                .map(|_| {
                    let x = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                    let y = x[0] * (1.0 + shift) - x[1] + shift + 0.1 * rng.random_range(-1.0..1.0);
                    (x, y)
                })
                .collect();
            (Region::Train, rows)
        })
        .collect();
    let ds = dataset(&groups, ProblemKind::Regression);
    let b = TaskBatches {
        locations: (0..n_locations)
            .map(|i| LocationBatch {
                location: i as u64,
                train: (6 * i..6 * i + 3).collect(),
                val: (6 * i + 3..6 * i + 6).collect(),
            })
            .collect(),
    };
    let m = random_model(ModelShape::new(2, 3, 2, Head::Regression).unwrap(), seed + 1);
    let r = MetaRefParams::init(RefereeShape::new(3, 4).unwrap(), &mut ChaCha8Rng::seed_from_u64(seed + 2));
    let bench = 0.4;
    let bounds = RateSchedule::new(0.3, 50.0).bounds(50);
    let ad = objectives(&m, &r, &ds, &b, bench, bounds, [true; 3]);
    let h = 1e-6;

    let val = |t: &[Tensor]| {
        let mm = ModelParams::from_tensors(*m.shape(), t.to_vec()).unwrap();
        objectives(&mm, &r, &ds, &b, bench, bounds, [false; 3]).val_loss
    };
    let fair_theta = |t: &[Tensor]| {
        let mm = ModelParams::from_tensors(*m.shape(), t.to_vec()).unwrap();
        objectives(&mm, &r, &ds, &b, bench, bounds, [false; 3]).fair_loss
    };
    let fair_w = |t: &[Tensor]| {
        let rr = MetaRefParams::from_tensors(*r.shape(), t.to_vec()).unwrap();
        objectives(&m, &rr, &ds, &b, bench, bounds, [false; 3]).fair_loss
    };
    let p2p = finite_difference(m.tensors(), h, val);
    let f2p = finite_difference(m.tensors(), h, fair_theta);
    let e1 = relative_error(ad.p2p.as_ref().unwrap(), &p2p);
    let e3 = relative_error(ad.f2p.as_ref().unwrap(), &f2p);
    assert!(e1 <= 1e-5, "p2p relative error {e1}");
    assert!(e3 <= 1e-5, "f2p relative error {e3}");
    if n_locations > 1 {
        let f2m = finite_difference(r.tensors(), h, fair_w);
        let e2 = relative_error(ad.f2m.as_ref().unwrap(), &f2m);
        assert!(e2 <= 1e-5, "f2m relative error {e2}");
    }
}

#[test]
fn composite_gradients_match_finite_differences_single_location() {
    composite_check(1, 11);
}

#[test]
fn composite_gradients_match_finite_differences_three_locations() {
    composite_check(3, 21);
}

fn task_batches(ds: &GeoDataset, seed: u64) -> TaskBatches {
    let task = SpatialTask {
        id: 0,
        locations: ds.locations_in(Region::Train).take(4).map(|l| l.id).collect(),
        region: Region::Train,
    };
    sample_batches(ds, &task, 8, 8, seed).unwrap()
}

#[test]
fn disabled_referee_update_leaves_referee_bitwise() {
    let ds = synthetic(1);
    let cfg = TrainConfig { disable_f2m: true, ..small_config() };
    let (m, r) = initial_params(&ds, &cfg).unwrap();
    let out = meta_ref_step(&m, &r, &ds, &task_batches(&ds, 1), 0.5, 60, &cfg).unwrap();
    assert_eq!(out.referee, r);
    assert_ne!(out.model, m);

    let run = train(&ds, TaskConfig::default(), &cfg).unwrap();
    assert_eq!(run.referee.unwrap(), r);
}

#[test]
fn disabled_predictor_updates_leave_predictor_bitwise() {
    let ds = synthetic(1);
    let cfg = TrainConfig { disable_p2p: true, disable_f2p: true, ..small_config() };
    let (m, r) = initial_params(&ds, &cfg).unwrap();
    let out = meta_ref_step(&m, &r, &ds, &task_batches(&ds, 2), 0.5, 60, &cfg).unwrap();
    assert_eq!(out.model, m);
    assert_ne!(out.referee, r);
}

#[test]
fn lambda_zero_is_the_maml_loop() {
    let ds = synthetic(2);
    let cfg = TrainConfig { lambda: 0.0, ..small_config() };
    let run = train(&ds, TaskConfig::default(), &cfg).unwrap();

    let (mut m, r) = initial_params(&ds, &cfg).unwrap();
    let sampler = EpisodeSampler::new(
        &ds,
        TaskConfig::default(),
        cfg.tasks_per_epoch,
        cfg.heldout_tasks,
        cfg.k_train,
        cfg.k_val,
        cfg.seed,
    )
    .unwrap();
    for epoch in 0..cfg.epochs {
        for ep in sampler.epoch(&ds, epoch).unwrap() {
            m = maml_outer(&m, &ds, &[&ep.batches], cfg.beta0, cfg.alpha1, cfg.clip_norm, true).unwrap().0;
        }
    }
    assert_eq!(run.model, m);
    assert_eq!(run.referee.unwrap(), r);
    assert_eq!(run.t, (cfg.epochs * cfg.tasks_per_epoch) as u64);
}

#[test]
fn zero_epochs_return_the_initial_parameters() {
    let ds = synthetic(4);
    let cfg = TrainConfig { epochs: 0, ..small_config() };
    let run = train(&ds, TaskConfig::default(), &cfg).unwrap();
    let (m, r) = initial_params(&ds, &cfg).unwrap();
    assert_eq!(run.model, m);
    assert_eq!(run.referee.unwrap(), r);
    assert_eq!(run.log.len(), 1);
    assert_eq!(run.t, 0);
}

#[test]
fn training_is_deterministic() {
    let ds = synthetic(5);
    let a = train(&ds, TaskConfig::default(), &small_config()).unwrap();
    let b = train(&ds, TaskConfig::default(), &small_config()).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.referee, b.referee);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 3);
    let other = train(&ds, TaskConfig::default(), &TrainConfig { seed: 1, ..small_config() }).unwrap();
    assert_ne!(a.model, other.model);
}

#[test]
fn divergence_names_the_task() {
    let ds = synthetic(6);
    let cfg = TrainConfig { alpha1: 1e9, clip_norm: 0.0, lambda: 0.0, ..small_config() };
    match train(&ds, TaskConfig::default(), &cfg) {
        Err(TrainError::Diverged { task, .. }) => assert!(task < cfg.tasks_per_epoch as u64),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn variance_graph_matches_population_variance() {
    let mut g = Graph::new();
    let vals = [g.scalar(0.1), g.scalar(0.3)];
    let v = population_variance_graph(&mut g, &vals);
    assert!((g.item(v) - 0.01).abs() < 1e-17);
}

#[test]
fn variance_penalty_vanishes_on_identical_locations() {
    let rows = vec![(vec![0.3, -0.2], 0.7); 20];
    let groups: Vec<_> = (0..24)
        .map(|i| (if i % 2 == 0 { Region::Train } else { Region::Test }, rows.clone()))
        .collect();
    let ds = dataset(&groups, ProblemKind::Regression);
    let cfg = TrainConfig { tasks_per_epoch: 10, epochs: 1, width: 8, heldout_tasks: 2, ..TrainConfig::default() };
    let tasks = TaskConfig { min_locations: 3, max_locations: 5, ..TaskConfig::default() };
    let plain = baseline_reg(&ds, tasks, &cfg, 0.0).unwrap();
    let reg = baseline_reg(&ds, tasks, &cfg, 5.0).unwrap();
    for (a, b) in plain.model.tensors().iter().zip(reg.model.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn variance_penalty_changes_heterogeneous_training() {
    let ds = synthetic(7);
    let cfg = small_config();
    let plain = baseline_reg(&ds, TaskConfig::default(), &cfg, 0.0).unwrap();
    let again = baseline_reg(&ds, TaskConfig::default(), &cfg, 0.0).unwrap();
    let reg = baseline_reg(&ds, TaskConfig::default(), &cfg, 1.0).unwrap();
    assert_eq!(plain.model, again.model);
    assert_ne!(plain.model, reg.model);
    assert!(reg.referee.is_none());
    assert!(reg.log.iter().all(|r| r.beta_plus == 0.0 && r.beta_minus == 0.0));
}

fn test_task(ds: &GeoDataset) -> SpatialTask {
    SpatialTask {
        id: 3,
        locations: ds.locations_in(Region::Test).take(4).map(|l| l.id).collect(),
        region: Region::Test,
    }
}

#[test]
fn fine_tuning_keeps_a_perfect_fit_and_the_referee() {
    let rows = vec![(vec![0.3, -0.2], 0.0); 10];
    let groups: Vec<_> = (0..6).map(|_| (Region::Test, rows.clone())).collect();
    let ds = dataset(&groups, ProblemKind::Regression);
    let m = ModelParams::zeros(ModelShape::new(2, 4, 2, Head::Regression).unwrap());
    let r = MetaRefParams::init(RefereeShape::new(4, 3).unwrap(), &mut ChaCha8Rng::seed_from_u64(0));
    let task = test_task(&ds);
    let split = metaref_core::tasks::few_shot_split(&ds, &task, 0.3, 1).unwrap();
    let before = r.clone();
    let out = fine_tune(&m, &r, &ds, &task, &split, 0.0, (1e-3, 0.0), 3).unwrap();
    assert_eq!(out, m);
    assert_eq!(r, before);
}

#[test]
fn fine_tuning_moves_an_imperfect_model() {
    let ds = synthetic(8);
    let cfg = small_config();
    let (m, r) = initial_params(&ds, &cfg).unwrap();
    let task = test_task(&ds);
    let split = metaref_core::tasks::few_shot_split(&ds, &task, 0.2, 1).unwrap();
    let out = fine_tune(&m, &r, &ds, &task, &split, 0.5, (1e-2, 1e-3), 1).unwrap();
    assert_ne!(out, m);
    let none = fine_tune(&m, &r, &ds, &task, &split, 0.5, (1e-2, 1e-3), 0).unwrap();
    assert_eq!(none, m);
}

#[test]
fn fine_tuning_rejects_training_locations() {
    let ds = synthetic(8);
    let (m, r) = initial_params(&ds, &small_config()).unwrap();
    let train_id = ds.locations_in(Region::Train).next().unwrap().id;
    let task = SpatialTask { id: 0, locations: vec![train_id], region: Region::Test };
    let split = TaskBatches {
        locations: vec![LocationBatch { location: train_id, train: vec![ds.location(train_id).unwrap().samples[0]], val: vec![] }],
    };
    match fine_tune(&m, &r, &ds, &task, &split, 0.5, (1e-3, 0.0), 1) {
        Err(TrainError::NotTestRegion(id)) => assert_eq!(id, train_id),
        other => panic!("expected NotTestRegion, got {other:?}"),
    }
}

#[test]
fn heldout_fairness_improves_over_training() {
    let ds = synthetic(0);
    let cfg = TrainConfig { tasks_per_epoch: 200, epochs: 1, ..TrainConfig::default() };
    let run = train(&ds, TaskConfig::default(), &cfg).unwrap();
    assert_eq!(run.log.len(), 2);
    assert!(run.log[1].heldout_lf < run.log[0].heldout_lf, "{:?}", run.log);
    assert!(run.log[1].mean_loss < run.log[0].mean_loss);
    assert_eq!(run.log[1].t, 200);
}
