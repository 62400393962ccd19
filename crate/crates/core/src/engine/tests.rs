use super::*;
use crate::geometry::{e_to_f, pose_error, CameraIntrinsics};
use crate::testutil::{camera, random_pose, scene, to_pixels};
use crate::training::{generate_synthetic, PairSpec};
use alloc::vec;
use core::cell::Cell;
use rand_chacha::ChaCha8Rng;

/// Advances by a fixed step on every read.
struct TickClock {
    now: Cell<u64>,
    step: u64,
}

impl TickClock {
    fn new(step: u64) -> Self {
        Self { now: Cell::new(0), step }
    }
}

impl Clock for TickClock {
    fn now_ns(&self) -> u64 {
        let t = self.now.get() + self.step;
        self.now.set(t);
        t
    }
}

fn small_cfg() -> EngineConfig {
    EngineConfig {
        batches: 3,
        batch_size: 32,
        ..EngineConfig::default()
    }
}

fn noise_free_pixels(seed: u64, n: usize) -> (Vec<Correspondence>, RelativePose, CameraIntrinsics) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = random_pose(&mut rng);
    let k = camera();
    (to_pixels(&scene(&mut rng, &pose, n), &k), pose, k)
}

fn max_sampson(m: &ModelHypothesis, data: &[Correspondence]) -> f64 {
    data.iter().map(|c| sampson_sq(m, c)).fold(0.0, f64::max)
}

#[test]
fn eight_noise_free_points_give_an_exact_model() {
    let (data, pose, k) = noise_free_pixels(1, 8);
    let bundle = MlpBundle::new_random(0);
    let cfg = small_cfg();
    let r = ca_ransac(&data, 1.5 * 1.5, &bundle, &cfg, &NullClock).unwrap();
    assert!(max_sampson(&r.model, &data) < 1e-12);
    let truth = ModelHypothesis::from_matrix(&e_to_f(&pose.essential(), &k, &k), ModelKind::Fundamental, Provenance::Refined);
    let a = r.model.m / r.model.m.norm();
    let b = truth.m / truth.m.norm();
    assert!((a - b).norm().min((a + b).norm()) < 1e-6);
}

#[test]
fn noise_free_pair_recovers_the_pose() {
    let (data, pose, k) = noise_free_pixels(2, 100);
    let bundle = MlpBundle::new_random(0);
    for kind in [ModelKind::Fundamental, ModelKind::Essential] {
        let cfg = EngineConfig {
            model_kind: kind,
            ..small_cfg()
        };
        let (input, t) = prepare(&data, Some((&k, &k)), kind, cfg.msac_threshold_px).unwrap();
        let r = ca_ransac(&input, t, &bundle, &cfg, &NullClock).unwrap();
        let est = recover_pose(&r.model, &input, t, &k, &k).unwrap();
        assert!(pose_error(&est, &pose) < 1e-4, "{kind:?}");
    }
}

#[test]
fn runs_are_deterministic() {
    let pair = generate_synthetic(
        &PairSpec {
            n: 200,
            inlier_rate: 0.4,
            ..PairSpec::default()
        },
        3,
    )
    .unwrap();
    let bundle = MlpBundle::new_random(4);
    let cfg = small_cfg();
    let data = &pair.correspondences;
    let a = ca_ransac(data, 2.25, &bundle, &cfg, &NullClock).unwrap();
    let b = ca_ransac(data, 2.25, &bundle, &cfg, &NullClock).unwrap();
    assert_eq!(a, b);
    let quality: Vec<f64> = data.iter().map(|c| -c.side_info).collect();
    assert_eq!(
        lm_lo_baseline(data, &quality, 2.25, &cfg, &NullClock).unwrap(),
        lm_lo_baseline(data, &quality, 2.25, &cfg, &NullClock).unwrap()
    );
    assert_eq!(
        msac_ransac_baseline(data, 2.25, &cfg, &NullClock).unwrap(),
        msac_ransac_baseline(data, 2.25, &cfg, &NullClock).unwrap()
    );
    let mut other = cfg.clone();
    other.sampler.rng_seed = 99;
    let c = ca_ransac(data, 2.25, &bundle, &other, &NullClock).unwrap();
    assert_ne!(a.batch_models, c.batch_models);
}

#[test]
fn every_batch_is_recorded() {
    let pair = generate_synthetic(&PairSpec::default(), 5).unwrap();
    let bundle = MlpBundle::new_random(1);
    let cfg = EngineConfig {
        batches: 4,
        batch_size: 16,
        ..EngineConfig::default()
    };
    let (r, trace) = ca_ransac_traced(&pair.correspondences, 2.25, &bundle, &cfg, &NullClock).unwrap();
    assert_eq!(r.per_batch_best_score.len(), 4);
    assert_eq!(r.batch_probs.len(), 4);
    assert_eq!(r.batch_models.len(), 4);
    assert_eq!(trace.selected.len(), 4);
    // Initial decode plus one step per batch.
    assert_eq!(trace.tape.steps(), 5);
    assert_eq!(&r.inlier_probs, r.batch_probs.last().unwrap());
    assert!(r.inlier_probs.iter().all(|&p| p > 0.0 && p < 1.0));
    assert!(r.per_batch_best_score.iter().all(|s| s.is_finite() && *s > 0.0));
}

#[test]
fn traced_and_plain_runs_agree() {
    let pair = generate_synthetic(&PairSpec::default(), 6).unwrap();
    let bundle = MlpBundle::new_random(2);
    let cfg = small_cfg();
    let plain = ca_ransac(&pair.correspondences, 2.25, &bundle, &cfg, &NullClock).unwrap();
    let (traced, _) = ca_ransac_traced(&pair.correspondences, 2.25, &bundle, &cfg, &NullClock).unwrap();
    assert_eq!(plain, traced);
}

#[test]
fn timing_components_sum_to_total() {
    let pair = generate_synthetic(&PairSpec::default(), 7).unwrap();
    let bundle = MlpBundle::new_random(3);
    let cfg = small_cfg();
    let data = &pair.correspondences;
    let quality: Vec<f64> = data.iter().map(|c| -c.side_info).collect();
    let results = [
        ca_ransac(data, 2.25, &bundle, &cfg, &TickClock::new(7)).unwrap(),
        msac_ransac_baseline(data, 2.25, &cfg, &TickClock::new(7)).unwrap(),
        lm_lo_baseline(data, &quality, 2.25, &cfg, &TickClock::new(7)).unwrap(),
    ];
    for r in &results {
        assert!(r.timing.total > 0);
        assert_eq!(r.timing.component_sum(), r.timing.total);
    }
    let ca = &results[0].timing;
    assert!(ca.state_init > 0 && ca.state_update > 0 && ca.decoder > 0);
    assert_eq!(ca.learned(), ca.state_init + ca.state_update + ca.decoder);
    assert_eq!(results[1].timing.learned(), 0);
    assert_eq!(NullClock.now_ns(), 0);
    assert_eq!(
        ca_ransac(data, 2.25, &bundle, &cfg, &NullClock).unwrap().timing,
        TimingBreakdown::default()
    );
}

#[test]
fn timing_breakdowns_accumulate() {
    let mut a = TimingBreakdown {
        state_init: 1,
        total: 1,
        ..TimingBreakdown::default()
    };
    let b = TimingBreakdown {
        scoring: 2,
        refinement: 3,
        total: 5,
        ..TimingBreakdown::default()
    };
    a.add(&b);
    assert_eq!(a.component_sum(), 6);
    assert_eq!(a.total, 6);
    assert_eq!(a.components().len(), TimingBreakdown::COMPONENTS.len());
}

#[test]
fn essential_needs_calibration() {
    let (data, _, _) = noise_free_pixels(8, 20);
    assert_eq!(
        prepare(&data, None, ModelKind::Essential, 1.5).unwrap_err(),
        Error::MissingCalibration
    );
    let (same, t) = prepare(&data, None, ModelKind::Fundamental, 1.5).unwrap();
    assert_eq!(same, data);
    assert_eq!(t, 2.25);
}

#[test]
fn essential_threshold_uses_geometric_mean_focal() {
    let k1 = CameraIntrinsics::new(400.0, 400.0, 0.0, 0.0).unwrap();
    let k2 = CameraIntrinsics::new(900.0, 900.0, 0.0, 0.0).unwrap();
    let (data, _, _) = noise_free_pixels(9, 10);
    let (_, t) = prepare(&data, Some((&k1, &k2)), ModelKind::Essential, 3.0).unwrap();
    // f_gm = √(400·900) = 600.
    assert!((t - (3.0f64 / 600.0).powi(2)).abs() < 1e-18);
}

#[test]
fn too_few_points_and_bad_configs_are_rejected() {
    let (data, _, _) = noise_free_pixels(10, 7);
    let bundle = MlpBundle::new_random(0);
    let cfg = small_cfg();
    assert!(matches!(
        ca_ransac(&data, 2.25, &bundle, &cfg, &NullClock),
        Err(Error::InsufficientData { needed: 8, available: 7 })
    ));
    assert!(matches!(
        msac_ransac_baseline(&data, 2.25, &cfg, &NullClock),
        Err(Error::InsufficientData { .. })
    ));
    for bad in [
        EngineConfig {
            batches: 0,
            ..cfg.clone()
        },
        EngineConfig {
            batch_size: 0,
            ..cfg.clone()
        },
        EngineConfig {
            msac_threshold_px: -1.0,
            ..cfg.clone()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    assert_eq!(cfg.total_iterations(), 96);
}

#[test]
fn baselines_are_exact_on_noise_free_data() {
    let (data, pose, k) = noise_free_pixels(11, 60);
    let cfg = small_cfg();
    let quality = vec![0.5; data.len()];
    for r in [
        msac_ransac_baseline(&data, 2.25, &cfg, &NullClock).unwrap(),
        lm_lo_baseline(&data, &quality, 2.25, &cfg, &NullClock).unwrap(),
    ] {
        assert!(max_sampson(&r.model, &data) < 1e-10);
        let est = recover_pose(&r.model, &data, 2.25, &k, &k).unwrap();
        assert!(pose_error(&est, &pose) < 1e-4);
        assert!(r.batch_probs.is_empty());
        assert_eq!(r.batch_models.len(), cfg.batches);
        assert!(r.inlier_probs.iter().all(|&p| p > 0.99 && p < 1.0));
    }
}

#[test]
fn best_score_never_drops_across_batches_in_baselines() {
    let pair = generate_synthetic(
        &PairSpec {
            inlier_rate: 0.3,
            ..PairSpec::default()
        },
        12,
    )
    .unwrap();
    let data = &pair.correspondences;
    let cfg = small_cfg();
    let quality: Vec<f64> = data.iter().map(|c| -c.side_info).collect();
    for r in [
        msac_ransac_baseline(data, 2.25, &cfg, &NullClock).unwrap(),
        lm_lo_baseline(data, &quality, 2.25, &cfg, &NullClock).unwrap(),
    ] {
        for w in r.per_batch_best_score.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }
}

#[test]
fn zero_attention_variant_still_updates_states() {
    let pair = generate_synthetic(&PairSpec::default(), 13).unwrap();
    let bundle = MlpBundle::new_random(5);
    let full = small_cfg();
    let ablated = EngineConfig {
        consensus_update: false,
        ..full.clone()
    };
    let a = ca_ransac(&pair.correspondences, 2.25, &bundle, &full, &NullClock).unwrap();
    let b = ca_ransac(&pair.correspondences, 2.25, &bundle, &ablated, &NullClock).unwrap();
    assert_ne!(a.batch_probs, b.batch_probs);
    // Without consensus every batch sees the same zero operand, so the
    // decoded probabilities do not depend on the sampled hypotheses.
    let mut reseeded = ablated.clone();
    reseeded.sampler.rng_seed = 77;
    let c = ca_ransac(&pair.correspondences, 2.25, &bundle, &reseeded, &NullClock).unwrap();
    assert_eq!(b.batch_probs, c.batch_probs);
}

#[test]
fn pose_of_the_zero_model_is_undecidable() {
    let (data, _, k) = noise_free_pixels(14, 20);
    let zero = ModelHypothesis::zero(ModelKind::Fundamental);
    assert_eq!(recover_pose(&zero, &data, 2.25, &k, &k).unwrap_err(), Error::PoseUndecidable);
}
