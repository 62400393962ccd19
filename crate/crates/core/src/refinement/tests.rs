use super::*;
use crate::geometry::{
    decompose_essential, e_to_f, eight_point, f_to_e_upgrade, normalize_by_intrinsics, pose_error,
    sampson_sq, RelativePose,
};
use crate::scoring::score_models;
use crate::testutil::{add_noise, aligned_distance, camera, random_pose, scene, to_pixels};
use alloc::vec;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn essential(pose: &RelativePose) -> ModelHypothesis {
    ModelHypothesis::from_matrix(&pose.essential(), ModelKind::Essential, Provenance::Refined)
}

fn fundamental(pose: &RelativePose) -> ModelHypothesis {
    let k = camera();
    ModelHypothesis::from_matrix(&e_to_f(&pose.essential(), &k, &k), ModelKind::Fundamental, Provenance::Refined)
}

fn assert_on_manifold(m: &ModelHypothesis) {
    let sv = m.m.singular_values();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    assert!((m.m.norm() - 1.0).abs() < 1e-12);
    assert!(s[2] < 1e-8, "{s:?}");
    if m.kind == ModelKind::Essential {
        assert!((s[0] - s[1]).abs() < 1e-8, "{s:?}");
    }
}

fn pose_of_f(f: &ModelHypothesis, pixels: &[Correspondence]) -> RelativePose {
    let k = camera();
    let e = f_to_e_upgrade(f, &k, &k);
    let norm: Vec<Correspondence> = pixels.iter().map(|c| normalize_by_intrinsics(c, &k, &k)).collect();
    decompose_essential(&e, &norm).unwrap()
}

fn perturb(m: &ModelHypothesis, rng: &mut ChaCha8Rng, scale: f64) -> ModelHypothesis {
    let noise = Matrix3::from_fn(|_, _| rng.random_range(-scale..scale));
    ModelHypothesis::from_matrix(&(m.m + noise * m.m.norm()), m.kind, Provenance::Refined)
}

/// Pose nudged by roughly `scale` radians in rotation and translation direction.
fn nudge(pose: &RelativePose, rng: &mut ChaCha8Rng, scale: f64) -> RelativePose {
    let w = nalgebra::Vector3::from_fn(|_, _| rng.random_range(-scale..scale));
    let dt = nalgebra::Vector3::from_fn(|_, _| rng.random_range(-scale..scale));
    RelativePose::new(rotation_from_axis_angle(&w) * pose.rotation, pose.translation + dt)
}

#[test]
fn loss_weights_are_derivatives() {
    for loss in [RobustLoss::Squared, RobustLoss::Cauchy(2.25), RobustLoss::Truncated(2.0)] {
        for s in [0.1, 1.0, 1.7, 3.0] {
            let h = 1e-6;
            let fd = (loss.rho(s + h) - loss.rho(s - h)) / (2.0 * h);
            assert!((fd - loss.weight(s)).abs() < 1e-6, "{loss:?} {s}");
        }
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let pose = random_pose(&mut rng);
        let (model, data) = if trial % 2 == 0 {
            let mut d = scene(&mut rng, &pose, 30);
            add_noise(&mut rng, &mut d, 1e-3);
            (perturb(&essential(&pose), &mut rng, 0.05), d)
        } else {
            let mut d = to_pixels(&scene(&mut rng, &pose, 30), &camera());
            add_noise(&mut rng, &mut d, 1.0);
            (perturb(&fundamental(&pose), &mut rng, 1e-3), d)
        };
        let chart = Chart::new(&model, &data).unwrap();
        let m = chart.matrix();
        let basis = chart.basis();
        for c in &data {
            let (_, de) = residual_and_gradient(&m, c).unwrap();
            let row_scale = (0..chart.dof())
                .map(|k| de.component_mul(&basis[k]).sum().abs())
                .fold(1e-3, f64::max);
            for k in 0..chart.dof() {
                let analytic = de.component_mul(&basis[k]).sum();
                let h = 1e-6;
                let mut d = Params::zeros();
                d[k] = h;
                let plus = signed_residual(&chart.retract(&d).matrix(), c).unwrap();
                d[k] = -h;
                let minus = signed_residual(&chart.retract(&d).matrix(), c).unwrap();
                let fd = (plus - minus) / (2.0 * h);
                assert!(
                    (analytic - fd).abs() / row_scale < 1e-6,
                    "param {k} kind {:?}: {analytic} vs {fd}",
                    model.kind
                );
            }
        }
    }
}

#[test]
fn residual_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let c = Correspondence::new(Vector2::new(0.3, -0.2), Vector2::new(-0.1, 0.4), 0.5).unwrap();
    let (_, g) = residual_and_gradient(&m, &c).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let h = 1e-7;
            let mut mp = m;
            mp[(i, j)] += h;
            let mut mm = m;
            mm[(i, j)] -= h;
            let fd = (signed_residual(&mp, &c).unwrap() - signed_residual(&mm, &c).unwrap()) / (2.0 * h);
            assert!((fd - g[(i, j)]).abs() < 1e-6, "{i}{j}");
        }
    }
}

#[test]
fn chart_reproduces_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let pose = random_pose(&mut rng);
        let e = essential(&pose);
        let chart = Chart::new(&e, &[]).unwrap();
        assert!(aligned_distance(&chart.matrix(), &e.m) < 1e-10);
        let f = fundamental(&pose);
        let data = to_pixels(&scene(&mut rng, &pose, 20), &camera());
        let chart = Chart::new(&f, &data).unwrap();
        assert!(aligned_distance(&chart.matrix(), &f.m) < 1e-10);
    }
}

#[test]
fn ground_truth_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = RefineConfig::default();
    for kind in [ModelKind::Essential, ModelKind::Fundamental] {
        let pose = random_pose(&mut rng);
        let (model, data) = match kind {
            ModelKind::Essential => (essential(&pose), scene(&mut rng, &pose, 40)),
            ModelKind::Fundamental => (fundamental(&pose), to_pixels(&scene(&mut rng, &pose, 40), &camera())),
        };
        let w = vec![1.0; data.len()];
        let out = lm_minimize(&model, &data, &w, RobustLoss::Cauchy(2.25), 50, &cfg).unwrap();
        assert!(out.final_cost() < 1e-16, "{}", out.final_cost());
        assert!(aligned_distance(&out.model.m, &model.m) < 1e-9);
    }
}

#[test]
fn noisy_fundamental_refinement_improves() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = RefineConfig::default();
    let k = camera();
    let mut not_worse = 0;
    let trials = 200;
    for _ in 0..trials {
        let pose = random_pose(&mut rng);
        let mut data = to_pixels(&scene(&mut rng, &pose, 100), &k);
        add_noise(&mut rng, &mut data, 0.5);
        let start = eight_point(&data[..8], ModelKind::Fundamental).unwrap();
        let w = vec![1.0; data.len()];
        let out = lm_minimize(&start, &data, &w, RobustLoss::Cauchy(2.25), 50, &cfg).unwrap();
        assert!(out.final_cost() <= out.initial_cost());
        assert!(out.cost_history.windows(2).all(|p| p[1] < p[0]));
        assert_on_manifold(&out.model);
        let before = pose_error(&pose_of_f(&start, &data), &pose);
        let after = pose_error(&pose_of_f(&out.model, &data), &pose);
        if after <= before {
            not_worse += 1;
        }
    }
    assert!(not_worse as f64 >= 0.9 * trials as f64, "{not_worse}/{trials}");
}

#[test]
fn cauchy_bounds_gross_outlier() {
    // Median over trials: a single pair's pose error after F→E upgrade is too
    // jittery for a per-trial 2× bound.
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let cfg = RefineConfig::default();
    let k = camera();
    let (mut clean_err, mut robust_err) = (Vec::new(), Vec::new());
    for _ in 0..30 {
        let pose = random_pose(&mut rng);
        let mut data = to_pixels(&scene(&mut rng, &pose, 100), &k);
        add_noise(&mut rng, &mut data, 0.5);
        let start = eight_point(&data, ModelKind::Fundamental).unwrap();
        let w = vec![1.0; data.len()];
        let clean = lm_minimize(&start, &data, &w, RobustLoss::Cauchy(2.25), 50, &cfg).unwrap();
        let mut dirty = data.clone();
        dirty.push(Correspondence::new(Vector2::new(50.0, 400.0), Vector2::new(600.0, 20.0), 0.5).unwrap());
        let w = vec![1.0; dirty.len()];
        let robust = lm_minimize(&start, &dirty, &w, RobustLoss::Cauchy(2.25), 50, &cfg).unwrap();
        let plain = lm_minimize(&start, &dirty, &w, RobustLoss::Squared, 50, &cfg).unwrap();
        let e_robust = pose_error(&pose_of_f(&robust.model, &data), &pose);
        let e_plain = pose_error(&pose_of_f(&plain.model, &data), &pose);
        assert!(e_robust < e_plain, "{e_robust} vs unbounded {e_plain}");
        clean_err.push(pose_error(&pose_of_f(&clean.model, &data), &pose));
        robust_err.push(e_robust);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (c, r) = (median(&mut clean_err), median(&mut robust_err));
    assert!(r <= 2.0 * c, "{r} vs {c}");
}

#[test]
fn essential_refinement_converges_from_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = RefineConfig::default();
    for _ in 0..20 {
        let pose = random_pose(&mut rng);
        let data = scene(&mut rng, &pose, 50);
        let gt = essential(&pose);
        let start = perturb(&gt, &mut rng, 0.02);
        let w = vec![1.0; data.len()];
        let out = lm_minimize(&start, &data, &w, RobustLoss::Cauchy(1e-5), 50, &cfg).unwrap();
        assert_on_manifold(&out.model);
        assert!(aligned_distance(&out.model.m, &gt.m) < 1e-8, "{}", aligned_distance(&out.model.m, &gt.m));
    }
}

#[test]
fn underdetermined_and_zero_models_are_rejected() {
    let cfg = RefineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let pose = random_pose(&mut rng);
    let data = scene(&mut rng, &pose, 10);
    let mut w = vec![0.0; 10];
    w[..4].fill(1.0);
    assert_eq!(
        lm_minimize(&essential(&pose), &data, &w, RobustLoss::Squared, 10, &cfg),
        Err(Error::RefineUnderdetermined { effective: 4, dof: 5 })
    );
    assert_eq!(
        lm_minimize(&ModelHypothesis::zero(ModelKind::Essential), &data, &[1.0; 10], RobustLoss::Squared, 10, &cfg),
        Err(Error::ZeroModel)
    );
}

fn contaminated(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> (RelativePose, Vec<Correspondence>, Vec<f64>) {
    let pose = random_pose(rng);
    let mut data = to_pixels(&scene(rng, &pose, n_in), &camera());
    let mut probs = vec![1.0; n_in];
    for _ in 0..n_out {
        data.push(
            Correspondence::new(
                Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                0.9,
            )
            .unwrap()
            .with_label(false),
        );
        probs.push(0.0);
    }
    (pose, data, probs)
}

#[test]
fn refine_alpha_with_indicator_recovers_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let cfg = RefineConfig::default();
    for _ in 0..10 {
        let (pose, data, probs) = contaminated(&mut rng, 60, 40);
        let gt = fundamental(&pose);
        let start = fundamental(&nudge(&pose, &mut rng, 2e-3));
        let out = refine_alpha(&start, &data, &probs, 1.0, 2.25, &cfg).unwrap();
        assert!(aligned_distance(&out.model.m, &gt.m) < 1e-8, "{}", aligned_distance(&out.model.m, &gt.m));
    }
}

#[test]
fn refine_alpha_zero_is_unweighted() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let cfg = RefineConfig::default();
    let (pose, mut data, _) = contaminated(&mut rng, 60, 0);
    add_noise(&mut rng, &mut data, 0.5);
    let probs: Vec<f64> = (0..data.len()).map(|_| rng.random_range(0.01..1.0)).collect();
    let start = fundamental(&nudge(&pose, &mut rng, 2e-3));
    let a = refine_alpha(&start, &data, &probs, 0.0, 2.25, &cfg).unwrap();
    let b = lm_minimize(&start, &data, &vec![1.0; data.len()], RobustLoss::Cauchy(2.25), 50, &cfg).unwrap();
    assert_eq!(a.model, b.model);
}

#[test]
fn excluded_points_have_no_influence() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = RefineConfig::default();
    let (pose, mut data, mut probs) = contaminated(&mut rng, 60, 30);
    add_noise(&mut rng, &mut data, 0.5);
    for p in probs.iter_mut().skip(60) {
        *p = 5e-4;
    }
    let start = fundamental(&nudge(&pose, &mut rng, 2e-3));
    let a = refine_alpha(&start, &data, &probs, 1.0, 2.25, &cfg).unwrap();
    for c in data.iter_mut().skip(60) {
        c.p1.x += 37.0;
        c.p2.y -= 11.0;
    }
    let b = refine_alpha(&start, &data, &probs, 1.0, 2.25, &cfg).unwrap();
    assert_eq!(a.model.m, b.model.m);
}

#[test]
fn cutoff_set_is_monotone_in_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cutoff = RefineConfig::default().weight_cutoff;
    let probs: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut last = usize::MAX;
    for alpha in [0.1, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let kept = probs.iter().filter(|&&p| libm::pow(p, alpha) > cutoff).count();
        assert!(kept <= last);
        last = kept;
    }
}

fn hypotheses(rng: &mut ChaCha8Rng, data: &[Correspondence], m: usize) -> Vec<ModelHypothesis> {
    (0..m)
        .filter_map(|_| {
            let idx = rand::seq::index::sample(rng, data.len(), 8).into_vec();
            let sample: Vec<Correspondence> = idx.iter().map(|&i| data[i].clone()).collect();
            eight_point(&sample, ModelKind::Fundamental).ok()
        })
        .collect()
}

#[test]
fn top_k_changes_exactly_k_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cfg = RefineConfig::default();
    let (_, mut data, _) = contaminated(&mut rng, 150, 50);
    add_noise(&mut rng, &mut data, 0.5);
    let mut models = hypotheses(&mut rng, &data, 256);
    assert_eq!(models.len(), 256);
    let mut s = score_models(&models, &data, 2.25);
    let before = s.clone();
    let replaced = local_optimize_topk(&mut models, &mut s, &data, &cfg);
    assert_eq!(replaced.len(), 4);
    let changed: Vec<usize> = (0..256).filter(|&j| s.s.column(j) != before.s.column(j)).collect();
    let mut r = replaced.clone();
    r.sort_unstable();
    assert_eq!(changed, r);
    for &j in &replaced {
        assert_on_manifold(&models[j]);
        assert_eq!(models[j].provenance, Provenance::Refined);
    }
}

#[test]
fn top_k_covers_all_models_when_k_exceeds_m() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let cfg = RefineConfig {
        top_k: 10,
        ..RefineConfig::default()
    };
    let (_, mut data, _) = contaminated(&mut rng, 100, 0);
    add_noise(&mut rng, &mut data, 0.5);
    let mut models = hypotheses(&mut rng, &data, 3);
    let mut s = score_models(&models, &data, 2.25);
    let mut replaced = local_optimize_topk(&mut models, &mut s, &data, &cfg);
    replaced.sort_unstable();
    assert_eq!(replaced, vec![0, 1, 2]);
}

#[test]
fn top_k_on_zero_scores_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let cfg = RefineConfig::default();
    let (_, data, _) = contaminated(&mut rng, 30, 0);
    let mut models = hypotheses(&mut rng, &data, 6);
    let mut s = ScoreMatrix {
        s: DMatrix::zeros(data.len(), 6),
        threshold: 2.25,
    };
    let before_models = models.clone();
    assert!(local_optimize_topk(&mut models, &mut s, &data, &cfg).is_empty());
    assert_eq!(models, before_models);
    assert!(s.s.iter().all(|&v| v == 0.0));
}

#[test]
fn refine_on_inliers_ignores_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let cfg = RefineConfig::default();
    let (pose, mut data, _) = contaminated(&mut rng, 80, 40);
    // Keep only outliers well clear of the true epipolar lines.
    let gt = fundamental(&pose);
    data.retain(|c| c.gt_inlier == Some(true) || sampson_sq(&gt, c) > 100.0);
    let start = fundamental(&nudge(&pose, &mut rng, 2e-3));
    let out = refine_on_inliers(&start, &data, 2.25, RobustLoss::Cauchy(2.25), 50, &cfg).unwrap();
    for c in data.iter().take(80) {
        assert!(sampson_sq(&out.model, c) < 1e-8);
    }
}

#[test]
fn refine_on_inliers_reselects_lost_inliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let single = RefineConfig {
        inlier_rounds: 1,
        ..RefineConfig::default()
    };
    let mut gained = 0;
    for _ in 0..10 {
        let (pose, mut data, _) = contaminated(&mut rng, 80, 0);
        add_noise(&mut rng, &mut data, 1.0);
        let support = |m: &ModelHypothesis| data.iter().filter(|c| sampson_sq(m, c) < 2.25).count();
        // Grow the perturbation until the start misses a good part of the inliers.
        let mut scale = 1e-3;
        let start = loop {
            let m = fundamental(&nudge(&pose, &mut rng, scale));
            if (20..=70).contains(&support(&m)) {
                break m;
            }
            if support(&m) > 70 {
                scale *= 1.2;
            } else {
                scale *= 0.9;
            }
        };
        let once = refine_on_inliers(&start, &data, 2.25, RobustLoss::Squared, 50, &single).unwrap();
        let out = refine_on_inliers(&start, &data, 2.25, RobustLoss::Squared, 50, &RefineConfig::default()).unwrap();
        assert!(support(&out.model) >= support(&once.model));
        assert!(out.iterations >= once.iterations);
        if support(&out.model) > support(&once.model) {
            gained += 1;
        }
    }
    assert!(gained >= 5, "{gained}");
}
