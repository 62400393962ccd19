//! Losses, synthetic two-view data and the end-to-end training loop.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};

use crate::engine::{ca_ransac, ca_ransac_traced, prepare, recover_pose, EngineConfig, NullClock};
use crate::error::{Error, Result};
use crate::geometry::{
    e_to_f, pose_error, rotation_from_axis_angle, sampson_sq, CameraIntrinsics, Correspondence,
    ModelHypothesis, ModelKind, Provenance, RelativePose,
};
use crate::neural::MlpBundle;
use crate::refinement::refine_alpha;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub pose_clamp_deg: f64,
    /// Sampson distance (pixels) below which a correspondence is an inlier.
    pub inlier_label_px: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    /// Pairs per optimizer step.
    pub pairs_per_step: usize,
    /// Central-difference step for α.
    pub alpha_step: f64,
    /// Train only α; the networks stay fixed.
    pub freeze_mlps: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            lambda: 1.0 / 60.0,
            pose_clamp_deg: 30.0,
            inlier_label_px: 1.0,
            epochs: 10,
            learning_rate: 1e-3,
            momentum: 0.9,
            grad_clip: 1.0,
            pairs_per_step: 8,
            alpha_step: 0.05,
            freeze_mlps: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config("epsilon must lie in (0, 1)".into()));
        }
        if !(self.lambda > 0.0) || !(self.pose_clamp_deg > 0.0) || !(self.inlier_label_px > 0.0) {
            return Err(Error::Config("lambda, pose_clamp_deg and inlier_label_px must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if self.pairs_per_step == 0 || !(self.alpha_step > 0.0) {
            return Err(Error::Config("pairs_per_step and alpha_step must be positive".into()));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy.
pub fn loss_inlier(probs: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| if l { -libm::log(p) } else { -libm::log(1.0 - p) })
        .sum::<f64>()
        / n
}

/// `∂ loss_inlier / ∂ pᵢ`.
pub fn loss_inlier_grad(probs: &[f64], labels: &[bool]) -> Vec<f64> {
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| if l { -1.0 / (p * n) } else { 1.0 / ((1.0 - p) * n) })
        .collect()
}

/// Pose error in degrees clamped at `clamp_deg`; an undecidable pose costs
/// the clamp value.
pub fn loss_pose(estimate: Option<&RelativePose>, gt: &RelativePose, clamp_deg: f64) -> f64 {
    match estimate {
        Some(p) => pose_error(p, gt).min(clamp_deg),
        None => clamp_deg,
    }
}

/// Weight of batch `q` (1-based) out of `q_total`: `(1 − ε)^(Q − q)`.
pub fn batch_weight(q: usize, q_total: usize, epsilon: f64) -> f64 {
    libm::pow(1.0 - epsilon, (q_total - q) as f64)
}

/// `Σ_q (1 − ε)^(Q − q) (L_inl^q + λ L_pose^q)`.
pub fn aggregate_loss(per_batch: &[(f64, f64)], epsilon: f64, lambda: f64) -> f64 {
    let q_total = per_batch.len();
    per_batch
        .iter()
        .enumerate()
        .map(|(i, (inl, pose))| batch_weight(i + 1, q_total, epsilon) * (inl + lambda * pose))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    pub n: usize,
    pub inlier_rate: f64,
    pub noise_sigma_px: f64,
    /// 0 separates inlier and outlier side information completely; 1 gives
    /// the two full beta distributions.
    pub side_overlap: f64,
    pub focal_px: f64,
    pub width: f64,
    pub height: f64,
    pub max_rotation_deg: f64,
    pub inlier_label_px: f64,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            n: 500,
            inlier_rate: 0.5,
            noise_sigma_px: 0.5,
            side_overlap: 0.6,
            focal_px: 600.0,
            width: 640.0,
            height: 480.0,
            max_rotation_deg: 45.0,
            inlier_label_px: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub correspondences: Vec<Correspondence>,
    pub pose: RelativePose,
    pub k1: CameraIntrinsics,
    pub k2: CameraIntrinsics,
    pub inlier_rate: f64,
    pub noise_sigma_px: f64,
}

impl SyntheticPair {
    pub fn labels(&self) -> Vec<bool> {
        self.correspondences
            .iter()
            .map(|c| c.gt_inlier.unwrap_or(false))
            .collect()
    }

    pub fn gt_fundamental(&self) -> ModelHypothesis {
        ModelHypothesis::from_matrix(
            &e_to_f(&self.pose.essential(), &self.k1, &self.k2),
            ModelKind::Fundamental,
            Provenance::Refined,
        )
    }
}

/// Re-applies the label rule: inlier iff the Sampson distance to the true
/// fundamental matrix is below `threshold_px`.
pub fn relabel(correspondences: &mut [Correspondence], f_gt: &ModelHypothesis, threshold_px: f64) {
    let t = threshold_px * threshold_px;
    for c in correspondences.iter_mut() {
        c.gt_inlier = Some(sampson_sq(f_gt, c) < t);
    }
}

const SCENE_DEPTH: f64 = 5.0;
const MIN_TILT_DEG: f64 = 6.0;

fn random_pose(rng: &mut ChaCha8Rng, max_rotation_deg: f64) -> RelativePose {
    // The second camera orbits the scene centre (0, 0, D) and looks at it,
    // so both views share the frustum.
    loop {
        let phi = rng.random_range(0.0..core::f64::consts::TAU);
        let axis = Vector3::new(libm::cos(phi), libm::sin(phi), rng.random_range(-0.3..0.3)).normalize();
        let angle = rng.random_range(MIN_TILT_DEG.min(max_rotation_deg)..=max_rotation_deg).to_radians();
        let r = rotation_from_axis_angle(&(axis * angle));
        let centre = Vector3::new(0.0, 0.0, SCENE_DEPTH);
        let z2 = r.transpose() * Vector3::z();
        let c2 = centre - z2 * SCENE_DEPTH;
        if c2.norm() >= 0.1 * SCENE_DEPTH {
            return RelativePose::new(r, -(r * c2));
        }
    }
}

/// Draws a random image pair according to `spec`.
pub fn generate_synthetic(spec: &PairSpec, seed: u64) -> Result<SyntheticPair> {
    if spec.n < 8 {
        return Err(Error::InfeasibleSynthetic("need at least 8 correspondences"));
    }
    if !(spec.inlier_rate > 0.0 && spec.inlier_rate <= 1.0) {
        return Err(Error::InfeasibleSynthetic("inlier_rate must lie in (0, 1]"));
    }
    if !(spec.noise_sigma_px >= 0.0) || !(0.0..=1.0).contains(&spec.side_overlap) {
        return Err(Error::InfeasibleSynthetic("noise must be ≥ 0 and side_overlap in [0, 1]"));
    }
    if !(spec.focal_px > 0.0 && spec.width > 0.0 && spec.height > 0.0) {
        return Err(Error::InfeasibleSynthetic("camera dimensions must be positive"));
    }
    if !(spec.max_rotation_deg > 0.0 && spec.max_rotation_deg <= 90.0) {
        return Err(Error::InfeasibleSynthetic("max_rotation_deg must lie in (0, 90]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::new(spec.focal_px, spec.focal_px, spec.width / 2.0, spec.height / 2.0)
        .map_err(|_| Error::InfeasibleSynthetic("invalid intrinsics"))?;
    let pose = random_pose(&mut rng, spec.max_rotation_deg);
    let noise = Normal::new(0.0, spec.noise_sigma_px.max(f64::MIN_POSITIVE))
        .map_err(|_| Error::InfeasibleSynthetic("invalid noise"))?;
    let n_in = libm::round(spec.n as f64 * spec.inlier_rate) as usize;
    let inside = |p: &Vector2<f64>| p.x >= 0.0 && p.x < spec.width && p.y >= 0.0 && p.y < spec.height;

    let mut out = Vec::with_capacity(spec.n);
    let mut attempts = 0usize;
    while out.len() < n_in {
        attempts += 1;
        if attempts > 1000 * spec.n {
            return Err(Error::InfeasibleSynthetic("too few points visible in both views"));
        }
        let px = Vector2::new(rng.random_range(0.0..spec.width), rng.random_range(0.0..spec.height));
        let depth = rng.random_range(0.75 * SCENE_DEPTH..1.25 * SCENE_DEPTH);
        let ray = k.normalize(&px);
        let x1 = Vector3::new(ray.x, ray.y, 1.0) * depth;
        let x2 = pose.rotation * x1 + pose.translation;
        if x2.z <= 0.1 {
            continue;
        }
        let p2 = k.denormalize(&Vector2::new(x2.x / x2.z, x2.y / x2.z));
        if !inside(&p2) {
            continue;
        }
        let mut p1 = px;
        let mut p2 = p2;
        if spec.noise_sigma_px > 0.0 {
            p1 += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            p2 += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
        }
        out.push(Correspondence {
            p1,
            p2,
            side_info: 0.0,
            gt_inlier: None,
        });
    }
    while out.len() < spec.n {
        let p1 = Vector2::new(rng.random_range(0.0..spec.width), rng.random_range(0.0..spec.height));
        let p2 = Vector2::new(rng.random_range(0.0..spec.width), rng.random_range(0.0..spec.height));
        out.push(Correspondence {
            p1,
            p2,
            side_info: 0.0,
            gt_inlier: None,
        });
    }

    let mut pair = SyntheticPair {
        correspondences: out,
        pose,
        k1: k,
        k2: k,
        inlier_rate: spec.inlier_rate,
        noise_sigma_px: spec.noise_sigma_px,
    };
    let f_gt = pair.gt_fundamental();
    relabel(&mut pair.correspondences, &f_gt, spec.inlier_label_px);

    // Side information mimics an SNN ratio: low for inliers, high for
    // outliers. Each side is squeezed into its half of [0, 1] as the
    // overlap goes to zero.
    let beta = Beta::new(2.0, 5.0).map_err(|_| Error::InfeasibleSynthetic("beta"))?;
    let spread = 0.5 + 0.5 * spec.side_overlap;
    for c in pair.correspondences.iter_mut() {
        let b: f64 = beta.sample(&mut rng);
        let s = if c.gt_inlier == Some(true) { b * spread } else { 1.0 - b * spread };
        c.side_info = s.clamp(0.0, 1.0);
    }
    // Shuffle so that inliers are not a prefix.
    for i in (1..pair.correspondences.len()).rev() {
        let j = rng.random_range(0..=i);
        pair.correspondences.swap(i, j);
    }
    Ok(pair)
}

/// Training/validation pair specs matching the desk-scale defaults:
/// `n ∈ [n_min, n_max]`, inlier rate in `[rate_min, rate_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub pairs: usize,
    pub n_range: (usize, usize),
    pub inlier_rate_range: (f64, f64),
    pub base: PairSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            pairs: 2000,
            n_range: (200, 1000),
            inlier_rate_range: (0.1, 0.9),
            base: PairSpec::default(),
        }
    }
}

pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<SyntheticPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.pairs)
        .map(|_| {
            let n = rng.random_range(spec.n_range.0..=spec.n_range.1);
            let (lo, hi) = spec.inlier_rate_range;
            let inlier_rate = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let pair_seed = rng.random::<u64>();
            generate_synthetic(
                &PairSpec {
                    n,
                    inlier_rate,
                    ..spec.base.clone()
                },
                pair_seed,
            )
        })
        .collect()
}

/// Per-batch losses of one CA-RANSAC run on `pair`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub per_batch: Vec<(f64, f64)>,
    pub total: f64,
}

/// The pair's correspondences in the engine's model frame with the squared
/// scoring threshold.
pub fn engine_input(pair: &SyntheticPair, engine: &EngineConfig) -> Result<(Vec<Correspondence>, f64)> {
    prepare(
        &pair.correspondences,
        Some((&pair.k1, &pair.k2)),
        engine.model_kind,
        engine.msac_threshold_px,
    )
}

fn pose_loss_of(model: &ModelHypothesis, data: &[Correspondence], pair: &SyntheticPair, threshold: f64, clamp: f64) -> f64 {
    let pose = recover_pose(model, data, threshold, &pair.k1, &pair.k2).ok();
    loss_pose(pose.as_ref(), &pair.pose, clamp)
}

fn pair_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Forward-only loss of `bundle` on `pair`.
pub fn evaluate_pair(bundle: &MlpBundle, pair: &SyntheticPair, engine: &EngineConfig, cfg: &TrainConfig) -> Result<PairLoss> {
    let (data, threshold) = engine_input(pair, engine)?;
    let result = ca_ransac(&data, threshold, bundle, engine, &NullClock)?;
    let labels = pair.labels();
    let per_batch: Vec<(f64, f64)> = result
        .batch_probs
        .iter()
        .zip(&result.batch_models)
        .map(|(p, m)| (loss_inlier(p, &labels), pose_loss_of(m, &data, pair, threshold, cfg.pose_clamp_deg)))
        .collect();
    let total = aggregate_loss(&per_batch, cfg.epsilon, cfg.lambda);
    Ok(PairLoss { per_batch, total })
}

/// Mean loss over a set of pairs with the engine's own seed.
pub fn evaluate_set(bundle: &MlpBundle, pairs: &[SyntheticPair], engine: &EngineConfig, cfg: &TrainConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        let mut e = engine.clone();
        e.sampler.rng_seed = pair_seed(engine.sampler.rng_seed, usize::MAX, i);
        sum += evaluate_pair(bundle, pair, &e, cfg)?.total;
    }
    Ok(sum / pairs.len() as f64)
}

/// Loss and gradient of one pair. The cross-entropy terms are
/// back-propagated through the networks; α gets a central difference of
/// the pose loss over each batch's refinement.
pub fn pair_gradient(
    bundle: &MlpBundle,
    pair: &SyntheticPair,
    engine: &EngineConfig,
    cfg: &TrainConfig,
) -> Result<(PairLoss, MlpBundle)> {
    let (data, threshold) = engine_input(pair, engine)?;
    let (result, trace) = ca_ransac_traced(&data, threshold, bundle, engine, &NullClock)?;
    let labels = pair.labels();
    let q_total = result.batch_probs.len();
    let mut per_batch = Vec::with_capacity(q_total);
    let mut d_probs = Vec::with_capacity(q_total + 1);
    d_probs.push(alloc::vec![0.0; labels.len()]);
    let mut d_alpha = 0.0;
    for q in 0..q_total {
        let w = batch_weight(q + 1, q_total, cfg.epsilon);
        let probs = &result.batch_probs[q];
        let l_inl = loss_inlier(probs, &labels);
        let l_pose = pose_loss_of(&result.batch_models[q], &data, pair, threshold, cfg.pose_clamp_deg);
        per_batch.push((l_inl, l_pose));
        let mut g = loss_inlier_grad(probs, &labels);
        for v in g.iter_mut() {
            *v *= w;
        }
        d_probs.push(g);

        let selected = &trace.selected[q];
        if !selected.is_zero() {
            let h = cfg.alpha_step.min(0.5 * bundle.alpha);
            let pose_at = |alpha: f64| -> f64 {
                match refine_alpha(selected, &data, probs, alpha, threshold, &engine.refine) {
                    Ok(r) => pose_loss_of(&r.model, &data, pair, threshold, cfg.pose_clamp_deg),
                    Err(_) => pose_loss_of(selected, &data, pair, threshold, cfg.pose_clamp_deg),
                }
            };
            let slope = (pose_at(bundle.alpha + h) - pose_at(bundle.alpha - h)) / (2.0 * h);
            d_alpha += w * cfg.lambda * slope;
        }
    }
    let mut grad = if cfg.freeze_mlps {
        bundle.zeros_like()
    } else {
        bundle.backward(&trace.tape, &d_probs)?
    };
    grad.alpha = d_alpha;
    let total = aggregate_loss(&per_batch, cfg.epsilon, cfg.lambda);
    Ok((PairLoss { per_batch, total }, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch; `None` for the starting point.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Bundle with the lowest validation loss (epoch 0 is the start).
    pub bundle: MlpBundle,
    /// Bundle after the last epoch.
    pub last: MlpBundle,
    pub log: Vec<EpochLog>,
}

/// Momentum SGD with gradient-norm clipping over mini-batches of pairs.
///
/// `on_epoch` sees every log record as soon as it is available. Without a
/// validation set the training loss selects the best bundle.
pub fn train(
    initial: &MlpBundle,
    train_set: &[SyntheticPair],
    val_set: &[SyntheticPair],
    engine: &EngineConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    engine.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut bundle = initial.clone();
    let mut velocity = bundle.zeros_like();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);

    let val_or_train = |b: &MlpBundle| -> Result<f64> {
        if val_set.is_empty() {
            evaluate_set(b, train_set, engine, cfg)
        } else {
            evaluate_set(b, val_set, engine, cfg)
        }
    };
    let start_val = val_or_train(&bundle)?;
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let first = EpochLog {
        epoch: 0,
        train_loss: None,
        val_loss: start_val,
        alpha: bundle.alpha,
    };
    on_epoch(&first);
    log.push(first);
    let mut best = (start_val, bundle.clone());

    for epoch in 1..=cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.pairs_per_step) {
            let mut grad = bundle.zeros_like();
            for &idx in chunk {
                let mut e = engine.clone();
                e.sampler.rng_seed = pair_seed(cfg.seed, epoch, idx);
                let (loss, g) = pair_gradient(&bundle, &train_set[idx], &e, cfg)?;
                if !loss.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("non-finite loss on training pair {idx}"),
                    });
                }
                epoch_loss += loss.total;
                grad.add_scaled(&g, 1.0 / chunk.len() as f64);
            }
            let norm = grad.norm();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            if norm > cfg.grad_clip {
                grad.scale(cfg.grad_clip / norm);
            }
            velocity.scale(cfg.momentum);
            velocity.add_scaled(&grad, 1.0);
            bundle.add_scaled(&velocity, -cfg.learning_rate);
            bundle.alpha = bundle.alpha.max(1e-3);
            if !bundle.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite parameters".into(),
                });
            }
        }
        let val_loss = val_or_train(&bundle)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: "non-finite validation loss".into(),
            });
        }
        let record = EpochLog {
            epoch,
            train_loss: Some(epoch_loss / train_set.len() as f64),
            val_loss,
            alpha: bundle.alpha,
        };
        on_epoch(&record);
        log.push(record);
        if val_loss < best.0 {
            best = (val_loss, bundle.clone());
        }
    }
    Ok(TrainOutcome {
        bundle: best.1,
        last: bundle,
        log,
    })
}
