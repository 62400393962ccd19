//! The consensus-adaptive RANSAC loop and the two classical baselines, all
//! run under the same fixed budget of `batches × batch_size` minimal samples.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    decompose_essential, eight_point, f_to_e_upgrade, normalize_by_intrinsics, sampson_sq,
    CameraIntrinsics, Correspondence, ModelHypothesis, ModelKind, Provenance, RelativePose,
};
use crate::neural::{MlpBundle, StateMatrix, Tape};
use crate::refinement::{local_optimize_topk, refine_alpha, refine_on_inliers, RefineConfig, RobustLoss};
use crate::sampling::{build_pool, draw_minimal_batch, ProsacSampler, SamplerConfig};
use crate::scoring::{msac_score, score_models, AttentionOperand, ScoreMatrix};

/// Probabilities reported by the classical engines are MSAC scores clamped
/// into the open unit interval.
const BASELINE_PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub batches: usize,
    /// Minimal samples per batch; overrides `sampler.batch_size`.
    pub batch_size: usize,
    pub model_kind: ModelKind,
    /// Inlier threshold in pixels. Scoring uses its square, divided by the
    /// squared geometric-mean focal length for essential models.
    pub msac_threshold_px: f64,
    /// `false` runs the "−C" ablation: the state transformer sees a zero
    /// attention matrix, so states evolve without consensus information.
    pub consensus_update: bool,
    pub sampler: SamplerConfig,
    pub refine: RefineConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            batches: 4,
            batch_size: 256,
            model_kind: ModelKind::Fundamental,
            msac_threshold_px: 1.5,
            consensus_update: true,
            sampler: SamplerConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batches == 0 {
            return Err(Error::Config("batches must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.msac_threshold_px > 0.0 && self.msac_threshold_px.is_finite()) {
            return Err(Error::Config("msac_threshold_px must be positive".into()));
        }
        self.sampler_config().validate()?;
        self.refine.validate()
    }

    pub fn total_iterations(&self) -> usize {
        self.batches * self.batch_size
    }

    fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            batch_size: self.batch_size,
            ..self.sampler.clone()
        }
    }
}

/// Monotonic nanosecond clock. The core crate has no time source; callers
/// with `std` supply one.
pub trait Clock {
    fn now_ns(&self) -> u64;
}

/// A clock that never advances; every timing reads zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now_ns(&self) -> u64 {
        0
    }
}

/// Wall time per pipeline component, in nanoseconds. Components are
/// measured as consecutive laps, so they sum exactly to `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TimingBreakdown {
    pub state_init: u64,
    pub state_update: u64,
    pub decoder: u64,
    pub sampling: u64,
    pub solving: u64,
    pub scoring: u64,
    pub attention: u64,
    pub local_optimization: u64,
    pub refinement: u64,
    pub total: u64,
}

impl TimingBreakdown {
    pub const COMPONENTS: [&'static str; 9] = [
        "state_init",
        "state_update",
        "decoder",
        "sampling",
        "solving",
        "scoring",
        "attention",
        "local_optimization",
        "refinement",
    ];

    pub fn components(&self) -> [u64; 9] {
        [
            self.state_init,
            self.state_update,
            self.decoder,
            self.sampling,
            self.solving,
            self.scoring,
            self.attention,
            self.local_optimization,
            self.refinement,
        ]
    }

    pub fn component_sum(&self) -> u64 {
        self.components().iter().sum()
    }

    /// Time spent in the three learned networks.
    pub fn learned(&self) -> u64 {
        self.state_init + self.state_update + self.decoder
    }

    pub fn add(&mut self, other: &TimingBreakdown) {
        self.state_init += other.state_init;
        self.state_update += other.state_update;
        self.decoder += other.decoder;
        self.sampling += other.sampling;
        self.solving += other.solving;
        self.scoring += other.scoring;
        self.attention += other.attention;
        self.local_optimization += other.local_optimization;
        self.refinement += other.refinement;
        self.total += other.total;
    }
}

#[derive(Clone, Copy)]
enum Component {
    StateInit,
    StateUpdate,
    Decoder,
    Sampling,
    Solving,
    Scoring,
    Attention,
    LocalOptimization,
    Refinement,
}

struct Laps<'a> {
    clock: &'a dyn Clock,
    start: u64,
    last: u64,
    t: TimingBreakdown,
}

impl<'a> Laps<'a> {
    fn new(clock: &'a dyn Clock) -> Self {
        let now = clock.now_ns();
        Self {
            clock,
            start: now,
            last: now,
            t: TimingBreakdown::default(),
        }
    }

    fn lap(&mut self, c: Component) {
        let now = self.clock.now_ns();
        let d = now.saturating_sub(self.last);
        self.last = now;
        let slot = match c {
            Component::StateInit => &mut self.t.state_init,
            Component::StateUpdate => &mut self.t.state_update,
            Component::Decoder => &mut self.t.decoder,
            Component::Sampling => &mut self.t.sampling,
            Component::Solving => &mut self.t.solving,
            Component::Scoring => &mut self.t.scoring,
            Component::Attention => &mut self.t.attention,
            Component::LocalOptimization => &mut self.t.local_optimization,
            Component::Refinement => &mut self.t.refinement,
        };
        *slot += d;
    }

    fn finish(mut self) -> TimingBreakdown {
        self.t.total = self.last.saturating_sub(self.start);
        self.t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub model: ModelHypothesis,
    /// Final per-correspondence inlier probabilities, in `(0, 1)`.
    pub inlier_probs: Vec<f64>,
    /// Total consensus of the selected hypothesis in every batch.
    pub per_batch_best_score: Vec<f64>,
    /// Decoded probabilities after every batch (CA-RANSAC only).
    pub batch_probs: Vec<Vec<f64>>,
    /// Best model after every batch's refinement.
    pub batch_models: Vec<ModelHypothesis>,
    /// Squared-residual threshold used for scoring.
    pub threshold: f64,
    pub timing: TimingBreakdown,
}

/// Extra records of a CA-RANSAC forward pass needed for training.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub tape: Tape,
    /// Probabilities decoded from the initial state (before batch 1).
    pub initial_probs: Vec<f64>,
    /// Top-one hypothesis of every batch before `Refine_α`.
    pub selected: Vec<ModelHypothesis>,
}

/// Correspondences in the model's native frame and the matching squared
/// threshold. Essential estimation normalizes by the intrinsics; the pixel
/// threshold is divided by the geometric-mean focal length.
pub fn prepare(
    data: &[Correspondence],
    intrinsics: Option<(&CameraIntrinsics, &CameraIntrinsics)>,
    kind: ModelKind,
    threshold_px: f64,
) -> Result<(Vec<Correspondence>, f64)> {
    match kind {
        ModelKind::Fundamental => Ok((data.to_vec(), threshold_px * threshold_px)),
        ModelKind::Essential => {
            let (k1, k2) = intrinsics.ok_or(Error::MissingCalibration)?;
            let f_gm = libm::sqrt(libm::sqrt(k1.fx * k1.fy * k2.fx * k2.fy));
            let t = threshold_px / f_gm;
            let norm = data.iter().map(|c| normalize_by_intrinsics(c, k1, k2)).collect();
            Ok((norm, t * t))
        }
    }
}

fn solve_batch(samples: &[Vec<usize>], data: &[Correspondence], kind: ModelKind) -> Vec<ModelHypothesis> {
    let mut buf = Vec::with_capacity(8);
    samples
        .iter()
        .filter_map(|idx| {
            buf.clear();
            buf.extend(idx.iter().map(|&i| data[i].clone()));
            eight_point(&buf, kind).ok().map(|mut m| {
                m.provenance = Provenance::MinimalSample(idx.clone());
                m
            })
        })
        .collect()
}

/// CA-RANSAC on correspondences already in the model's frame (see
/// [`prepare`]) with squared threshold `threshold`.
pub fn ca_ransac(
    data: &[Correspondence],
    threshold: f64,
    bundle: &MlpBundle,
    cfg: &EngineConfig,
    clock: &dyn Clock,
) -> Result<EstimationResult> {
    run_ca(data, threshold, bundle, cfg, clock, None)
}

/// [`ca_ransac`] that additionally records everything training needs.
pub fn ca_ransac_traced(
    data: &[Correspondence],
    threshold: f64,
    bundle: &MlpBundle,
    cfg: &EngineConfig,
    clock: &dyn Clock,
) -> Result<(EstimationResult, Trace)> {
    let mut trace = Trace::default();
    let result = run_ca(data, threshold, bundle, cfg, clock, Some(&mut trace))?;
    Ok((result, trace))
}

fn run_ca(
    data: &[Correspondence],
    threshold: f64,
    bundle: &MlpBundle,
    cfg: &EngineConfig,
    clock: &dyn Clock,
    mut trace: Option<&mut Trace>,
) -> Result<EstimationResult> {
    cfg.validate()?;
    let sampler = cfg.sampler_config();
    let n = data.len();
    if n < sampler.sample_size {
        return Err(Error::InsufficientData {
            needed: sampler.sample_size,
            available: n,
        });
    }
    let kind = cfg.model_kind;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.rng_seed);
    let mut laps = Laps::new(clock);

    let side: Vec<f64> = data.iter().map(|c| c.side_info).collect();
    let mut state: StateMatrix = match trace.as_deref_mut() {
        Some(t) => bundle.init_state_recorded(&side, &mut t.tape),
        None => bundle.init_state(&side),
    };
    laps.lap(Component::StateInit);
    let mut probs = match trace.as_deref_mut() {
        Some(t) => bundle.decode_recorded(&state, &mut t.tape),
        None => bundle.decode_inliers(&state),
    };
    if let Some(t) = trace.as_deref_mut() {
        t.initial_probs = probs.clone();
    }
    laps.lap(Component::Decoder);

    let mut best = ModelHypothesis::zero(kind);
    let mut per_batch_best_score = Vec::with_capacity(cfg.batches);
    let mut batch_probs = Vec::with_capacity(cfg.batches);
    let mut batch_models = Vec::with_capacity(cfg.batches);

    for _ in 0..cfg.batches {
        let pool = build_pool(&probs, &sampler)?;
        let samples = draw_minimal_batch(&pool, &sampler, &mut rng)?;
        laps.lap(Component::Sampling);

        let mut models = solve_batch(&samples, data, kind);
        models.push(best.clone());
        laps.lap(Component::Solving);

        let mut s = score_models(&models, data, threshold);
        laps.lap(Component::Scoring);

        local_optimize_topk(&mut models, &mut s, data, &cfg.refine);
        laps.lap(Component::LocalOptimization);

        let attention = if cfg.consensus_update {
            AttentionOperand::factored(&s)
        } else {
            AttentionOperand::factored(&ScoreMatrix {
                s: nalgebra::DMatrix::zeros(n, 1),
                threshold,
            })
        };
        laps.lap(Component::Attention);

        state = match trace.as_deref_mut() {
            Some(t) => bundle.state_transform_recorded(&state, &attention, &mut t.tape),
            None => bundle.state_transform(&state, &attention),
        };
        laps.lap(Component::StateUpdate);

        probs = match trace.as_deref_mut() {
            Some(t) => bundle.decode_recorded(&state, &mut t.tape),
            None => bundle.decode_inliers(&state),
        };
        laps.lap(Component::Decoder);

        let j = s.best_column().expect("batch always holds the carried model");
        per_batch_best_score.push(s.s.column(j).sum());
        let selected = models.swap_remove(j);
        best = if selected.is_zero() {
            selected.clone()
        } else {
            match refine_alpha(&selected, data, &probs, bundle.alpha, threshold, &cfg.refine) {
                Ok(r) => r.model,
                Err(_) => selected.clone(),
            }
        };
        if let Some(t) = trace.as_deref_mut() {
            t.selected.push(selected);
        }
        batch_probs.push(probs.clone());
        batch_models.push(best.clone());
        laps.lap(Component::Refinement);
    }

    Ok(EstimationResult {
        model: best,
        inlier_probs: probs,
        per_batch_best_score,
        batch_probs,
        batch_models,
        threshold,
        timing: laps.finish(),
    })
}

fn total_score(model: &ModelHypothesis, data: &[Correspondence], threshold: f64) -> f64 {
    data.iter()
        .map(|c| msac_score(sampson_sq(model, c), threshold))
        .sum()
}

fn baseline_probs(model: &ModelHypothesis, data: &[Correspondence], threshold: f64) -> Vec<f64> {
    data.iter()
        .map(|c| {
            msac_score(sampson_sq(model, c), threshold).clamp(BASELINE_PROB_EPS, 1.0 - BASELINE_PROB_EPS)
        })
        .collect()
}

/// Final unweighted Cauchy refinement on the model's MSAC inliers.
fn final_refine(model: ModelHypothesis, data: &[Correspondence], threshold: f64, cfg: &EngineConfig) -> ModelHypothesis {
    if model.is_zero() {
        return model;
    }
    let loss = RobustLoss::Cauchy(cfg.refine.cauchy_scale.unwrap_or(threshold));
    match refine_on_inliers(&model, data, threshold, loss, cfg.refine.max_iterations, &cfg.refine) {
        Ok(r) => r.model,
        Err(_) => model,
    }
}

/// Plain MSAC: uniform minimal samples, best total score wins, then a final
/// robust refinement on the inliers.
pub fn msac_ransac_baseline(
    data: &[Correspondence],
    threshold: f64,
    cfg: &EngineConfig,
    clock: &dyn Clock,
) -> Result<EstimationResult> {
    cfg.validate()?;
    let sampler = cfg.sampler_config();
    let n = data.len();
    if n < sampler.sample_size {
        return Err(Error::InsufficientData {
            needed: sampler.sample_size,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.rng_seed);
    let mut laps = Laps::new(clock);
    let all: Vec<usize> = (0..n).collect();
    let mut best = ModelHypothesis::zero(cfg.model_kind);
    let mut best_score = 0.0;
    let mut per_batch_best_score = Vec::with_capacity(cfg.batches);
    let mut batch_models = Vec::with_capacity(cfg.batches);
    for _ in 0..cfg.batches {
        let samples = draw_minimal_batch(&all, &sampler, &mut rng)?;
        laps.lap(Component::Sampling);
        let models = solve_batch(&samples, data, cfg.model_kind);
        laps.lap(Component::Solving);
        for m in models {
            let score = total_score(&m, data, threshold);
            if score > best_score {
                best_score = score;
                best = m;
            }
        }
        laps.lap(Component::Scoring);
        per_batch_best_score.push(best_score);
        batch_models.push(best.clone());
    }
    let model = final_refine(best, data, threshold, cfg);
    laps.lap(Component::Refinement);
    let inlier_probs = baseline_probs(&model, data, threshold);
    Ok(EstimationResult {
        model,
        inlier_probs,
        per_batch_best_score,
        batch_probs: Vec::new(),
        batch_models,
        threshold,
        timing: laps.finish(),
    })
}

/// LO-RANSAC with PROSAC ordering by `quality` (higher is better) and an LM
/// local optimization on every new best model.
pub fn lm_lo_baseline(
    data: &[Correspondence],
    quality: &[f64],
    threshold: f64,
    cfg: &EngineConfig,
    clock: &dyn Clock,
) -> Result<EstimationResult> {
    cfg.validate()?;
    assert_eq!(data.len(), quality.len(), "one quality value per correspondence");
    let sampler = cfg.sampler_config();
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.rng_seed);
    let mut laps = Laps::new(clock);
    let budget = cfg.total_iterations();
    let mut prosac = ProsacSampler::new(quality, sampler.sample_size, budget as u64)?;
    let lo_loss = RobustLoss::Truncated(threshold);
    let mut best = ModelHypothesis::zero(cfg.model_kind);
    let mut best_score = 0.0;
    let mut per_batch_best_score = Vec::with_capacity(cfg.batches);
    let mut batch_models = Vec::with_capacity(cfg.batches);
    for _ in 0..cfg.batches {
        for _ in 0..cfg.batch_size {
            let sample = prosac.next_sample(&mut rng);
            laps.lap(Component::Sampling);
            let models = solve_batch(core::slice::from_ref(&sample), data, cfg.model_kind);
            laps.lap(Component::Solving);
            let Some(m) = models.into_iter().next() else {
                continue;
            };
            let score = total_score(&m, data, threshold);
            laps.lap(Component::Scoring);
            if score <= best_score {
                continue;
            }
            best_score = score;
            best = m;
            if let Ok(r) = refine_on_inliers(&best, data, threshold, lo_loss, cfg.refine.lo_iterations, &cfg.refine) {
                let s = total_score(&r.model, data, threshold);
                if s > best_score {
                    best_score = s;
                    best = r.model;
                }
            }
            laps.lap(Component::LocalOptimization);
        }
        per_batch_best_score.push(best_score);
        batch_models.push(best.clone());
    }
    let model = final_refine(best, data, threshold, cfg);
    laps.lap(Component::Refinement);
    let inlier_probs = baseline_probs(&model, data, threshold);
    Ok(EstimationResult {
        model,
        inlier_probs,
        per_batch_best_score,
        batch_probs: Vec::new(),
        batch_models,
        threshold,
        timing: laps.finish(),
    })
}

/// Relative pose of an estimated model. Fundamental models are upgraded with
/// the intrinsics first; `data` is in the model's frame (see [`prepare`]) and
/// the points scoring inside `threshold` vote on cheirality.
pub fn recover_pose(
    model: &ModelHypothesis,
    data: &[Correspondence],
    threshold: f64,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> Result<RelativePose> {
    if model.is_zero() {
        return Err(Error::PoseUndecidable);
    }
    let inliers: Vec<Correspondence> = data
        .iter()
        .filter(|c| sampson_sq(model, c) < threshold)
        .cloned()
        .collect();
    match model.kind {
        ModelKind::Essential => decompose_essential(model, &inliers),
        ModelKind::Fundamental => {
            let e = f_to_e_upgrade(model, k1, k2);
            let norm: Vec<Correspondence> = inliers.iter().map(|c| normalize_by_intrinsics(c, k1, k2)).collect();
            decompose_essential(&e, &norm)
        }
    }
}

#[cfg(test)]
mod tests;
