//! Pose-accuracy metrics and the fixed-budget method comparison.

use alloc::vec::Vec;

use crate::engine::{
    ca_ransac, lm_lo_baseline, msac_ransac_baseline, recover_pose, Clock, EngineConfig, TimingBreakdown,
};
use crate::error::{Error, Result};
use crate::geometry::pose_error;
use crate::neural::MlpBundle;
use crate::training::{engine_input, SyntheticPair};

/// Error assigned to a pair on which a method fails outright.
pub const FAILURE_ERROR_DEG: f64 = 180.0;

fn check(errors: &[f64]) -> Result<()> {
    if errors.is_empty() {
        return Err(Error::EmptyErrors);
    }
    if errors.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::Config("pose errors must be non-negative".into()));
    }
    Ok(())
}

/// Mean of `max(0, 1 − e/θ)` over pairs, in percent.
pub fn auc_at(errors_deg: &[f64], threshold_deg: f64) -> Result<f64> {
    check(errors_deg)?;
    let sum: f64 = errors_deg.iter().map(|e| (1.0 - e / threshold_deg).max(0.0)).sum();
    Ok(100.0 * sum / errors_deg.len() as f64)
}

/// Percentage of pairs with error strictly below the threshold.
pub fn map_at(errors_deg: &[f64], threshold_deg: f64) -> Result<f64> {
    check(errors_deg)?;
    let below = errors_deg.iter().filter(|&&e| e < threshold_deg).count();
    Ok(100.0 * below as f64 / errors_deg.len() as f64)
}

pub fn median(values: &[f64]) -> Result<f64> {
    check(values)?;
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    CaRansac,
    Msac,
    LmLo,
    /// Returns the ground-truth pose; a sanity check of the harness.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::CaRansac, Method::Msac, Method::LmLo, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::CaRansac => "ca",
            Method::Msac => "msac",
            Method::LmLo => "lmlo",
            Method::Oracle => "oracle",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: Method,
    pub auc5: f64,
    pub auc1: f64,
    pub map20: f64,
    pub median_deg: f64,
    pub avg_deg: f64,
    /// One entry per (pair, seed) run, pair-major.
    pub per_pair_errors: Vec<f64>,
    /// Runs that produced no pose and were scored at 180°.
    pub failures: usize,
    pub timing: TimingBreakdown,
}

impl MetricReport {
    pub fn from_errors(method: Method, errors: Vec<f64>, failures: usize, timing: TimingBreakdown) -> Result<Self> {
        Ok(Self {
            method,
            auc5: auc_at(&errors, 5.0)?,
            auc1: auc_at(&errors, 1.0)?,
            map20: map_at(&errors, 20.0)?,
            median_deg: median(&errors)?,
            avg_deg: errors.iter().sum::<f64>() / errors.len() as f64,
            per_pair_errors: errors,
            failures,
            timing,
        })
    }

    /// Share of total runtime spent in the learned networks, in `[0, 1]`.
    pub fn learned_share(&self) -> f64 {
        if self.timing.total == 0 {
            0.0
        } else {
            self.timing.learned() as f64 / self.timing.total as f64
        }
    }
}

/// Outcome of one method on one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRun {
    /// `None` when the method produced no decidable pose.
    pub error_deg: Option<f64>,
    pub timing: TimingBreakdown,
}

impl PairRun {
    pub fn scored_error(&self) -> f64 {
        self.error_deg.unwrap_or(FAILURE_ERROR_DEG)
    }
}

/// Seed of run `(pair, seed)`; every method sees the same one.
pub fn run_seed(seed: u64, pair_index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (pair_index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Runs `method` on one pair. Side information doubles as the PROSAC
/// quality (lower side information ranks first).
pub fn run_method(
    method: Method,
    pair: &SyntheticPair,
    bundle: Option<&MlpBundle>,
    engine: &EngineConfig,
    seed: u64,
    clock: &dyn Clock,
) -> Result<PairRun> {
    if method == Method::Oracle {
        return Ok(PairRun {
            error_deg: Some(pose_error(&pair.pose, &pair.pose)),
            timing: TimingBreakdown::default(),
        });
    }
    let mut cfg = engine.clone();
    cfg.sampler.rng_seed = seed;
    let (data, threshold) = engine_input(pair, &cfg)?;
    let result = match method {
        Method::CaRansac => {
            let bundle = bundle.ok_or(Error::Weights("CA-RANSAC needs trained weights".into()))?;
            ca_ransac(&data, threshold, bundle, &cfg, clock)
        }
        Method::Msac => msac_ransac_baseline(&data, threshold, &cfg, clock),
        Method::LmLo => {
            let quality: Vec<f64> = data.iter().map(|c| -c.side_info).collect();
            lm_lo_baseline(&data, &quality, threshold, &cfg, clock)
        }
        Method::Oracle => unreachable!(),
    };
    let result = match result {
        Ok(r) => r,
        Err(Error::InsufficientData { .. }) | Err(Error::Degenerate) => {
            return Ok(PairRun {
                error_deg: None,
                timing: TimingBreakdown::default(),
            })
        }
        Err(e) => return Err(e),
    };
    let pose = recover_pose(&result.model, &data, threshold, &pair.k1, &pair.k2).ok();
    Ok(PairRun {
        error_deg: pose.map(|p| pose_error(&p, &pair.pose)),
        timing: result.timing,
    })
}

/// Aggregates runs (pair-major) into a report.
pub fn report_from_runs(method: Method, runs: &[PairRun]) -> Result<MetricReport> {
    let mut timing = TimingBreakdown::default();
    for r in runs {
        timing.add(&r.timing);
    }
    let failures = runs.iter().filter(|r| r.error_deg.is_none()).count();
    MetricReport::from_errors(method, runs.iter().map(PairRun::scored_error).collect(), failures, timing)
}

/// Every method on every pair under every seed, all with the same budget
/// `engine.batches × engine.batch_size`.
pub fn benchmark(
    methods: &[Method],
    pairs: &[SyntheticPair],
    bundle: Option<&MlpBundle>,
    engine: &EngineConfig,
    seeds: &[u64],
    clock: &dyn Clock,
) -> Result<Vec<MetricReport>> {
    engine.validate()?;
    methods
        .iter()
        .map(|&method| {
            let mut runs = Vec::with_capacity(pairs.len() * seeds.len());
            for (i, pair) in pairs.iter().enumerate() {
                for &seed in seeds {
                    runs.push(run_method(method, pair, bundle, engine, run_seed(seed, i), clock)?);
                }
            }
            report_from_runs(method, &runs)
        })
        .collect()
}
