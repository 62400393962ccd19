//! Subcommands: `synth`, `train`, `estimate` and `bench`.
//!
//! Every command is deterministic under fixed seeds. Files a command writes
//! never contain wall-clock timings; those go to stderr or `.timing`
//! sidecars.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use carsac_core::engine::{ca_ransac, lm_lo_baseline, msac_ransac_baseline, prepare, recover_pose, Clock, EngineConfig};
use carsac_core::evaluation::{report_from_runs, run_method, run_seed, MetricReport, Method};
use carsac_core::geometry::{pose_error, ModelKind};
use carsac_core::neural::{load_weights, save_weights, MlpBundle};
use carsac_core::training::{generate_dataset, train, DatasetSpec, EpochLog, PairSpec, SyntheticPair};

use crate::config::{parse_model_kind, RunConfig};
use crate::formats::{load, load_dataset, parse_calib, parse_matches, parse_pose, save_dataset};
use crate::report::{bench_table, bench_timing_text, timing_path, timing_text, EstimateReport};
use crate::WallClock;

#[derive(Debug, Parser)]
#[command(name = "carsac", version, about = "Consensus-adaptive RANSAC for two-view geometry")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train network weights on a dataset.
    Train(TrainArgs),
    /// Estimate a two-view model for one correspondence file.
    Estimate(EstimateArgs),
    /// Compare methods on a dataset.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub pairs: usize,
    /// Inlier rate, or `lo:hi` for a uniform range.
    #[arg(long, default_value = "0.1:0.9")]
    pub inlier_rate: String,
    /// Inlier noise standard deviation in pixels.
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    /// Correspondences per pair, or `lo:hi`.
    #[arg(long, default_value = "200:1000")]
    pub n: String,
    /// Overlap of inlier and outlier side information in [0, 1].
    #[arg(long, default_value_t = 0.6)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Engine settings shared by `train`, `estimate` and `bench`. Flags
/// override values from `--config`.
#[derive(Debug, Args)]
pub struct EngineArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model_kind: Option<String>,
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Inlier threshold in pixels.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Disable the consensus update of the latent states.
    #[arg(long)]
    pub no_consensus: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset; without it the training loss selects the best epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from these weights instead of a random initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output weight file.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log; defaults to `<out>.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub matches: PathBuf,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Ground-truth pose; defaults to the `.pose` file next to the matches.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// ca, msac or lmlo.
    #[arg(long, default_value = "ca")]
    pub method: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated methods out of ca, msac, lmlo, oracle.
    #[arg(long, default_value = "ca,msac,lmlo")]
    pub methods: String,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Iteration budget as `batches x batch_size`, e.g. `4x256`.
    #[arg(long)]
    pub budget: Option<String>,
    /// Comma-separated run seeds.
    #[arg(long, default_value = "0")]
    pub seeds: String,
    /// Table file (without timings); timings go to `<out>.timing`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Bench(a) => cmd_bench(&a),
    }
}

/// `value` or `lo:hi`.
pub fn parse_range<T: FromStr + PartialOrd + Copy>(s: &str) -> Result<(T, T)> {
    let one = |t: &str| t.trim().parse::<T>().map_err(|_| anyhow!("invalid value '{t}'"));
    let (lo, hi) = match s.split_once(':') {
        Some((a, b)) => (one(a)?, one(b)?),
        None => {
            let v = one(s)?;
            (v, v)
        }
    };
    ensure!(lo <= hi, "empty range '{s}'");
    Ok((lo, hi))
}

/// `BxS`, e.g. `4x256`.
pub fn parse_budget(s: &str) -> Result<(usize, usize)> {
    let (b, m) = s
        .split_once('x')
        .ok_or_else(|| anyhow!("budget must look like 4x256, found '{s}'"))?;
    let b = b.trim().parse().map_err(|_| anyhow!("invalid batch count in budget '{s}'"))?;
    let m = m.trim().parse().map_err(|_| anyhow!("invalid batch size in budget '{s}'"))?;
    Ok((b, m))
}

pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let methods = s
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(|m| {
            Method::from_name(m).ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                anyhow!("unknown method '{m}'; valid methods: {}", valid.join(", "))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ensure!(!methods.is_empty(), "no methods given");
    Ok(methods)
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| anyhow!("invalid seed '{t}'")))
        .collect::<Result<Vec<u64>>>()?;
    ensure!(!seeds.is_empty(), "no seeds given");
    Ok(seeds)
}

fn run_config(args: &EngineArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let e = &mut cfg.engine;
    if let Some(k) = &args.model_kind {
        e.model_kind = parse_model_kind(k)?;
    }
    if let Some(b) = args.batches {
        e.batches = b;
    }
    if let Some(m) = args.batch_size {
        e.batch_size = m;
    }
    if let Some(t) = args.threshold {
        e.msac_threshold_px = t;
    }
    if args.no_consensus {
        e.consensus_update = false;
    }
    Ok(cfg)
}

fn load_bundle(path: Option<&Path>) -> Result<MlpBundle> {
    let path = path.ok_or_else(|| anyhow!("no weights given (--weights); create them with `carsac train`"))?;
    ensure!(
        path.is_file(),
        "weight file {} not found; create it with `carsac train`",
        path.display()
    );
    load(path, |t| Ok(load_weights(t)?))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    ensure!(a.pairs > 0, "--pairs must be at least 1");
    let spec = DatasetSpec {
        pairs: a.pairs,
        n_range: parse_range(&a.n).context("--n")?,
        inlier_rate_range: parse_range(&a.inlier_rate).context("--inlier-rate")?,
        base: PairSpec {
            noise_sigma_px: a.noise,
            side_overlap: a.overlap,
            ..PairSpec::default()
        },
    };
    let pairs = generate_dataset(&spec, a.seed)?;
    save_dataset(&a.out_dir, &pairs)?;
    eprintln!("wrote {} pairs to {}", pairs.len(), a.out_dir.display());
    Ok(())
}

pub fn format_epoch(e: &EpochLog) -> String {
    let train = e.train_loss.map_or("-".to_string(), |l| format!("{l:?}"));
    format!("{} {} {:?} {:?}", e.epoch, train, e.val_loss, e.alpha)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = run_config(&a.engine)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let train_set = load_dataset(&a.data)?;
    let val_set = match &a.val {
        Some(dir) => load_dataset(dir)?,
        None => Vec::new(),
    };
    let initial = match &a.init {
        Some(path) => load_bundle(Some(path))?,
        None => MlpBundle::new_random(cfg.train.seed),
    };
    let mut log = String::from("epoch train_loss val_loss alpha\n");
    let outcome = train(&initial, &train_set, &val_set, &cfg.engine, &cfg.train, |e| {
        let line = format_epoch(e);
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    write_file(&a.out, &save_weights(&outcome.bundle))?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log");
        PathBuf::from(s)
    });
    write_file(&log_path, &log)?;
    Ok(())
}

pub fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    let mut cfg = run_config(&a.engine)?;
    if let Some(s) = a.seed {
        cfg.engine.sampler.rng_seed = s;
    }
    cfg.engine.validate()?;
    let method = parse_methods(&a.method)?;
    let method = match method.as_slice() {
        [m] if *m != Method::Oracle => *m,
        _ => bail!("--method takes one of ca, msac, lmlo"),
    };
    // Load weights before any heavy work so a missing file fails fast.
    let bundle = match method {
        Method::CaRansac => Some(load_bundle(a.weights.as_deref())?),
        _ => None,
    };
    let data = load(&a.matches, parse_matches)?;
    let calib = a.calib.as_deref().map(|p| load(p, parse_calib)).transpose()?;
    if cfg.engine.model_kind == ModelKind::Essential && calib.is_none() {
        bail!("essential estimation needs --calib");
    }
    let gt_path = a.pose.clone().unwrap_or_else(|| a.matches.with_extension("pose"));
    let gt = if a.pose.is_some() || gt_path.is_file() {
        Some(load(&gt_path, parse_pose)?)
    } else {
        None
    };

    let (prepared, threshold) = prepare(
        &data,
        calib.as_ref().map(|(k1, k2)| (k1, k2)),
        cfg.engine.model_kind,
        cfg.engine.msac_threshold_px,
    )?;
    let clock = WallClock::new();
    let result = match method {
        Method::CaRansac => ca_ransac(&prepared, threshold, bundle.as_ref().unwrap(), &cfg.engine, &clock)?,
        Method::Msac => msac_ransac_baseline(&prepared, threshold, &cfg.engine, &clock)?,
        Method::LmLo => {
            let quality: Vec<f64> = prepared.iter().map(|c| -c.side_info).collect();
            lm_lo_baseline(&prepared, &quality, threshold, &cfg.engine, &clock)?
        }
        Method::Oracle => unreachable!(),
    };
    let pose = match &calib {
        Some((k1, k2)) => Some(recover_pose(&result.model, &prepared, threshold, k1, k2)?),
        None => None,
    };
    let pose_error_deg = match (&pose, &gt) {
        (Some(p), Some(g)) => Some(pose_error(p, g)),
        _ => None,
    };
    let text = EstimateReport {
        method: method.name(),
        result: &result,
        pose: pose.as_ref(),
        pose_error_deg,
    }
    .to_text();
    let timing = timing_text(&result.timing);
    match &a.report {
        Some(path) => {
            write_file(path, &text)?;
            write_file(&timing_path(path), &timing)?;
        }
        None => {
            print!("{text}");
            eprint!("{timing}");
        }
    }
    Ok(())
}

/// Runs every method on every pair and seed, fanning pairs out over
/// threads. Results do not depend on the thread count.
pub fn benchmark_parallel(
    methods: &[Method],
    pairs: &[SyntheticPair],
    bundle: Option<&MlpBundle>,
    engine: &EngineConfig,
    seeds: &[u64],
    clock: &(dyn Clock + Sync),
) -> Result<Vec<MetricReport>> {
    engine.validate()?;
    methods
        .iter()
        .map(|&method| {
            let runs = pairs
                .par_iter()
                .enumerate()
                .map(|(i, pair)| {
                    seeds
                        .iter()
                        .map(|&s| run_method(method, pair, bundle, engine, run_seed(s, i), clock))
                        .collect::<carsac_core::Result<Vec<_>>>()
                })
                .collect::<carsac_core::Result<Vec<_>>>()?;
            let runs: Vec<_> = runs.into_iter().flatten().collect();
            Ok(report_from_runs(method, &runs)?)
        })
        .collect()
}

pub fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let mut cfg = run_config(&a.engine)?;
    if let Some(b) = &a.budget {
        (cfg.engine.batches, cfg.engine.batch_size) = parse_budget(b)?;
    }
    cfg.engine.validate()?;
    let methods = parse_methods(&a.methods)?;
    let seeds = parse_seeds(&a.seeds)?;
    let bundle = if methods.contains(&Method::CaRansac) {
        Some(load_bundle(a.weights.as_deref())?)
    } else {
        None
    };
    let pairs = load_dataset(&a.data)?;
    ensure!(!pairs.is_empty(), "dataset {} is empty", a.data.display());
    let reports = benchmark_parallel(&methods, &pairs, bundle.as_ref(), &cfg.engine, &seeds, &WallClock::new())?;
    print!("{}", bench_table(&reports, true));
    if let Some(path) = &a.out {
        write_file(path, &bench_table(&reports, false))?;
        write_file(&timing_path(path), &bench_timing_text(&reports))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_budgets_and_seeds_parse() {
        assert_eq!(parse_range::<f64>("0.5").unwrap(), (0.5, 0.5));
        assert_eq!(parse_range::<usize>("200:1000").unwrap(), (200, 1000));
        assert!(parse_range::<usize>("9:3").is_err());
        assert!(parse_range::<f64>("a:1").is_err());
        assert_eq!(parse_budget("4x256").unwrap(), (4, 256));
        assert!(parse_budget("1024").is_err());
        assert_eq!(parse_seeds("0, 1,2").unwrap(), vec![0, 1, 2]);
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn unknown_method_lists_valid_ones() {
        assert_eq!(parse_methods("ca,lmlo").unwrap(), vec![Method::CaRansac, Method::LmLo]);
        let err = parse_methods("ca,magsac").unwrap_err().to_string();
        assert!(err.contains("'magsac'") && err.contains("ca, msac, lmlo, oracle"), "{err}");
    }

    #[test]
    fn epoch_records_are_single_lines() {
        let e = EpochLog {
            epoch: 0,
            train_loss: None,
            val_loss: 0.5,
            alpha: 1.0,
        };
        assert_eq!(format_epoch(&e), "0 - 0.5 1.0");
    }
}
