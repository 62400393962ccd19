//! Probability-gated batched minimal sampling and the PROSAC schedule used
//! by the LM-LO baseline.

use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Points with inlier probability strictly above this join the pool.
    pub pool_threshold: f64,
    /// Pool size floor; the best-ranked points fill a smaller pool.
    pub min_pool: usize,
    pub batch_size: usize,
    pub sample_size: usize,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            pool_threshold: 0.4,
            min_pool: 15,
            batch_size: 256,
            sample_size: 8,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pool_threshold > 0.0 && self.pool_threshold < 1.0) {
            return Err(Error::Config("pool_threshold must lie in (0, 1)".into()));
        }
        if self.sample_size < 8 {
            return Err(Error::Config("sample_size must be at least 8".into()));
        }
        if self.min_pool < self.sample_size {
            return Err(Error::Config("min_pool must be at least sample_size".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Indices with `p > pool_threshold`, topped up to `min_pool` by the most
/// probable points (ties by lower index). Returned in ascending order.
pub fn build_pool(probs: &[f64], cfg: &SamplerConfig) -> Result<Vec<usize>> {
    let n = probs.len();
    if n < cfg.sample_size {
        return Err(Error::InsufficientData {
            needed: cfg.sample_size,
            available: n,
        });
    }
    let pool: Vec<usize> = (0..n).filter(|&i| probs[i] > cfg.pool_threshold).collect();
    if pool.len() >= cfg.min_pool {
        return Ok(pool);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(cfg.min_pool.min(n));
    order.sort_unstable();
    Ok(order)
}

/// `batch_size` samples of `sample_size` distinct pool members each.
pub fn draw_minimal_batch<R: Rng + ?Sized>(
    pool: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if pool.len() < cfg.sample_size {
        return Err(Error::InsufficientData {
            needed: cfg.sample_size,
            available: pool.len(),
        });
    }
    Ok((0..cfg.batch_size)
        .map(|_| {
            index::sample(rng, pool.len(), cfg.sample_size)
                .into_iter()
                .map(|k| pool[k])
                .collect()
        })
        .collect())
}

/// Progressive sampling over points ranked by decreasing quality.
///
/// Iteration 1 draws exactly the top `sample_size` points; the sampled
/// subset then grows according to the standard growth function until it
/// covers all points, after which sampling is uniform.
#[derive(Debug, Clone)]
pub struct ProsacSampler {
    order: Vec<usize>,
    sample_size: usize,
    /// Current subset size `n`.
    subset: usize,
    /// `T_n` (real valued).
    t_n: f64,
    /// `T'_n` (integer schedule).
    t_n_prime: u64,
    iteration: u64,
}

impl ProsacSampler {
    /// `growth_iterations` is the number of iterations after which the
    /// subset reaches all points (`T_N`).
    pub fn new(quality: &[f64], sample_size: usize, growth_iterations: u64) -> Result<Self> {
        let n = quality.len();
        if n < sample_size {
            return Err(Error::InsufficientData {
                needed: sample_size,
                available: n,
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| quality[b].total_cmp(&quality[a]).then(a.cmp(&b)));
        // T_m = T_N * prod_{i<m} (m - i) / (N - i)
        let mut t_n = growth_iterations.max(1) as f64;
        for i in 0..sample_size {
            t_n *= (sample_size - i) as f64 / (n - i) as f64;
        }
        Ok(Self {
            order,
            sample_size,
            subset: sample_size,
            t_n,
            t_n_prime: 1,
            iteration: 0,
        })
    }

    pub fn subset_size(&self) -> usize {
        self.subset
    }

    /// Points ranked by decreasing quality.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn next_sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        self.iteration += 1;
        let n_total = self.order.len();
        let m = self.sample_size;
        if self.iteration > self.t_n_prime && self.subset < n_total {
            let t_next = self.t_n * (self.subset + 1) as f64 / (self.subset + 1 - m) as f64;
            self.t_n_prime += libm::ceil(t_next - self.t_n).max(1.0) as u64;
            self.t_n = t_next;
            self.subset += 1;
        }
        if self.t_n_prime < self.iteration {
            return index::sample(rng, self.subset, m)
                .into_iter()
                .map(|k| self.order[k])
                .collect();
        }
        // m - 1 points from the first n - 1, plus the n-th.
        let mut out: Vec<usize> = index::sample(rng, self.subset - 1, m - 1)
            .into_iter()
            .map(|k| self.order[k])
            .collect();
        out.push(self.order[self.subset - 1]);
        out
    }
}

/// A PROSAC schedule of `total_iterations` samples as an iterator.
pub fn prosac_schedule<'a, R: Rng + ?Sized>(
    quality: &[f64],
    sample_size: usize,
    total_iterations: u64,
    rng: &'a mut R,
) -> Result<impl Iterator<Item = Vec<usize>> + 'a> {
    let mut sampler = ProsacSampler::new(quality, sample_size, total_iterations)?;
    Ok((0..total_iterations).map(move |_| sampler.next_sample(rng)))
}
