//! File formats, configuration and the `carsac` command-line tool.

pub mod cli;
pub mod config;
pub mod formats;
pub mod report;

use std::time::Instant;

use carsac_core::engine::Clock;

/// Monotonic wall clock measuring from its creation.
#[derive(Debug, Clone, Copy)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ns(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}
