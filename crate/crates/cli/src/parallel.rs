//! Thread-pool executor for per-patient gradient evaluation.

use dmegp_core::train::BatchMap;
use rayon::prelude::*;

use crate::error::{CliError, Result};

/// Environment variable holding the worker thread count.
pub const WORKERS_ENV: &str = "DMEGP_WORKERS";

/// Maps a batch on a rayon pool. Results come back in input order, so the
/// outcome does not depend on the worker count.
pub struct RayonMap {
    pool: rayon::ThreadPool,
}

impl RayonMap {
    pub fn new(workers: Option<usize>) -> Result<Self> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = workers {
            b = b.num_threads(n);
        }
        let pool = b.build().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self { pool })
    }

    /// Reads the worker count from `DMEGP_WORKERS`; unset uses every core.
    pub fn from_env() -> Result<Self> {
        let workers = match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|n| *n > 0)
                    .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?,
            ),
            Err(_) => None,
        };
        Self::new(workers)
    }
}

impl BatchMap for RayonMap {
    fn map<T: Sync, R: Send>(&self, items: &[T], f: &(dyn Fn(&T) -> R + Sync)) -> Vec<R> {
        self.pool.install(|| items.par_iter().map(f).collect())
    }
}
