//! Command-line harness for the BEV trajectory predictor: configuration,
//! dataset building, training, evaluation, ablation and rendering.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod manifest;
pub mod render;
pub mod sample_io;
pub mod train;

use anyhow::{bail, Context, Result};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "CASP_THREADS";

/// Worker count: `CASP_THREADS` if set, else the available parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a positive integer"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// A dedicated pool of [`worker_count`] threads.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = worker_count()?;
    Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?)
}
