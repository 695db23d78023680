//! Parallel Monte Carlo driver.
//!
//! Replications are independent (each draws from its own seed), so they are
//! farmed out to a rayon pool and folded back in replication order by
//! [`summarize`]. The report does not depend on the thread count.

use blp_ife_core::montecarlo::{run_replication, summarize, McConfig, McReport};

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "BLP_IFE_THREADS";

/// Explicit count, else `BLP_IFE_THREADS`, else one per core.
pub fn resolve_threads(explicit: Option<usize>) -> Result<usize> {
    if let Some(n) = explicit.filter(|n| *n > 0) {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        _ => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub(crate) fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
}

pub fn run_study(config: &McConfig, threads: usize) -> Result<McReport> {
    use rayon::prelude::*;
    config.validate()?;
    let outcomes = pool(threads)?.install(|| {
        (0..config.reps)
            .into_par_iter()
            .map(|r| (r, run_replication(config, r)))
            .collect::<Vec<_>>()
    });
    Ok(summarize(config, outcomes)?)
}
