use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs `jobs` on a pool of `workers` threads. Results keep input order, so
/// output does not depend on scheduling.
pub fn run_parallel<T, R, F>(jobs: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(&f).collect())
}
