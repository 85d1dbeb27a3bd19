//! Bounded worker pools with order-preserving maps.

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Result, SrmError};

pub(crate) fn pool(n_jobs: usize) -> Result<ThreadPool> {
    if n_jobs == 0 {
        return Err(SrmError::Config("n_jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n_jobs)
        .thread_name(|i| format!("srmkit-worker-{i}"))
        .build()
        .map_err(|e| SrmError::Config(format!("cannot start {n_jobs} workers: {e}")))
}

/// Maps `f` over `items` on the pool; results come back in input order so
/// every downstream reduction is independent of scheduling.
pub(crate) fn map_ordered<T, R, F>(pool: &ThreadPool, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    if pool.current_num_threads() == 1 {
        return items.into_iter().map(f).collect();
    }
    pool.install(|| items.into_par_iter().map(f).collect())
}

/// Runs a fallible ordered map and returns the first error in input order.
pub(crate) fn try_map_ordered<T, R, F>(pool: &ThreadPool, items: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync + Send,
{
    map_ordered(pool, items, f).into_iter().collect()
}
