//! Realization seeding and the worker pool.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "QWLOC_THREADS";

/// Seed of realization `index` under `master`; independent of scheduling.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

/// Worker count: `QWLOC_THREADS` if set and positive, capped by the machine.
pub fn thread_count() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(avail),
        _ => avail,
    }
}

/// Runs `f` inside a pool sized by [`thread_count`], further capped by `cap`.
pub fn with_pool<R: Send>(cap: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count().min(cap.unwrap_or(usize::MAX)).max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// `f(index, seed)` for every realization, results in index order.
pub fn run_realizations<T: Send>(
    n: usize,
    master: u64,
    f: impl Fn(usize, u64) -> Result<T> + Sync,
) -> Vec<Result<T>> {
    (0..n).into_par_iter().map(|i| f(i, derive_seed(master, i as u64))).collect()
}

/// Keeps successful realizations; fails if more than `max_fail_fraction` failed.
pub fn collect_successes<T>(results: Vec<Result<T>>, max_fail_fraction: f64) -> Result<(Vec<T>, Vec<(usize, Error)>)> {
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failed.push((i, e)),
        }
    }
    if failed.len() as f64 > max_fail_fraction * total as f64 {
        let first = failed[0].1.to_string();
        return Err(Error::TooManyFailures { failed: failed.len(), total, first });
    }
    Ok((ok, failed))
}
