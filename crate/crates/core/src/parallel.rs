//! Thread-count control for the parallel parts of evaluation and checking.

use rayon::ThreadPoolBuilder;

/// Environment variable capping internal parallelism; `0` means one thread.
pub const THREADS_ENV: &str = "GYRO_THREADS";

/// Thread cap from `GYRO_THREADS`, or `None` when unset or unparsable.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok()
}

/// Runs `f` on a dedicated pool. `Some(0)` and `Some(1)` run single-threaded;
/// `None` uses rayon's default width.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    let mut builder = ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    match builder.build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
