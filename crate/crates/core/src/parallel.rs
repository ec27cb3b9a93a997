//! Thread-count control for the embarrassingly parallel grids (expert
//! training, evaluation repeats).

/// Environment variable capping internal parallelism.
pub const THREADS_ENV: &str = "GLAD_THREADS";

/// The requested thread count, if `GLAD_THREADS` holds a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Runs `f` inside a rayon pool sized by `GLAD_THREADS`, or the global pool.
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match thread_cap().and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}
