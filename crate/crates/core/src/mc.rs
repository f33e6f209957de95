use rayon::prelude::*;

/// Evaluates `f` on replicas `0..n` in parallel, returning results in index
/// order. Callers reduce the returned vector sequentially, so estimates are
/// identical for every worker count.
pub fn par_replicas<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Runs `f` inside a dedicated pool with `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
        .install(f)
}
