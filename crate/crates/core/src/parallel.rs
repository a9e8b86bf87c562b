//! Worker-count control. All parallel work goes through ordered rayon maps, so
//! results do not depend on the number of workers.

/// Run `f` on a dedicated pool with `workers` threads (0 means rayon's default).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
