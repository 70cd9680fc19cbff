//! Data-parallel map helpers. With the default `parallel` feature the work
//! spreads over rayon's pool; without it everything runs sequentially, which
//! is handy for profiling and for minimal builds. Results are in input order
//! either way, so outputs are identical across both modes.

/// Map over items, in parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

/// Map over items, in parallel when the `parallel` feature is enabled.
#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Always-sequential map, kept around so benchmarks can compare the two
/// execution paths within a single build.
pub fn seq_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Configure the global thread pool from the `EPIWAVE_THREADS` environment
/// variable. A missing or unparsable value leaves the default (one thread
/// per core). Safe to call more than once; later calls are no-ops.
#[cfg(feature = "parallel")]
pub fn init_threads_from_env() {
    if let Ok(raw) = std::env::var("EPIWAVE_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n > 0 {
                // Errors only mean the pool was already built; that's fine.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn init_threads_from_env() {}
