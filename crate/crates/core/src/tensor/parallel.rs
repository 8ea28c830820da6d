//! Batch-level parallelism switch.
//!
//! With one thread every loop runs in order on the caller's thread, which is
//! the bit-deterministic path. Reductions over per-item partial results are
//! always folded in item order, so multi-threaded runs only differ in timing.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

pub const THREADS_ENV: &str = "POLLEN_THREADS";

/// Sets the worker count used by batch loops. Values below 1 are clamped to 1.
pub fn set_threads(n: usize) {
    let n = n.max(1);
    #[cfg(feature = "parallel")]
    if n > 1 {
        // The global pool can only be built once; later calls keep the first size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    THREADS.store(n, Ordering::SeqCst);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

/// Reads `POLLEN_THREADS`, if set and valid.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok()
}

/// Applies `f(index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if threads() > 1 {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Order-preserving map over `0..n`.
pub(crate) fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if threads() > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
