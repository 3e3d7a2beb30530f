//! Data-parallel helpers with a sequential fallback.
//!
//! All batch-level loops in the crate (training steps, evaluation, exhaustive
//! verification) go through [`par_map`] / [`par_chunk_map`]. With the default
//! `parallel` feature these dispatch to rayon; without it they run the same
//! closures sequentially, producing bit-identical results.
//!
//! Determinism contract: results are collected in input order and any
//! reductions are performed sequentially over the ordered outputs, so the
//! outcome never depends on thread count or scheduling. The worker pool size
//! can be capped with the `LIPCERT_THREADS` environment variable.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
static POOL_INIT: std::sync::Once = std::sync::Once::new();

/// Initialize the global worker pool, honoring `LIPCERT_THREADS` if set.
/// Safe to call many times; only the first call has any effect.
pub fn init_thread_pool() {
    #[cfg(feature = "parallel")]
    POOL_INIT.call_once(|| {
        if let Ok(v) = std::env::var("LIPCERT_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // Ignore failure: a pool may already exist (e.g. in tests).
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}

/// Map `f` over `items`, in parallel when enabled, preserving input order.
pub fn par_map<T: Sync, R: Send, F: Fn(&T) -> R + Sync>(items: &[T], f: F) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        init_thread_pool();
        items.par_iter().map(|x| f(x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(|x| f(x)).collect()
    }
}

/// Map `f` over index range `0..n` in parallel, preserving order.
pub fn par_map_idx<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        init_thread_pool();
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential reference implementation of [`par_map`], always available.
/// Used by the benchmark suite to compare both paths under either feature set.
pub fn seq_map<T, R, F: Fn(&T) -> R>(items: &[T], f: F) -> Vec<R> {
    items.iter().map(|x| f(x)).collect()
}

/// Process `items` in fixed-size chunks: each chunk is handled sequentially by
/// `f` (which returns one accumulator per chunk) and chunk results are
/// returned in chunk order. Callers reduce the returned accumulators
/// sequentially, which keeps floating-point sums independent of thread count.
pub fn par_chunk_map<T: Sync, R: Send, F: Fn(&[T]) -> R + Sync>(
    items: &[T],
    chunk_size: usize,
    f: F,
) -> Vec<R> {
    assert!(chunk_size > 0, "chunk_size must be positive");
    #[cfg(feature = "parallel")]
    {
        init_thread_pool();
        items.par_chunks(chunk_size).map(|c| f(c)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.chunks(chunk_size).map(|c| f(c)).collect()
    }
}
