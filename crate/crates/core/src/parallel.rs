//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) row-blocked kernels are dispatched to
//! rayon once the work is large enough. Every output element is reduced in the
//! same order on both paths, so results are bitwise identical whether or not
//! threads are used. [`set_enabled`] switches paths at runtime, which the bench
//! suite uses to compare the two.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Below this many scalar multiply-adds a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Enable or disable the threaded path at runtime. No effect without the
/// `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

/// Whether kernels may currently use threads.
pub fn enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Fill `out` row by row; `f(i, row)` writes row `i`. `work` estimates the
/// total flop count and decides whether threading is worth it.
pub(crate) fn rows_mut<F>(out: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 || out.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if enabled() && work >= MIN_PARALLEL_WORK && out.len() > row_len {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Evaluate `f(0..n)` and collect the results in index order.
pub(crate) fn map_indexed<T, F>(n: usize, work: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if enabled() && work >= MIN_PARALLEL_WORK && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = work;
    (0..n).map(f).collect()
}
