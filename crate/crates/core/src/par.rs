//! Row-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run the
//! same closures in a plain loop. Every helper assigns each output element to
//! exactly one closure invocation, so results are bit-identical across thread
//! counts and across the two builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar multiply-adds a kernel stays on the calling thread.
pub const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Calls `f(row_index, row)` for every `width`-sized row of `out`.
///
/// `work` is a rough flop count used to skip thread dispatch on tiny kernels.
pub fn for_each_row<F>(out: &mut [f64], width: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= MIN_PARALLEL_WORK {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work;
    out.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Maps `0..n` through `f`, preserving index order in the output.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// True when the crate was built with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
