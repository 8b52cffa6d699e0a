//! Data-parallel helpers.
//!
//! With the `parallel` feature these fan work out over the rayon global pool;
//! without it they run the same closures in index order on the calling
//! thread. Every helper writes each output slot from exactly one closure
//! call, so results are bitwise identical in both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work below this many scalar operations is not worth splitting.
pub const MIN_PARALLEL_WORK: usize = 1 << 14;

/// `true` when compiled with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Maps `f` over `0..n`, keeping output order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Maps `f` over a slice, keeping output order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Calls `f(row_index, row)` for each `row_len`-sized chunk of `out`.
///
/// `work_per_row` is an estimate of scalar operations per row; small jobs
/// stay on the calling thread.
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, work_per_row: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    let rows = out.len() / row_len;
    #[cfg(feature = "parallel")]
    {
        if rows.saturating_mul(work_per_row) >= MIN_PARALLEL_WORK {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = (rows, work_per_row);
    out.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}
