//! Thin wrappers around the `rayon`/sequential split so kernel code is
//! written once. Closures must be `Sync + Send` either way, which keeps the
//! two builds honest about shared state.

#[cfg(feature = "rayon")]
use rayon::prelude::*;

/// Runs `f(row_index, row)` over consecutive `row_len` chunks of `data`.
pub(crate) fn for_each_chunk_mut<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(row_len > 0);
    #[cfg(feature = "rayon")]
    data.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
    #[cfg(not(feature = "rayon"))]
    data.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}

/// Maps `f` over `0..n`, collecting results in index order. The caller folds
/// the returned partials sequentially, which pins the reduction tree
/// independent of thread count.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "rayon")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "rayon"))]
    {
        (0..n).map(f).collect()
    }
}
