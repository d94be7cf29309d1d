//! Data-parallel loop helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it the same
//! closures run sequentially. Work is split at fixed boundaries and partial
//! reductions are combined in index order, so every result is independent of
//! the worker count and of the feature flag.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Block length used by the deterministic reductions.
const SUM_BLOCK: usize = 4096;

/// Calls `f(chunk_index, chunk)` for consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Collects `f(0..n)` in order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Fixed-order sum of `f(i)` over `0..n`.
pub fn sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let blocks = n.div_ceil(SUM_BLOCK);
    let partial = map_range(blocks, |b| {
        let end = ((b + 1) * SUM_BLOCK).min(n);
        (b * SUM_BLOCK..end).map(&f).sum::<f64>()
    });
    partial.iter().sum()
}

/// Fixed-order sum of a slice.
pub fn sum(values: &[f64]) -> f64 {
    sum_by(values.len(), |i| values[i])
}
