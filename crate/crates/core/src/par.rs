//! Data-parallel loop helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the hot loops fan out over rayon;
//! without it they run sequentially. Both paths produce bit-identical
//! output: maps are order-preserving, and reductions always combine
//! fixed-size chunk partials in index order, never in thread-completion
//! order. The `*_seq` variants are always compiled so benchmarks can
//! compare the two paths within one binary.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Order-preserving map over `0..n`.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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
        map_indexed_seq(n, f)
    }
}

/// Sequential reference path for [`map_indexed`].
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Maps fixed-size index chunks to partials, then folds the partials in
/// chunk order. The chunk decomposition depends only on `n` and
/// `chunk_size`, so the result is independent of thread count.
pub fn chunked_fold<A, F, G>(n: usize, chunk_size: usize, map_chunk: F, mut fold: G, init: A) -> A
where
    A: Send,
    F: Fn(std::ops::Range<usize>) -> A + Sync + Send,
    G: FnMut(A, A) -> A,
{
    let partials = {
        let ranges: Vec<std::ops::Range<usize>> = chunk_ranges(n, chunk_size);
        #[cfg(feature = "parallel")]
        {
            ranges.into_par_iter().map(&map_chunk).collect::<Vec<A>>()
        }
        #[cfg(not(feature = "parallel"))]
        {
            ranges.into_iter().map(&map_chunk).collect::<Vec<A>>()
        }
    };
    partials.into_iter().fold(init, &mut fold)
}

/// Sequential reference path for [`chunked_fold`] (same chunking).
pub fn chunked_fold_seq<A, F, G>(
    n: usize,
    chunk_size: usize,
    map_chunk: F,
    mut fold: G,
    init: A,
) -> A
where
    F: Fn(std::ops::Range<usize>) -> A,
    G: FnMut(A, A) -> A,
{
    chunk_ranges(n, chunk_size)
        .into_iter()
        .map(&map_chunk)
        .fold(init, &mut fold)
}

fn chunk_ranges(n: usize, chunk_size: usize) -> Vec<std::ops::Range<usize>> {
    let chunk = chunk_size.max(1);
    (0..n)
        .step_by(chunk)
        .map(|start| start..(start + chunk).min(n))
        .collect()
}
