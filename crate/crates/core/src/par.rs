//! Deterministic data-parallel helpers.
//!
//! Every loop routed through here maps independent indices to outputs and
//! collects them in index order, so the `parallel` feature changes wall
//! time but never bytes. Reductions over the collected values stay
//! sequential at the call site.

/// Maps `0..n` through `f`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `0..n` through `f`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sequential reference path with the same contract as [`map_indexed`].
/// Benches compare the two; tests assert identical outputs.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk_len` slices of
/// `data`. The caller decides via `parallel` whether the work amortizes
/// scheduling; the flag changes scheduling only, never results, and is
/// ignored in sequential builds.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, parallel: bool, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    if parallel {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        for (i, c) in data.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
    }
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk_len` slices of
/// `data`, sequentially.
#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, _parallel: bool, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}
