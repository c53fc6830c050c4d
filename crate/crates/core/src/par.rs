//! Thin parallelism helpers. Every call site obeys two rules so outputs stay
//! bit-identical between the sequential and `parallel` builds of a given
//! binary: threads write only disjoint output chunks, and anything reduced is
//! collected per-chunk and folded in fixed chunk order by the caller.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Run `f(chunk_index, chunk)` over disjoint mutable chunks of `data`.
#[cfg(feature = "parallel")]
pub fn chunks_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    data.par_chunks_mut(chunk.max(1))
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn chunks_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    for (i, c) in data.chunks_mut(chunk.max(1)).enumerate() {
        f(i, c);
    }
}

/// Fill `out[i] = f(i)` for independent work items.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    out.par_iter_mut().enumerate().for_each(|(i, o)| *o = f(i));
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    for (i, o) in out.iter_mut().enumerate() {
        *o = f(i);
    }
}
