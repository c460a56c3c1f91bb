//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over rayon's pool;
//! without it they run sequentially. Results are always returned in index
//! order, so any reduction done by the caller is order-stable and the two
//! builds produce bit-identical numbers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `(0..n).map(f).collect()`, possibly in parallel.
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
        (0..n).map(f).collect()
    }
}

/// Applies `f` to each fixed-size chunk of `out` together with its index.
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
