//! Data-parallel helpers. With the `parallel` feature these dispatch onto the
//! rayon pool; without it they run the same closures in order on the calling
//! thread. Results are always combined in index order so the output does not
//! depend on the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Whether kernels were compiled with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Calls `f(i, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<F>(data: &mut [f32], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
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
