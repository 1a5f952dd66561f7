//! Deterministic chunked execution of data-parallel loops.
//!
//! Work is split into fixed-size chunks and per-chunk results are collected
//! in chunk order, so floating-point reductions are bit-identical no matter
//! how many worker threads run. With the `parallel` feature (default) the
//! chunks run on the rayon pool; without it everything runs sequentially on
//! the calling thread.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk size for ray-level work. Fixed (not derived from the thread count)
/// so results do not depend on the machine's parallelism.
pub const RAY_CHUNK: usize = 256;

/// Splitmix64-fold of several seed components into one stream seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e3779b97f4a7c15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e3779b97f4a7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
        h ^= h >> 31;
    }
    h
}

/// Map fixed-size chunks of `items` through `f`, returning per-chunk results
/// in chunk order. `f` receives the chunk index and the chunk slice.
pub fn chunked_map<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        items.par_chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        chunked_map_seq(items, chunk, f)
    }
}

/// Sequential twin of [`chunked_map`]; always runs on the calling thread.
/// Kept unconditionally available so benchmarks can compare both paths.
pub fn chunked_map_seq<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    F: Fn(usize, &[T]) -> R,
{
    assert!(chunk > 0);
    items.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
}

/// Map over index ranges `[start, end)` split into fixed chunks (for loops
/// that are indexed rather than slice-backed, e.g. image rows).
pub fn chunked_map_range<R, F>(len: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, std::ops::Range<usize>) -> R + Sync,
{
    assert!(chunk > 0);
    let bounds: Vec<(usize, std::ops::Range<usize>)> = (0..len)
        .step_by(chunk)
        .enumerate()
        .map(|(i, s)| (i, s..(s + chunk).min(len)))
        .collect();
    #[cfg(feature = "parallel")]
    {
        bounds.into_par_iter().map(|(i, r)| f(i, r)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        bounds.into_iter().map(|(i, r)| f(i, r)).collect()
    }
}
