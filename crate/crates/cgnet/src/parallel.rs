//! Work distribution for the kernels.
//!
//! Kernels parallelize only across disjoint output chunks; each chunk is
//! filled by a sequential loop with a fixed accumulation order. Splitting the
//! work therefore never changes a single bit of the result, which is what
//! makes training runs reproducible at any thread count.
//!
//! With the `parallel` feature (default) chunks are dispatched through rayon;
//! without it the same closures run in a plain loop. `CGNET_THREADS` caps the
//! global pool size when set.

/// Build the global rayon pool honoring the `CGNET_THREADS` env var.
/// Call once at process start; later calls are no-ops.
pub fn init_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("CGNET_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // Errors only if a global pool already exists.
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}

/// Number of worker threads the dispatcher will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk_len`-sized pieces of
/// `data` (last piece may be shorter). Chunks are disjoint, so dispatch order
/// cannot affect the result.
pub(crate) fn for_each_chunk<E, F>(data: &mut [E], chunk_len: usize, f: F)
where
    E: Send,
    F: Fn(usize, &mut [E]) + Sync,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if rayon::current_num_threads() > 1 && data.len() > chunk_len {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}
