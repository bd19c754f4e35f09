//! Data-parallel execution helpers.
//!
//! Heavy kernels split their output into disjoint chunks and hand each chunk
//! to one task. Every chunk is filled by a fixed sequential inner loop, so
//! results are bit-identical whether the chunks run on one thread or many.
//! The `parallel` feature selects the rayon implementation; without it (or
//! with [`set_sequential`]) everything runs on the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force all kernels onto the calling thread, even in a `parallel` build.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_sequential() -> bool {
    !cfg!(feature = "parallel") || FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Cap the global worker pool. Returns false if the pool was already built.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .is_ok()
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) -> bool {
    false
}

/// Run `f(chunk_index, chunk)` over consecutive `size`-element chunks of
/// `data`. Chunks are disjoint, so the parallel and sequential paths write
/// identical bytes.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], size: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(size > 0);
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            use rayon::prelude::*;
            data.par_chunks_mut(size)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
            return;
        }
    }
    for (i, chunk) in data.chunks_mut(size).enumerate() {
        f(i, chunk);
    }
}

/// Elementwise map into a fresh vector, chunked to amortize task overhead.
pub fn map_slice<T, U, F>(src: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send + Default + Clone,
    F: Fn(&T) -> U + Sync,
{
    let mut out = vec![U::default(); src.len()];
    const CHUNK: usize = 1 << 14;
    for_each_chunk_mut(&mut out, CHUNK, |i, chunk| {
        let base = i * CHUNK;
        for (j, slot) in chunk.iter_mut().enumerate() {
            *slot = f(&src[base + j]);
        }
    });
    out
}
