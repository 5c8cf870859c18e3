//! Deterministic data-parallel helper.
//!
//! Work is split into fixed-size chunks of the output buffer; each chunk
//! is processed by exactly one thread with a serial inner loop, so the
//! result is bit-identical for any thread count. The default is one
//! thread; callers opt in via [`set_max_threads`].

use std::sync::atomic::{AtomicUsize, Ordering};

static MAX_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Caps worker threads for all kernels in this process. `0` is treated as 1.
pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn max_threads() -> usize {
    MAX_THREADS.load(Ordering::Relaxed)
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk_len` slices of
/// `data`. `data.len()` must be a multiple of `chunk_len`. Chunks are
/// disjoint, so any assignment of chunks to threads yields the same bytes.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    assert_eq!(
        data.len() % chunk_len,
        0,
        "buffer length {} is not a multiple of chunk length {}",
        data.len(),
        chunk_len
    );
    let n_chunks = data.len() / chunk_len;
    let threads = max_threads().min(n_chunks).max(1);
    if threads == 1 {
        for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
        return;
    }
    // Contiguous runs of whole chunks per thread, sized within one of
    // each other so the last thread is never idle.
    let per = n_chunks / threads;
    let extra = n_chunks % threads;
    std::thread::scope(|scope| {
        let mut rest = data;
        let mut start_chunk = 0usize;
        for t in 0..threads {
            let take = per + usize::from(t < extra);
            let (run, tail) = rest.split_at_mut(take * chunk_len);
            rest = tail;
            let first = start_chunk;
            start_chunk += take;
            let f = &f;
            scope.spawn(move || {
                for (i, chunk) in run.chunks_mut(chunk_len).enumerate() {
                    f(first + i, chunk);
                }
            });
        }
    });
}
