//! Deterministic data parallelism.
//!
//! Heavy kernels split their work into fixed-size chunks, map the chunks
//! (in parallel when the `parallel` feature is enabled and the mode is
//! [`ExecMode::Parallel`]), and merge the per-chunk results in chunk order.
//! Chunk size is a compile-time constant, never derived from thread count, so
//! the arithmetic — and therefore every trained weight — is bit-identical
//! across thread counts and across the sequential fallback.

use std::sync::atomic::{AtomicU8, Ordering};

/// Number of samples per work unit in batched kernels.
pub const CHUNK: usize = 8;

/// Execution strategy for chunked kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Process chunks on the rayon thread pool (requires the `parallel`
    /// feature; silently equals `Sequential` without it).
    Parallel,
    /// Process chunks one after another on the calling thread.
    Sequential,
}

static MODE: AtomicU8 = AtomicU8::new(0);

/// Sets the process-wide execution mode. Mainly for benchmarks comparing the
/// two paths; results do not depend on the choice.
pub fn set_exec_mode(mode: ExecMode) {
    MODE.store(mode as u8, Ordering::Relaxed);
}

pub fn exec_mode() -> ExecMode {
    match MODE.load(Ordering::Relaxed) {
        0 => ExecMode::Parallel,
        _ => ExecMode::Sequential,
    }
}

#[cfg(feature = "parallel")]
fn run_parallel() -> bool {
    exec_mode() == ExecMode::Parallel
}

/// Maps `f` over `items` in chunks of [`CHUNK`], returning per-chunk outputs
/// in chunk order. `f` receives the chunk index and the chunk slice.
pub fn map_chunks<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &[T]) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if run_parallel() {
            use rayon::prelude::*;
            return items.par_chunks(CHUNK).enumerate().map(|(i, c)| f(i, c)).collect();
        }
    }
    items.chunks(CHUNK).enumerate().map(|(i, c)| f(i, c)).collect()
}

/// Like [`map_chunks`] but over a range of chunk indices instead of a slice,
/// for kernels whose per-chunk inputs live in pre-split storage.
pub fn map_chunk_indices<U, F>(n_chunks: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if run_parallel() {
            use rayon::prelude::*;
            return (0..n_chunks).into_par_iter().map(f).collect();
        }
    }
    (0..n_chunks).map(f).collect()
}

/// Applies `f` to disjoint mutable chunks of `items`, in place.
pub fn for_each_chunk_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if run_parallel() {
            use rayon::prelude::*;
            items.par_chunks_mut(CHUNK).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    items.chunks_mut(CHUNK).enumerate().for_each(|(i, c)| f(i, c));
}

/// Number of chunks needed to cover `n` items.
pub fn n_chunks(n: usize) -> usize {
    n.div_ceil(CHUNK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_chunks_preserves_order_and_coverage() {
        let items: Vec<u32> = (0..37).collect();
        let sums = map_chunks(&items, |i, c| (i, c.iter().sum::<u32>()));
        assert_eq!(sums.len(), n_chunks(37));
        for (i, (idx, _)) in sums.iter().enumerate() {
            assert_eq!(i, *idx);
        }
        let total: u32 = sums.iter().map(|(_, s)| s).sum();
        assert_eq!(total, 37 * 36 / 2);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let items: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        set_exec_mode(ExecMode::Parallel);
        let a = map_chunks(&items, |_, c| c.iter().sum::<f64>());
        set_exec_mode(ExecMode::Sequential);
        let b = map_chunks(&items, |_, c| c.iter().sum::<f64>());
        set_exec_mode(ExecMode::Parallel);
        assert_eq!(a, b);
    }

    #[test]
    fn for_each_chunk_mut_touches_every_item() {
        let mut items = vec![0u8; 100];
        for_each_chunk_mut(&mut items, |_, c| {
            for v in c {
                *v += 1;
            }
        });
        assert!(items.iter().all(|&v| v == 1));
    }
}
