//! Data-parallel execution helpers.
//!
//! All hot loops in the crate go through this module. With the `parallel`
//! feature (default) they run on the rayon pool; without it, or after
//! [`set_parallel(false)`](set_parallel), they run sequentially. Results are
//! identical either way: work is mapped per index and merged in index order,
//! never reduced in a nondeterministic order.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Enable or disable the rayon path at runtime. Returns the previous value.
/// Without the `parallel` feature this is a no-op and execution stays
/// sequential.
pub fn set_parallel(on: bool) -> bool {
    let prev = PARALLEL.swap(on, Ordering::SeqCst);
    prev
}

/// True when work will actually be dispatched to the rayon pool.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::SeqCst)
}

/// Number of worker threads the pool would use (1 when sequential).
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            return rayon::current_num_threads();
        }
    }
    1
}

/// `(0..n).map(f)` collected in index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Apply `f` to disjoint mutable chunks of `data`, passing the chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
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

/// Split `n` work items into at most `threads() * 2` contiguous ranges.
pub fn ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    let pieces = (threads() * 2).clamp(1, n.max(1));
    let base = n / pieces;
    let rem = n % pieces;
    let mut out = Vec::with_capacity(pieces);
    let mut start = 0;
    for i in 0..pieces {
        let len = base + usize::from(i < rem);
        if len == 0 {
            continue;
        }
        out.push(start..start + len);
        start += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_collect_preserves_order() {
        let v = map_collect(100, |i| i * i);
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_toggle_gives_same_result() {
        let par = map_collect(1000, |i| (i as f64).sin());
        let prev = set_parallel(false);
        let seq = map_collect(1000, |i| (i as f64).sin());
        set_parallel(prev);
        assert_eq!(par, seq);
    }

    #[test]
    fn ranges_cover_exactly() {
        for n in [0, 1, 2, 3, 17, 100] {
            let rs = ranges(n);
            let total: usize = rs.iter().map(|r| r.len()).sum();
            assert_eq!(total, n);
            let mut next = 0;
            for r in &rs {
                assert_eq!(r.start, next);
                next = r.end;
            }
        }
    }
}
