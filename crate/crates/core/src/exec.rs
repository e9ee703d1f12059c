//! Data-parallel helpers. With the `parallel` feature these fan out over
//! rayon; without it (or after `set_parallel(false)`) they run the same
//! closures in order. Every helper splits work into disjoint output chunks,
//! so results are bitwise identical in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Runtime switch; has no effect when the `parallel` feature is off.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Calls `f(chunk_index, chunk)` on consecutive `chunk`-sized pieces.
pub fn for_each_chunk_mut<T, Fun>(data: &mut [T], chunk: usize, f: Fun)
where
    T: Send,
    Fun: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk_mut`] over two buffers split into the same number of chunks.
pub fn for_each_chunk2_mut<A, B, Fun>(a: &mut [A], ca: usize, b: &mut [B], cb: usize, f: Fun)
where
    A: Send,
    B: Send,
    Fun: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    if ca == 0 || cb == 0 {
        return;
    }
    debug_assert_eq!(a.len() / ca, b.len() / cb);
    #[cfg(feature = "parallel")]
    if parallel_enabled() && a.len() > ca {
        use rayon::prelude::*;
        a.par_chunks_mut(ca)
            .zip(b.par_chunks_mut(cb))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
        return;
    }
    a.chunks_mut(ca).zip(b.chunks_mut(cb)).enumerate().for_each(|(i, (x, y))| f(i, x, y));
}

/// Evaluates `f` for `0..n`, collecting results in index order.
pub fn map_indexed<T, Fun>(n: usize, f: Fun) -> Vec<T>
where
    T: Send,
    Fun: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_results_independent_of_mode() {
        let run = || {
            let mut v = vec![0.0f64; 1000];
            for_each_chunk_mut(&mut v, 10, |i, c| {
                for (j, x) in c.iter_mut().enumerate() {
                    *x = ((i * 10 + j) as f64).sin();
                }
            });
            v
        };
        set_parallel(false);
        let a = run();
        set_parallel(true);
        let b = run();
        assert_eq!(a, b);
        assert_eq!(map_indexed(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
