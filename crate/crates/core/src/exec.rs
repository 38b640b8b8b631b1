//! Work dispatch for the data-parallel kernels.
//!
//! With the `parallel` feature the kernels fan out over rayon; without it
//! (or after [`set_mode`]`(Mode::Sequential)`) the same closures run in a
//! plain loop. Work items are always indexed and results returned in index
//! order, so the two modes produce bitwise-identical outputs.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

/// Select the dispatch mode for subsequent kernel calls (process-wide).
pub fn set_mode(mode: Mode) {
    MODE.store(matches!(mode, Mode::Parallel) as u8, Ordering::Relaxed);
}

/// The effective mode. Always `Sequential` when built without `parallel`.
pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Evaluate `f(i)` for `i in 0..n` and collect the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if n > 1 && mode() == Mode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if data.len() > chunk && mode() == Mode::Parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
