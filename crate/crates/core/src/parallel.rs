//! Data-parallel map with a sequential fallback.
//!
//! Results always come back in input order, and callers reduce them in that
//! order, so switching modes or thread counts never changes a bit of output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Images per gradient work unit. Fixed so the reduction tree does not
/// depend on how many workers exist.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    /// Runs on the current rayon pool; identical to `Sequential` when the
    /// crate is built without the `parallel` feature.
    Parallel,
}

impl Execution {
    pub fn for_threads(threads: usize) -> Self {
        if threads > 1 && cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    /// Maps over fixed-size chunks of `items`.
    pub fn map_chunks<T, R, F>(self, items: &[T], chunk: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&[T]) -> R + Sync + Send,
    {
        let chunks: Vec<&[T]> = items.chunks(chunk.max(1)).collect();
        self.map(&chunks, |c| f(c))
    }
}

/// Runs `f` inside a pool of `threads` workers (no-op without `parallel`).
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if threads > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                return pool.install(f);
            }
        }
    }
    let _ = threads;
    f()
}
