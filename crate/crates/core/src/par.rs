//! Parallelism switch for per-instance batch work.
//!
//! Instance graphs are independent, so they may be evaluated on worker
//! threads; every reduction over the results happens afterwards in instance
//! order, which keeps runs bit-identical whichever mode executes them.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution mode for data-parallel inner loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[cfg_attr(feature = "parallel", default)]
    Rayon,
}

/// Map `f` over `items`, preserving order of results.
pub fn map_ordered<T, U, F>(mode: Parallelism, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode {
        Parallelism::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => items.par_iter().map(f).collect(),
    }
}

/// Map `f` over an index range, preserving order of results.
pub fn map_indices<U, F>(mode: Parallelism, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => (0..n).into_par_iter().map(f).collect(),
    }
}
