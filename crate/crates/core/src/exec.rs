//! Data-parallel execution helpers.
//!
//! Every batch-level map in this crate funnels through [`map_indexed`], which
//! runs on rayon when the `parallel` feature is enabled and degrades to a
//! plain loop otherwise. Work units must be independent and results are
//! assembled in index order, so both paths produce identical bytes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Single-threaded twin of [`map_indexed`].
///
/// Kept public so benchmarks and differential tests can pit the rayon path
/// against one thread. Output is bit-identical to [`map_indexed`].
pub fn map_indexed_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
