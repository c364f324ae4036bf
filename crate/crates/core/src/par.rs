//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) indexed maps fan out over the rayon
//! pool; without it they run on the calling thread. Results are always
//! returned in index order, so any reduction the caller performs over them is
//! independent of scheduling.

/// Map `f` over `0..n`, in parallel when the `parallel` feature is enabled.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(n, f)
    }
}

/// Always-sequential counterpart of [`map_indexed`].
pub fn map_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Number of worker threads `map_indexed` can use.
pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
