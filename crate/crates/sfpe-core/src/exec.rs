//! Indexed map helpers that run on rayon when the `parallel` feature is on
//! and sequentially otherwise. Output order is index order either way, so
//! results never depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub(crate) fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
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
