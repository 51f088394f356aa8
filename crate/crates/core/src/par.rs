//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the per-agent maps run on the rayon
//! pool. Results are always collected in index order and every reduction in
//! the crate is performed serially afterwards, so the output does not depend
//! on the number of threads.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Route every subsequent map through the sequential path.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_sequential() -> bool {
    !cfg!(feature = "parallel") || FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Size the global pool. Only effective before the pool is first used.
pub fn set_threads(n: usize) -> Result<(), String> {
    if n == 0 {
        return Err("thread count must be positive".into());
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(())
    }
}

/// `(0..len).map(f).collect()`, possibly in parallel.
pub fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() && len > 1 {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map(f).collect();
        }
    }
    (0..len).map(f).collect()
}

/// Like [`map_indexed`] for fallible closures; the first error in index order wins.
pub fn try_map_indexed<T, E, F>(len: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(len, f).into_iter().collect()
}
