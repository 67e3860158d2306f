//! Execution helpers shared by every data-parallel loop in the crate.
//!
//! With the `parallel` feature (default) the helpers fan work out over the
//! rayon global pool; without it they run plain sequential loops. Both
//! paths collect results in index order, so numerical output is
//! bit-identical regardless of mode or worker count. Stochastic callers
//! must derive one RNG seed per index (see [`crate::seeding`]) instead of
//! sharing a generator across items.

use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Name of the active execution mode, for benchmark and report labels.
pub fn mode_name() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

/// Raised when the worker pool cannot be reconfigured.
#[derive(Debug, Error)]
#[error("worker pool configuration failed: {0}")]
pub struct ThreadConfigError(String);

/// Pins the global worker pool to `n` threads (`n = 0` keeps the default).
///
/// Must run before the first parallel call of the process; later calls fail
/// because rayon's global pool initializes once. Without the `parallel`
/// feature this is a no-op so callers can pass `--threads` uniformly.
pub fn configure_threads(n: usize) -> Result<(), ThreadConfigError> {
    #[cfg(feature = "parallel")]
    {
        if n == 0 {
            return Ok(());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ThreadConfigError(e.to_string()))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        Ok(())
    }
}

/// Maps `f` over `0..n` and collects the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Applies `f` to every element of `items`, collecting in input order.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let squares = map_indexed(1000, |i| i * i);
        assert!(squares.iter().enumerate().all(|(i, &s)| s == i * i));
    }

    #[test]
    fn map_slice_preserves_order() {
        let items: Vec<u64> = (0..257).collect();
        let doubled = map_slice(&items, |&x| 2 * x);
        assert!(doubled.iter().enumerate().all(|(i, &d)| d == 2 * i as u64));
    }
}
