//! Order-preserving fan-out over a bounded worker pool.

use rayon::prelude::*;

/// Maps `f` over `items` on `jobs` threads; output order follows input
/// order. With `jobs <= 1` everything runs on the calling thread.
pub fn map_ordered<T, U, E, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("worker pool");
    pool.install(|| items.par_iter().map(f).collect())
}
