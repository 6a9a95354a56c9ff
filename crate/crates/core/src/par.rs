//! Execution policy for the data-parallel loops (kernel columns, jackknife
//! replicates, Monte Carlo replicates).
//!
//! With the `parallel` feature (default) `Execution::Parallel` runs on the
//! rayon pool. Without it every policy runs sequentially. Every call site
//! writes results by index, so outputs are bit-identical across policies.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when this policy will actually fan out to worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Evaluate `f(0..n)` and collect results in index order.
pub fn map_range<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Configure the global worker pool. `0` keeps the rayon default (one thread
/// per core). Returns false when the pool was already initialised.
pub fn init_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return true;
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = map_range(Execution::Sequential, 1000, f);
        let b = map_range(Execution::Parallel, 1000, f);
        assert_eq!(a, b);
    }
}
