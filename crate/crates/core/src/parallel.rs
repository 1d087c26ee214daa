//! Execution policy for data-parallel loops.
//!
//! Every parallel loop in the crate maps an index range to independent
//! results and collects them in index order, so outputs do not depend on the
//! number of worker threads. Reductions over the collected values always run
//! sequentially afterwards.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled, otherwise
    /// runs sequentially.
    #[default]
    Parallel,
}

impl Parallelism {
    /// Whether work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Indices per rayon task; per-node work is a handful of flops.
const MIN_CHUNK: usize = 1024;

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(policy: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if policy == Parallelism::Parallel && n > MIN_CHUNK {
            use rayon::prelude::*;
            return (0..n).into_par_iter().with_min_len(MIN_CHUNK).map(f).collect();
        }
    }
    let _ = policy;
    (0..n).map(f).collect()
}

/// Runs `f` inside a pool capped at `threads` workers (or the global pool
/// when `threads` is `None`). Without the `parallel` feature this just calls `f`.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = threads {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
                return pool.install(f);
            }
        }
    }
    let _ = threads;
    f()
}
