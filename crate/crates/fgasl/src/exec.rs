//! Thread-pool executor for clients and experiments.

use std::sync::Arc;

use fgasl_core::orchestrator::Executor;
use rayon::prelude::*;
use rayon::ThreadPool;

/// Runs jobs on a rayon pool. Results keep job order, so output does not
/// depend on the number of threads.
#[derive(Clone)]
pub struct Parallel {
    pool: Option<Arc<ThreadPool>>,
}

impl Parallel {
    /// A pool with `jobs` threads, or rayon's global pool when `None`.
    pub fn new(jobs: Option<usize>) -> Result<Self, rayon::ThreadPoolBuildError> {
        let pool = match jobs {
            Some(n) => Some(Arc::new(rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build()?)),
            None => None,
        };
        Ok(Parallel { pool })
    }
}

impl Executor for Parallel {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        let run = || (0..n).into_par_iter().map(&f).collect();
        match &self.pool {
            Some(p) => p.install(run),
            None => run(),
        }
    }
}
