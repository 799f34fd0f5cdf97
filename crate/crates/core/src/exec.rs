//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) [`ExecMode::Parallel`] runs on a
//! rayon pool; without it every mode runs sequentially. Results are always
//! returned in input order, so output never depends on scheduling.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

#[derive(Clone)]
pub struct Executor {
    mode: ExecMode,
    #[cfg(feature = "parallel")]
    pool: Option<std::sync::Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("mode", &self.mode).finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Executor::new(ExecMode::default(), None)
    }
}

impl Executor {
    /// `threads` bounds the worker count; `None` uses rayon's global pool.
    pub fn new(mode: ExecMode, threads: Option<usize>) -> Self {
        #[cfg(feature = "parallel")]
        {
            let pool = match (mode, threads) {
                (ExecMode::Parallel, Some(n)) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .ok()
                    .map(std::sync::Arc::new),
                _ => None,
            };
            Executor { mode, pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            Executor { mode }
        }
    }

    pub fn sequential() -> Self {
        Executor::new(ExecMode::Sequential, None)
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self.mode {
            #[cfg(feature = "parallel")]
            ExecMode::Parallel => {
                use rayon::prelude::*;
                match &self.pool {
                    Some(pool) => pool.install(|| items.par_iter().map(&f).collect()),
                    None => items.par_iter().map(&f).collect(),
                }
            }
            _ => items.iter().map(f).collect(),
        }
    }

    /// Like [`Executor::map`] but stops at the first error in input order.
    pub fn try_map<T, R, E, F>(&self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}
