//! Bounded worker pool for independent jobs (images, grid cells).

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "NULLFACE_WORKERS";

pub struct Engine {
    pool: rayon::ThreadPool,
}

impl Engine {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::out_of_range("workers", "need at least one worker"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("nullface-worker-{i}"))
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool })
    }

    /// Pool sized by `NULLFACE_WORKERS`, defaulting to the available parallelism.
    pub fn from_env() -> Result<Self> {
        let workers = match std::env::var(WORKERS_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| {
                Error::out_of_range("workers", format!("{WORKERS_ENV}={v} is not a positive integer"))
            })?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Self::new(workers)
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Applies `f` to every item on the pool; results keep input order.
    pub fn map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(usize, &T) -> R + Sync + Send) -> Vec<R> {
        self.pool
            .install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let e = Engine::new(3).unwrap();
        let out = e.map(&[1, 2, 3, 4, 5], |i, v| i * 10 + v);
        assert_eq!(out, vec![1, 12, 23, 34, 45]);
        assert!(Engine::new(0).is_err());
    }
}
