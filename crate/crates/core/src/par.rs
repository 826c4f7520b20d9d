//! Data-parallel helpers. With the `parallel` feature the maps run on rayon;
//! without it every call falls back to a plain sequential iterator, producing
//! identical results in identical order.

/// How to schedule independent work items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    /// Use a thread pool; `jobs = None` uses rayon's global pool.
    #[default]
    Parallel,
    /// Use a dedicated pool with exactly this many worker threads.
    Jobs(usize),
}

impl Parallelism {
    pub fn from_jobs(jobs: Option<usize>) -> Self {
        match jobs {
            Some(0) | Some(1) => Parallelism::Sequential,
            Some(n) => Parallelism::Jobs(n),
            None => Parallelism::Parallel,
        }
    }

    /// Whether this build can actually run work concurrently.
    pub fn is_effective(self) -> bool {
        cfg!(feature = "parallel") && self != Parallelism::Sequential
    }
}

/// Map `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], parallelism: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match parallelism {
            Parallelism::Sequential => items.iter().map(f).collect(),
            Parallelism::Parallel => items.par_iter().map(f).collect(),
            Parallelism::Jobs(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
                Err(e) => {
                    log::warn!("could not build a {n}-thread pool ({e}); running sequentially");
                    items.iter().map(f).collect()
                }
            },
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = parallelism;
        items.iter().map(f).collect()
    }
}

/// Map `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, parallelism: Parallelism, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(&idx, parallelism, |&i| f(i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_under_every_schedule() {
        let items: Vec<u64> = (0..1000).collect();
        let expect: Vec<u64> = items.iter().map(|v| v * v).collect();
        for p in [Parallelism::Sequential, Parallelism::Parallel, Parallelism::Jobs(3)] {
            assert_eq!(map(&items, p, |v| v * v), expect);
        }
    }

    #[test]
    fn jobs_mapping() {
        assert_eq!(Parallelism::from_jobs(Some(1)), Parallelism::Sequential);
        assert_eq!(Parallelism::from_jobs(Some(4)), Parallelism::Jobs(4));
        assert_eq!(Parallelism::from_jobs(None), Parallelism::Parallel);
    }
}
