//! Execution-mode plumbing for data-parallel loops.
//!
//! All hot loops in the crate are map-then-ordered-collect, so results are
//! bit-identical between the rayon path and the sequential fallback (and for
//! any thread count). The `parallel` feature controls the default mode; the
//! sequential path is always compiled so benchmarks can compare both.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How data-parallel loops execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Fan out over rayon's global pool. Falls back to sequential when the
    /// `parallel` feature is disabled.
    Parallel,
    Sequential,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Map `f` over `items`, preserving input order in the output.
pub fn map_slice<T, U, F>(mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => items.par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => items.iter().map(f).collect(),
        ExecMode::Sequential => items.iter().map(f).collect(),
    }
}

/// Map `f` over `0..n`, preserving index order in the output.
pub fn map_range<U, F>(mode: ExecMode, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => (0..n).map(f).collect(),
        ExecMode::Sequential => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let xs: Vec<u64> = (0..257).collect();
        let f = |x: &u64| x * x + 1;
        let par = map_slice(ExecMode::Parallel, &xs, f);
        let seq = map_slice(ExecMode::Sequential, &xs, f);
        assert_eq!(par, seq);
        assert_eq!(par[10], 101);
    }

    #[test]
    fn range_modes_agree() {
        let f = |i: usize| (i as f64).sqrt();
        assert_eq!(
            map_range(ExecMode::Parallel, 100, f),
            map_range(ExecMode::Sequential, 100, f)
        );
    }
}
