//! Data-parallel helpers.
//!
//! Every batch-shaped loop in the crate (group sampling, per-sample gradient
//! evaluation, round evaluation) goes through [`map_indexed`]. Work item `i`
//! must derive all of its randomness from its own index, so the two execution
//! modes produce bitwise-identical results.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled and falls
    /// back to sequential execution otherwise.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Evaluates `f(0), .., f(n - 1)` and returns the results in index order.
pub fn map_indexed<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..n).map(f).collect(),
        Execution::Parallel => parallel_map(n, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}
