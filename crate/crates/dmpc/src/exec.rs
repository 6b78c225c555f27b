//! Execution helpers: data-parallel maps with a sequential fallback.
//!
//! Hot loops (planner candidates, batch gradients, study samples, episode
//! batches) funnel through [`par_map`] so the `parallel` feature can swap
//! rayon in or out without touching call sites. Results are always collected
//! in index order, so reductions over the output are deterministic regardless
//! of how work was scheduled.

/// Maps `f` over `0..n` and collects results in index order.
///
/// With the `parallel` feature this fans out over the rayon pool; without it
/// the loop is a plain sequential map. Outputs are identical either way.
#[cfg(feature = "parallel")]
pub fn par_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Sequential fallback used when the `parallel` feature is disabled.
#[cfg(not(feature = "parallel"))]
pub fn par_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Always-sequential variant, kept for benchmark baselines and for call
/// sites that must stay single-threaded (e.g. tiny workloads where fan-out
/// overhead dominates).
pub fn seq_map<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_index_order() {
        let out = par_map(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn par_and_seq_agree() {
        let a = par_map(37, |i| (i as f64).sin());
        let b = seq_map(37, |i| (i as f64).sin());
        assert_eq!(a, b);
    }
}
