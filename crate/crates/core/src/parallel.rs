//! Data-parallel map helpers.
//!
//! Work items are mapped in input order and reduced sequentially by the
//! caller, so the parallel and sequential paths produce identical bytes.
//! With the `parallel` feature disabled every helper degrades to the plain
//! sequential loop.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    map_range_seq(n, f)
}

/// Sequential twin of [`map_range`], kept available under every feature
/// combination for benchmarks and equivalence tests.
pub fn map_range_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let f = |i: usize| (i as f64).sqrt() * 3.7 - 1.0;
        assert_eq!(map_range(100, f), map_range_seq(100, f));
    }
}
