//! Deterministic fan-out over scoped threads.
//!
//! Work item `i` always produces output slot `i`, and reductions use a fixed
//! pairwise tree, so results do not depend on the worker count.

use std::thread;

use crate::error::Result;
use crate::numkit::Matrix;

/// `f(0), …, f(n−1)` computed on up to `workers` threads, returned in index
/// order.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    thread::scope(|scope| {
        for (c, part) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in part.iter_mut().enumerate() {
                    *slot = Some(f(c * chunk + j));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot is filled"))
        .collect()
}

/// Fallible [`map_indexed`]; the error of the lowest failing index wins.
pub fn try_map_indexed<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    map_indexed(n, workers, f).into_iter().collect()
}

/// Pairwise sum with a fixed tree shape.
pub fn tree_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => tree_sum(&xs[..n / 2]) + tree_sum(&xs[n / 2..]),
    }
}

/// Pairwise sum of equally shaped matrices.
pub fn tree_sum_matrices(xs: &[Matrix]) -> Result<Option<Matrix>> {
    match xs.len() {
        0 => Ok(None),
        1 => Ok(Some(xs[0].clone())),
        n => {
            let a = tree_sum_matrices(&xs[..n / 2])?.expect("non-empty half");
            let b = tree_sum_matrices(&xs[n / 2..])?.expect("non-empty half");
            Ok(Some(a.add(&b)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_independent_of_workers() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = map_indexed(103, 1, f);
        for w in [2, 3, 8, 200] {
            assert_eq!(map_indexed(103, w, f), a);
        }
        assert!(map_indexed(0, 4, f).is_empty());
    }

    #[test]
    fn first_error_wins() {
        let r: Result<Vec<usize>> = try_map_indexed(10, 3, |i| {
            if i >= 4 {
                Err(crate::Error::Numeric(format!("{i}")))
            } else {
                Ok(i)
            }
        });
        assert!(matches!(r, Err(crate::Error::Numeric(s)) if s == "4"));
    }

    #[test]
    fn tree_sum_values() {
        assert_eq!(tree_sum(&[]), 0.0);
        assert_eq!(tree_sum(&[1.0, 2.0, 3.0, 4.0, 5.0]), 15.0);
    }
}
