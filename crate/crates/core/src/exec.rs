//! Order-preserving map over independent work items. Runs on the rayon pool
//! with the `parallel` feature and on the calling thread otherwise; results
//! come back in input order either way, so reductions stay deterministic.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `f(i)` for `i` in `0..n`, collected in index order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Always sequential; used as the baseline in benchmarks.
pub fn map_range_sequential<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    map_range(items.len(), |i| f(i, &items[i]))
}

/// Caps the global worker count. Returns false if the pool was already built
/// or the crate was compiled without parallelism.
pub fn set_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        false
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let v = map_range(1000, |i| i * i);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * i));
        assert_eq!(map_slice(&[3, 1, 2], |i, &x| i + x), vec![3, 2, 4]);
        assert_eq!(map_range_sequential(4, |i| i), vec![0, 1, 2, 3]);
    }
}
