//! Replica fan-out with a deterministic result order.

/// Runs `f(0..replicas)` on up to `jobs` threads and returns results in
/// replica order, so reductions are independent of the thread count.
#[cfg(feature = "parallel")]
pub fn replicate<T, F>(replicas: u64, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if jobs <= 1 {
        return (0..replicas).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| (0..replicas).into_par_iter().map(&f).collect()),
        Err(_) => (0..replicas).map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn replicate<T, F>(replicas: u64, _jobs: usize, f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    (0..replicas).map(f).collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn order_is_replica_order() {
        let one = super::replicate(100, 1, |i| i * i);
        let many = super::replicate(100, 8, |i| i * i);
        assert_eq!(one, many);
        assert_eq!(one[7], 49);
    }
}
