//! Static-partition parallel map over task indices.
//!
//! Tasks `0..n` are split into `workers` contiguous ranges, one scoped thread
//! per range. Results are returned in index order, so any reduction performed
//! by the caller is independent of the worker count.

use std::thread;

pub fn par_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let lo = (w * chunk).min(n);
                let hi = ((w + 1) * chunk).min(n);
                s.spawn(move || (lo..hi).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Number of hardware threads, used as the default worker count.
pub fn default_workers() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_worker_count() {
        let serial = par_map(103, 1, |i| i * i);
        for w in [2, 3, 8, 200] {
            assert_eq!(par_map(103, w, |i| i * i), serial);
        }
        assert!(par_map(0, 4, |i| i).is_empty());
    }
}
