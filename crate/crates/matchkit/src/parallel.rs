//! Evaluation fan-out. Episodes are independently seeded by index, so the
//! work splits into contiguous chunks whose results are reassembled in
//! episode order; the reduced report is identical to a serial run no matter
//! the thread count. Bounded by `MATCHKIT_THREADS`.

use matchkit_core::Real;

pub const THREADS_ENV: &str = "MATCHKIT_THREADS";

/// Thread budget: `MATCHKIT_THREADS` if set and positive, otherwise the
/// machine's available parallelism.
pub fn thread_count() -> usize {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                return n;
            }
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Runs `score(i)` for `i in 0..n` across up to `threads` workers and
/// returns the results in index order. Any episode error aborts the run.
pub fn run_episodes<F>(n: usize, threads: usize, score: F) -> matchkit_core::Result<Vec<Real>>
where
    F: Fn(usize) -> matchkit_core::Result<Real> + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 {
        return (0..n).map(&score).collect();
    }
    let chunk = n.div_ceil(threads);
    let mut results: Vec<matchkit_core::Result<Vec<Real>>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for t in 0..threads {
            let lo = t * chunk;
            let hi = ((t + 1) * chunk).min(n);
            if lo >= hi {
                break;
            }
            let score = &score;
            handles.push(scope.spawn(move || (lo..hi).map(score).collect()));
        }
        for h in handles {
            results.push(h.join().expect("evaluation worker panicked"));
        }
    });
    let mut accs = Vec::with_capacity(n);
    for chunk in results {
        accs.extend(chunk?);
    }
    Ok(accs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_order_matches_serial() {
        let serial = run_episodes(37, 1, |i| Ok(i as Real * 0.5)).unwrap();
        let parallel = run_episodes(37, 4, |i| Ok(i as Real * 0.5)).unwrap();
        assert_eq!(serial, parallel);
        assert_eq!(serial.len(), 37);
    }

    #[test]
    fn errors_propagate() {
        let res = run_episodes(10, 3, |i| {
            if i == 7 {
                Err(matchkit_core::Error::EmptySupport)
            } else {
                Ok(0.0)
            }
        });
        assert!(res.is_err());
    }
}
