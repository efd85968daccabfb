//! Deterministic fan-out over index ranges. Results are merged in chunk
//! order, so output is identical for any worker count.

/// Split `0..n` into at most `threads` contiguous chunks, run `f` on each
/// (in parallel when `threads > 1`), and return the per-chunk results in
/// chunk order.
pub fn map_chunks<R, F>(n: usize, threads: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync,
{
    let workers = threads.max(1).min(n.max(1));
    if workers <= 1 {
        return vec![f(0..n)];
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|ci| {
                let start = ci * chunk;
                let end = ((ci + 1) * chunk).min(n);
                let f = &f;
                scope.spawn(move || f(start..end))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}
