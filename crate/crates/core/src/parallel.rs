//! Deterministic fork-join over independent items.
//!
//! Worker count comes from the `EDITKIT_THREADS` environment variable (falls
//! back to the machine's parallelism). Results are collected by item index, so
//! the output never depends on scheduling.

pub fn max_threads() -> usize {
    std::env::var("EDITKIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Applies `f` to every index in `0..n`, possibly on several threads, and
/// returns outputs ordered by index.
pub fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = max_threads().min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let slots: Vec<(usize, &mut [Option<T>])> = {
        let mut rest = out.as_mut_slice();
        let mut start = 0;
        let mut v = Vec::new();
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            v.push((start, head));
            start += take;
            rest = tail;
        }
        v
    };
    std::thread::scope(|scope| {
        for (start, slot) in slots {
            let f = &f;
            scope.spawn(move || {
                for (off, cell) in slot.iter_mut().enumerate() {
                    *cell = Some(f(start + off));
                }
            });
        }
    });
    out.into_iter().map(|v| v.expect("all slots filled")).collect()
}
