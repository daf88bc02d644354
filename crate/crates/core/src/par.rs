use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Applies `f` to every item on up to `workers` threads and returns the
/// outputs in input order. Stops handing out work after the first error.
pub(crate) fn try_map<T, U, E, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync,
{
    let slots: Vec<Mutex<Option<U>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<(usize, E)>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                if failure.lock().expect("lock").is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { return };
                match f(item) {
                    Ok(out) => *slots[i].lock().expect("lock") = Some(out),
                    Err(e) => {
                        let mut slot = failure.lock().expect("lock");
                        // keep the earliest failing item for a stable error
                        if slot.as_ref().is_none_or(|(j, _)| i < *j) {
                            *slot = Some((i, e));
                        }
                        return;
                    }
                }
            });
        }
    });
    if let Some((_, e)) = failure.into_inner().expect("lock") {
        return Err(e);
    }
    Ok(slots
        .into_iter()
        .map(|m| m.into_inner().expect("lock").expect("filled"))
        .collect())
}

#[cfg(test)]
mod tests {
    #[test]
    fn preserves_order_and_reports_errors() {
        let items: Vec<u32> = (0..50).collect();
        let out: Result<Vec<u32>, ()> = super::try_map(&items, 4, |x| Ok(x * 2));
        assert_eq!(out.unwrap(), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        let err = super::try_map(&items, 1, |x| if *x == 7 { Err(*x) } else { Ok(*x) });
        assert_eq!(err, Err(7));
    }
}
