//! Small shared helpers: stable hashing, seed derivation, bounded parallel map.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// FNV-1a 64-bit hash. Used wherever a stable, dependency-free content hash
/// is enough (mock score derivation, seed derivation). Not for caching on
/// disk; disk caches use SHA-256.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derive a sub-seed from a base seed and a label path, so that independent
/// pipeline stages draw from independent, reproducible streams.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut buf = base.to_le_bytes().to_vec();
    for label in labels {
        buf.push(0x1f);
        buf.extend_from_slice(label.as_bytes());
    }
    fnv1a64(&buf)
}

/// Apply `f` to every item with at most `max_in_flight` worker threads.
/// Results come back in input order regardless of completion order.
pub fn parallel_map<T, R, F>(items: &[T], max_in_flight: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = max_in_flight.max(1).min(items.len().max(1));
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                slots.lock().expect("parallel_map poisoned")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("parallel_map poisoned")
        .into_iter()
        .map(|r| r.expect("parallel_map slot unfilled"))
        .collect()
}

/// Format an optional metric value with four decimals, `/` when undefined.
pub fn format_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "/".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_known_vectors() {
        // Reference values for the 64-bit FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn derive_seed_separates_labels() {
        let a = derive_seed(7, &["split", "dialogue"]);
        let b = derive_seed(7, &["split", "summary"]);
        let c = derive_seed(8, &["split", "dialogue"]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, &["split", "dialogue"]));
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u64> = (0..103).collect();
        let doubled = parallel_map(&items, 8, |x| x * 2);
        assert_eq!(doubled, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        let empty: Vec<u64> = vec![];
        assert!(parallel_map(&empty, 4, |x| x + 1).is_empty());
    }

    #[test]
    fn format_metric_renders_slash_for_undefined() {
        assert_eq!(format_metric(Some(0.70084)), "0.7008");
        assert_eq!(format_metric(None), "/");
    }
}
