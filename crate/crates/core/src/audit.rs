//! Process-wide record of how far produced probability vectors drift from
//! summing to one. Every softmax, marginal, and retrieval distribution that
//! leaves a public function is recorded here.

use std::sync::atomic::{AtomicU64, Ordering};

static MAX_DEVIATION_BITS: AtomicU64 = AtomicU64::new(0);
static AUDITED: AtomicU64 = AtomicU64::new(0);

/// Records `|sum(probs) - 1|` for a distribution.
pub fn record_distribution(probs: &[f64]) {
    let total: f64 = probs.iter().sum();
    let dev = if total.is_finite() { (total - 1.0).abs() } else { f64::INFINITY };
    AUDITED.fetch_add(1, Ordering::Relaxed);
    let mut current = MAX_DEVIATION_BITS.load(Ordering::Relaxed);
    while f64::from_bits(current) < dev {
        match MAX_DEVIATION_BITS.compare_exchange_weak(
            current,
            dev.to_bits(),
            Ordering::Relaxed,
            Ordering::Relaxed,
        ) {
            Ok(_) => break,
            Err(seen) => current = seen,
        }
    }
}

/// Largest deviation seen so far.
pub fn max_deviation() -> f64 {
    f64::from_bits(MAX_DEVIATION_BITS.load(Ordering::Relaxed))
}

/// Number of distributions recorded so far.
pub fn audited_count() -> u64 {
    AUDITED.load(Ordering::Relaxed)
}
