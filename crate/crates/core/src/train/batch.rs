//! Length-bucketed batching under a padded frame budget.

use rand::seq::SliceRandom;
use rand::Rng;

/// Indices into `lengths`, grouped so each batch's padded size
/// (`count * longest`) stays within `max_frames`. Items are sorted by length
/// first so neighbours in a batch have similar lengths; an item longer than
/// the budget becomes a batch of its own. Batch order is then shuffled.
pub fn make_batches<R: Rng + ?Sized>(lengths: &[usize], max_frames: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    // ties broken by index keep the result independent of sort stability
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for i in order {
        let len = lengths[i];
        if len > max_frames {
            log::warn!("item {i} has {len} frames, over the batch budget of {max_frames}; batching it alone");
            batches.push(vec![i]);
            continue;
        }
        // sorted ascending, so `len` is the new maximum
        if !cur.is_empty() && (cur.len() + 1) * len > max_frames {
            batches.push(std::mem::take(&mut cur));
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    batches
}

/// `(padded, real)` frame totals over a set of batches.
pub fn padding_totals(lengths: &[usize], batches: &[Vec<usize>]) -> (usize, usize) {
    batches.iter().fold((0, 0), |(p, r), b| {
        let max = b.iter().map(|&i| lengths[i]).max().unwrap_or(0);
        (p + max * b.len(), r + b.iter().map(|&i| lengths[i]).sum::<usize>())
    })
}
