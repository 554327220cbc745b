use rand::seq::SliceRandom;
use rand::Rng;

/// Partitions `0..n` into consecutive batches, optionally after a seeded shuffle.
/// The final partial batch is kept.
pub fn make_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, shuffle: bool, rng: &mut R) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
