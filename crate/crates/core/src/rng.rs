//! Named, reproducible RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from a base seed and a path of labels, e.g.
/// `derive_seed(7, &["kmeans", "bag_0003", "s10"])`.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

pub fn stream(base: u64, labels: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, labels))
}

pub(crate) fn normal_matrix<R: rand::Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> crate::tensor::Tensor2 {
    use rand_distr::{Distribution, StandardNormal};
    crate::tensor::Tensor2::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Entries drawn uniformly from `[-bound, bound]`.
pub(crate) fn uniform_matrix<R: rand::Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    bound: f64,
) -> crate::tensor::Tensor2 {
    crate::tensor::Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}
