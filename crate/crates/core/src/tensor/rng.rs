use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A labelled, seeded random stream.
///
/// The ChaCha key comes from `seed` and the stream id from a hash of
/// `label`, so `(seed, label)` pins every draw and distinct labels never
/// share a keystream. Consumers that must not perturb each other (data
/// augmentation, neuron masks of each view, layer-drop subsets, negative
/// sampling, shuffling) each get their own label.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    label: String,
    inner: ChaCha8Rng,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a(label.as_bytes()));
        Self { seed, label, inner }
    }

    /// Independent stream labelled `"{label}/{sub}"`.
    pub fn child(&self, sub: impl std::fmt::Display) -> Self {
        Self::new(self.seed, format!("{}/{}", self.label, sub))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
