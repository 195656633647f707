use alloc::string::String;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, StandardNormal};

use crate::error::{invalid, Result};

/// Deterministic random stream keyed by `(seed, stream label)`.
///
/// Two streams with the same seed and label produce identical draws; different
/// labels give statistically independent streams, so modules never share
/// mutable generator state.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: String,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: &str) -> Self {
        Self {
            seed,
            stream: stream.into(),
            inner: ChaCha8Rng::from_seed(derive_key(seed, stream)),
        }
    }

    /// A child stream labelled `"<parent>/<label>"`. Does not advance `self`.
    pub fn substream(&self, label: &str) -> Self {
        let mut stream = self.stream.clone();
        stream.push('/');
        stream.push_str(label);
        Self::new(self.seed, &stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> &str {
        &self.stream
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform integer in the inclusive range `lo..=hi`.
    pub fn between(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }
}

impl RngCore for SeededRng {
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

/// One draw from the symmetric `Beta(κ, κ)` distribution.
pub fn sample_beta(kappa: f64, rng: &mut SeededRng) -> Result<f64> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(invalid!("Beta parameter must be positive, got {kappa}"));
    }
    let dist = Beta::new(kappa, kappa).map_err(|e| invalid!("Beta({kappa}, {kappa}): {e}"))?;
    Ok(dist.sample(rng).clamp(0.0, 1.0))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, stream: &str) -> [u8; 32] {
    // FNV-1a over the label, then splitmix to spread it over the key
    let mut label_hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.as_bytes() {
        label_hash ^= u64::from(*b);
        label_hash = label_hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut state = seed ^ label_hash.rotate_left(17);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}
