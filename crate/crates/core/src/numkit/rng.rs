use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Seeded ChaCha20 generator addressed by `(seed, stream)`.
///
/// The ChaCha key is built from the seed, the stream id and the substream
/// lineage; the ChaCha stream word carries the substream index. Sibling
/// substreams of one generator therefore never overlap, and the output for a
/// given address is identical on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    lineage: u64,
    depth: u64,
    inner: ChaCha20Rng,
}

fn key(seed: u64, stream: u64, lineage: u64, depth: u64) -> [u8; 32] {
    let mut k = [0u8; 32];
    k[..8].copy_from_slice(&seed.to_le_bytes());
    k[8..16].copy_from_slice(&stream.to_le_bytes());
    k[16..24].copy_from_slice(&lineage.to_le_bytes());
    k[24..].copy_from_slice(&depth.to_le_bytes());
    k
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let inner = ChaCha20Rng::from_seed(key(seed, stream, 0, 0));
        Self {
            seed,
            stream,
            lineage: 0,
            depth: 0,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child generator number `index`. Does not advance `self`.
    pub fn substream(&self, index: u64) -> Rng {
        let lineage = if self.depth == 0 {
            0
        } else {
            splitmix(self.lineage ^ splitmix(self.inner.get_stream()))
        };
        let depth = self.depth + 1;
        let mut inner = ChaCha20Rng::from_seed(key(self.seed, self.stream, lineage, depth));
        inner.set_stream(index);
        Rng {
            seed: self.seed,
            stream: self.stream,
            lineage,
            depth,
            inner,
        }
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// ±1 with equal probability.
    #[inline]
    pub fn rademacher(&mut self) -> f64 {
        if self.inner.next_u32() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Uniform direction on the unit sphere `S^{m-1}` (normalized Gaussian).
    pub fn unit_vector(&mut self, m: usize) -> Vec<f64> {
        loop {
            let v = self.normal_vec(m);
            let n = super::norm(&v);
            if n > 1e-300 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }
}

impl RngCore for Rng {
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
