use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Address of one deterministic random stream.
///
/// A stream is identified by `(seed, stream_id)`. Identical addresses yield
/// bit-identical draws, independent of thread schedule or draw interleaving
/// elsewhere, because every draw site instantiates its own generator.
/// Derivation helpers build a tree: [`RngStream::child`] descends by label (one per
/// module or noise source), [`RngStream::index`] by counter (time step,
/// member number), so "member n at step j" is `stream.index(j).index(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
}

const LABEL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const INDEX_SALT: u64 = 0xbf58_476d_1ce4_e5b9;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RngStream {
    /// Root stream for a run.
    pub fn new(seed: u64) -> Self {
        RngStream { seed, stream_id: 0 }
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Descend by label; distinct labels give statistically independent
    /// streams under the same seed.
    pub fn child(&self, label: &str) -> Self {
        RngStream {
            seed: self.seed,
            stream_id: splitmix(self.stream_id ^ LABEL_SALT ^ fnv1a(label.as_bytes())),
        }
    }

    /// Descend by counter (time step, member index, replicate number).
    pub fn index(&self, i: u64) -> Self {
        RngStream {
            seed: self.seed,
            stream_id: splitmix(self.stream_id ^ INDEX_SALT ^ i.wrapping_mul(0xd134_2543_de82_ef95)),
        }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn generator(&self) -> ChaCha12Rng {
        let mut key = [0u8; 32];
        let mut s = splitmix(self.seed);
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&s.to_le_bytes());
            s = splitmix(s);
        }
        let mut rng = ChaCha12Rng::from_seed(key);
        rng.set_stream(self.stream_id.into());
        rng
    }

    /// `d` independent standard normal draws.
    pub fn normal_vector(&self, d: usize) -> DVector<f64> {
        let mut rng = self.generator();
        DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng))
    }

    /// `r x c` matrix of independent standard normals, filled column-major.
    pub fn normal_matrix(&self, r: usize, c: usize) -> DMatrix<f64> {
        let mut rng = self.generator();
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    /// `n` independent draws from U[0, 1).
    pub fn uniforms(&self, n: usize) -> Vec<f64> {
        let mut rng = self.generator();
        (0..n).map(|_| uniform01(&mut rng)).collect()
    }

    /// One draw from U[0, 1).
    pub fn uniform(&self) -> f64 {
        uniform01(&mut self.generator())
    }

    /// `n` indices drawn uniformly with replacement from `0..max`.
    pub fn indices_with_replacement(&self, n: usize, max: usize) -> Vec<usize> {
        let mut rng = self.generator();
        (0..n).map(|_| (uniform01(&mut rng) * max as f64) as usize).collect()
    }
}

// 53-bit uniform in [0,1); fixed construction so draws stay bit-stable
// across rand crate upgrades.
fn uniform01<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
