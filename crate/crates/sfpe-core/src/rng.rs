//! Counter-based Gaussian increments for reproducible parallel simulation.
//!
//! Every `(seed, stream, path, step)` tuple is hashed into its own SplitMix64
//! substream, so an increment is a pure function of its coordinates: workers
//! can draw increments in any order, on any number of threads, and always see
//! identical values. Normals come from Box-Muller pairs over open-interval
//! uniforms.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Murmur3 64-bit finalizer. Full avalanche, bijective.
#[inline]
fn fmix64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^= x >> 33;
    x = x.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    x ^= x >> 33;
    x
}

/// Hash a list of key words into one substream state.
#[inline]
pub fn mix_key(words: &[u64]) -> u64 {
    let mut h = 0x853C_49E6_748F_EA9B;
    for &w in words {
        h = fmix64(h ^ w).wrapping_add(GOLDEN);
    }
    fmix64(h)
}

/// A deterministic stream of uniforms and normals for one counter cell.
#[derive(Debug, Clone)]
pub struct SubRng {
    state: u64,
    cached_normal: Option<f64>,
}

impl SubRng {
    #[inline]
    pub fn from_key(words: &[u64]) -> Self {
        SubRng {
            state: mix_key(words),
            cached_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        fmix64(self.state)
    }

    /// Uniform on the open interval (0, 1); never exactly 0 or 1.
    #[inline]
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Uniform on [lo, hi).
    #[inline]
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.next_u64() >> 11) as f64) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal via Box-Muller; pairs are cached so consecutive calls
    /// consume one uniform pair per two normals.
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.cached_normal = Some(r * s);
        r * c
    }

    /// Fill `out` with independent N(0, scale^2) draws.
    #[inline]
    pub fn fill_normals(&mut self, out: &mut [f64], scale: f64) {
        for z in out.iter_mut() {
            *z = self.next_normal() * scale;
        }
    }
}

/// Keyed source of Brownian increments. `seed` is user-facing; `stream`
/// separates independent uses of the same seed (solver nodes, residual
/// re-estimation, audits).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BrownianDriver {
    pub seed: u64,
    pub stream: u64,
}

impl BrownianDriver {
    pub fn new(seed: u64) -> Self {
        BrownianDriver { seed, stream: 0 }
    }

    pub fn with_stream(self, stream: u64) -> Self {
        BrownianDriver { stream, ..self }
    }

    /// Substream for one `(path, step)` cell.
    #[inline]
    pub fn cell(&self, path: u64, step: u64) -> SubRng {
        SubRng::from_key(&[self.seed, self.stream, path, step])
    }

    /// Write the `m`-dimensional Brownian increment over a step of size `dt`.
    #[inline]
    pub fn increment(&self, path: u64, step: u64, dt: f64, out: &mut [f64]) {
        let mut rng = self.cell(path, step);
        rng.fill_normals(out, dt.sqrt());
    }
}
