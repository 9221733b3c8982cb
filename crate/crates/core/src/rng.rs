//! Seeded, platform-independent random source.
//!
//! Algorithm (part of the reproducibility contract):
//!
//! * state: xoshiro256++ seeded from the 64-bit seed through SplitMix64
//!   (`Xoshiro256PlusPlus::seed_from_u64`);
//! * uniforms: the top 53 bits of one `u64` draw, scaled by 2^-53;
//! * normals: Box–Muller on a pair `(u1, u2)` with `u1` in (0, 1] and `u2` in
//!   [0, 1); the cosine branch is returned first and the sine branch is cached
//!   for the next call;
//! * bounded integers: Lemire multiply-shift with rejection;
//! * forks: a child is seeded with the parent's next `u64`, so forking advances
//!   the parent by exactly one draw. [`RandomSource::derive`] produces an
//!   independent stream from `(seed, stream_id)` without touching any state.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::matrix::DenseMatrix;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    state: Xoshiro256PlusPlus,
    spare_normal: Option<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            state: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent stream keyed by `(seed, stream)`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(splitmix64(seed ^ splitmix64(stream)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child source seeded from this source's next draw.
    pub fn fork(&mut self) -> Self {
        Self::new(self.next_u64())
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state.next_u64()
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, bound). `bound` must be positive.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below() needs a positive bound");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let wide = self.next_u64() as u128 * bound as u128;
            if (wide as u64) >= threshold {
                return (wide >> 64) as u64;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// `rows x cols` matrix of i.i.d. standard normals, filled row-major.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> DenseMatrix {
        let data = (0..rows * cols).map(|_| self.standard_normal()).collect();
        DenseMatrix::from_vec(rows, cols, data).expect("length matches by construction")
    }

    /// Fisher–Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

/// Stand-alone helper mirroring [`RandomSource::gaussian_matrix`].
pub fn gaussian_sample(rng: &mut RandomSource, rows: usize, cols: usize) -> DenseMatrix {
    rng.gaussian_matrix(rows, cols)
}
