//! Seeded random stream.
//!
//! Stream contract, fixed so other implementations can reproduce it:
//!
//! * state: xoshiro256** whose four words are filled by splitmix64 run on the
//!   64-bit user seed;
//! * uniform: `(next_u64 >> 11) · 2⁻⁵³`, in `[0, 1)`;
//! * normal: Box–Muller on two consecutive uniforms `u1, u2`, with
//!   `r = sqrt(-2 ln(1 - u1))`, `θ = 2π u2`; the call returns `r cos θ` and the
//!   next normal request returns the cached `r sin θ`;
//! * children: `split` draws one `u64` from the parent and seeds a new stream
//!   with it.
//!
//! Transcendentals come from `libm`, so the stream does not depend on the
//! platform's math library.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct RngState {
    inner: Xoshiro256StarStar,
    spare: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by multiply-shift. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let (z0, z1) = box_muller(u1, u2);
        self.spare = Some(z1);
        z0
    }

    /// `rows × cols` i.i.d. standard normals, filled row-major.
    pub fn gaussian(&mut self, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        self.fill_normal(m.as_mut_slice());
        m
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// In-place Fisher–Yates, drawing `below(i + 1)` for `i` from the top down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// Independent child stream.
    pub fn split(&mut self) -> RngState {
        RngState::new(self.next_u64())
    }
}

/// The Box–Muller pair for uniforms `u1, u2 ∈ [0, 1)`.
pub fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = libm::sqrt(-2.0 * libm::log(1.0 - u1));
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * libm::cos(theta), r * libm::sin(theta))
}
