//! Point sets over axis-aligned boxes: scrambled Sobol for fixed layouts,
//! seeded uniform draws for collocation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[lo_0, hi_0] × … × [lo_{d-1}, hi_{d-1}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StateBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "box bounds of length {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::InvalidArgument("box requires finite lo <= hi".into()));
        }
        Ok(Self { lo, hi })
    }

    /// `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    /// Box scaled about its center by `factor`.
    pub fn inflated(&self, factor: f64) -> Self {
        let (lo, hi) = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| {
                let c = 0.5 * (a + b);
                let r = 0.5 * (b - a) * factor;
                (c - r, c + r)
            })
            .unzip();
        Self { lo, hi }
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (a, b))| v.clamp(*a, *b))
            .collect()
    }

    /// Maps a point of the unit cube into the box.
    pub fn from_unit(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(s, (a, b))| a + s * (b - a))
            .collect()
    }
}

/// `n` Owen-scrambled Sobol points in `dim` dimensions of the unit cube,
/// starting at sequence dimension `dim_offset`. The generator holds 2^16
/// points per seed; longer runs continue with a fresh scramble per block.
pub fn sobol_unit(n: usize, dim: usize, dim_offset: u32, seed: u32) -> Vec<Vec<f64>> {
    const BLOCK: usize = 1 << 16;
    (0..n)
        .map(|i| {
            let block = (i / BLOCK) as u64;
            let s = if block == 0 { seed } else { derive_seed(u64::from(seed), block) as u32 };
            let idx = (i % BLOCK) as u32;
            (0..dim as u32)
                .map(|j| f64::from(sobol_burley::sample(idx, dim_offset + j, s)))
                .collect()
        })
        .collect()
}

/// `n` scrambled Sobol points inside `bx`.
pub fn sobol_in_box(bx: &StateBox, n: usize, seed: u32) -> Vec<Vec<f64>> {
    sobol_unit(n, bx.dim(), 0, seed)
        .into_iter()
        .map(|u| bx.from_unit(&u))
        .collect()
}

/// Seeded generator shared by every stochastic routine in the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream index (epoch, restart, ...).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn uniform_in_box<R: Rng>(bx: &StateBox, rng: &mut R) -> Vec<f64> {
    bx.lo
        .iter()
        .zip(&bx.hi)
        .map(|(a, b)| if a < b { rng.random_range(*a..=*b) } else { *a })
        .collect()
}

pub fn uniform_points<R: Rng>(bx: &StateBox, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| uniform_in_box(bx, rng)).collect()
}
