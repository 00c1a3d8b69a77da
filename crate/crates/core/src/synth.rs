//! Small synthetic crystal families used for desk-scale training and tests.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::crystal::{AtomTypes, Crystal, LatticeParams};
use crate::error::Result;
use crate::geometry::{wrap_unit, TorusCloud};

/// Atomic numbers of the perovskite-style family: A sites, B sites, X site.
pub const PEROV_A: [i64; 2] = [38, 56];
pub const PEROV_B: [i64; 2] = [22, 40];
pub const PEROV_X: i64 = 8;
pub const PEROV_FRAC: [[f64; 3]; 5] =
    [[0.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]];

/// Mean cubic cell edge (Å) of a perovskite with the given A and B choices.
pub fn perov_base_length(a: usize, b: usize) -> f64 {
    3.9 + 0.25 * a as f64 + 0.2 * b as f64
}

/// ABX3 cubic cells with the same fractional coordinates throughout and a
/// log-normal cell edge around a composition-dependent mean.
pub fn perov_family<R: Rng + ?Sized>(count: usize, length_sigma: f64, rng: &mut R) -> Result<Vec<Crystal>> {
    let noise = Normal::new(0.0, length_sigma).map_err(|e| crate::Error::Domain(e.to_string()))?;
    (0..count)
        .map(|_| {
            let ai = rng.random_range(0..PEROV_A.len());
            let bi = rng.random_range(0..PEROV_B.len());
            let z = [PEROV_A[ai], PEROV_B[bi], PEROV_X, PEROV_X, PEROV_X];
            let kinds = z.iter().map(|&z| AtomTypes::kind_from_atomic_number(z)).collect::<Result<Vec<_>>>()?;
            let len = perov_base_length(ai, bi) * noise.sample(rng).exp();
            Crystal::new(
                AtomTypes::new(kinds)?,
                TorusCloud::new(PEROV_FRAC.to_vec())?,
                LatticeParams::new(len, len, len, 90.0, 90.0, 90.0)?,
            )
        })
        .collect()
}

/// Two same-species atoms in a fixed cube whose separation `f1 - f0` (mod 1)
/// follows an equal mixture of wrapped Gaussians centred at `mode` and `-mode`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTorus {
    pub mode: [f64; 3],
    pub sigma: f64,
    pub edge: f64,
    pub kind: usize,
}

impl Default for ToyTorus {
    fn default() -> Self {
        Self { mode: [0.25, 0.35, 0.1], sigma: 0.05, edge: 4.0, kind: 5 }
    }
}

impl ToyTorus {
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Crystal>> {
        let noise = Normal::new(0.0, self.sigma).map_err(|e| crate::Error::Domain(e.to_string()))?;
        (0..count)
            .map(|_| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let f0: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
                let d: [f64; 3] = std::array::from_fn(|k| sign * self.mode[k] + noise.sample(rng));
                let f1 = std::array::from_fn(|k| wrap_unit(f0[k] + d[k]));
                Crystal::new(
                    AtomTypes::new(vec![self.kind, self.kind])?,
                    TorusCloud::new(vec![f0, f1])?,
                    LatticeParams::new(self.edge, self.edge, self.edge, 90.0, 90.0, 90.0)?,
                )
            })
            .collect()
    }
}

/// Row-major `bins × bins` histogram of the first two components of `f1 - f0` (mod 1), normalized.
pub fn separation_histogram(crystals: &[Crystal], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins * bins];
    let mut total = 0.0;
    for c in crystals.iter().filter(|c| c.num_atoms() == 2) {
        let f = c.frac.coords();
        let ix = ((wrap_unit(f[1][0] - f[0][0]) * bins as f64) as usize).min(bins - 1);
        let iy = ((wrap_unit(f[1][1] - f[0][1]) * bins as f64) as usize).min(bins - 1);
        h[ix * bins + iy] += 1.0;
        total += 1.0;
    }
    if total > 0.0 {
        h.iter_mut().for_each(|x| *x /= total);
    }
    h
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
