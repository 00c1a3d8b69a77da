//! Closed-form Riemannian operations on the flat torus `[0,1)^{n×3}`,
//! on Euclidean factors, and on their weighted product.
//!
//! Every torus point is kept canonical: each coordinate lies in `[0, 1)`.
//! The log map returns the minimal signed displacement with values in
//! `(-1/2, 1/2]`; a displacement of exactly one half resolves to `+1/2`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::TangentState;

/// Wrap a real number onto `[0, 1)` by floor subtraction.
///
/// Values such as `-1e-17` whose wrapped image rounds to `1.0` are mapped to `0.0`.
#[inline]
pub fn wrap_unit(x: f64) -> f64 {
    let y = x - x.floor();
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

/// Minimal signed displacement from `x0` to `x1` on the unit circle.
#[inline]
pub fn circle_log(x0: f64, x1: f64) -> f64 {
    let omega = TAU * (x1 - x0);
    let d = omega.sin().atan2(omega.cos()) / TAU;
    // atan2 returns -pi for a tie approached from below; fold onto +1/2.
    if d <= -0.5 {
        d + 1.0
    } else {
        d
    }
}

/// Minimal-image distance between two torus coordinates.
#[inline]
pub fn circle_dist(x0: f64, x1: f64) -> f64 {
    circle_log(x0, x1).abs()
}

/// Fractional coordinates of `n` atoms on the 3-torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusCloud {
    coords: Vec<[f64; 3]>,
}

impl TorusCloud {
    /// Builds a cloud, wrapping every entry onto `[0, 1)`.
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Dimension("a torus cloud needs at least one atom".into()));
        }
        let mut coords = coords;
        for row in &mut coords {
            for x in row.iter_mut() {
                if !x.is_finite() {
                    return Err(Error::Domain(format!("non-finite fractional coordinate {x}")));
                }
                *x = wrap_unit(*x);
            }
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<[f64; 3]> {
        self.coords
    }

    /// Largest per-entry minimal-image distance to `other`.
    pub fn max_circle_dist(&self, other: &TorusCloud) -> Result<f64> {
        check_len(self.len(), other.len())?;
        Ok(self
            .coords
            .iter()
            .zip(&other.coords)
            .flat_map(|(a, b)| (0..3).map(move |k| circle_dist(a[k], b[k])))
            .fold(0.0, f64::max))
    }
}

/// Tangent vectors at a torus point, one 3-vector per atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusTangent {
    pub vec: Vec<[f64; 3]>,
}

impl TorusTangent {
    pub fn zeros(n: usize) -> Self {
        Self { vec: vec![[0.0; 3]; n] }
    }

    pub fn len(&self) -> usize {
        self.vec.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vec.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            vec: self.vec.iter().map(|r| [r[0] * s, r[1] * s, r[2] * s]).collect(),
        }
    }

    /// Column means over atoms.
    pub fn mean(&self) -> [f64; 3] {
        let n = self.vec.len().max(1) as f64;
        let mut m = [0.0; 3];
        for r in &self.vec {
            for k in 0..3 {
                m[k] += r[k];
            }
        }
        m.map(|x| x / n)
    }

    /// The same field with its per-column mean over atoms removed.
    pub fn mean_free(&self) -> Self {
        let m = self.mean();
        Self {
            vec: self.vec.iter().map(|r| [r[0] - m[0], r[1] - m[1], r[2] - m[2]]).collect(),
        }
    }
}

/// A point of a Euclidean factor (atom bits or unconstrained lattice).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EuclideanVec {
    pub values: Vec<f64>,
}

impl EuclideanVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite Euclidean component".into()));
        }
        Ok(Self { values })
    }
}

/// Weights of the product metric on atoms × fractional coordinates × lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub lambda_a: f64,
    pub lambda_f: f64,
    pub lambda_l: f64,
}

impl MetricWeights {
    pub fn new(lambda_a: f64, lambda_f: f64, lambda_l: f64) -> Result<Self> {
        for (name, v) in [("lambda_a", lambda_a), ("lambda_f", lambda_f), ("lambda_l", lambda_l)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be strictly positive, got {v}")));
            }
        }
        Ok(Self { lambda_a, lambda_f, lambda_l })
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{a} atoms vs {b} atoms")));
    }
    Ok(())
}

/// Exponential map: `f + v - floor(f + v)` entrywise.
pub fn torus_exp(f: &TorusCloud, v: &TorusTangent) -> Result<TorusCloud> {
    check_len(f.len(), v.len())?;
    let coords = f
        .coords
        .iter()
        .zip(&v.vec)
        .map(|(p, d)| [wrap_unit(p[0] + d[0]), wrap_unit(p[1] + d[1]), wrap_unit(p[2] + d[2])])
        .collect();
    Ok(TorusCloud { coords })
}

/// Log map: entrywise `atan2(sin w, cos w) / 2pi` with `w = 2pi (f1 - f0)`.
pub fn torus_log(f0: &TorusCloud, f1: &TorusCloud) -> Result<TorusTangent> {
    check_len(f0.len(), f1.len())?;
    let vec = f0
        .coords
        .iter()
        .zip(&f1.coords)
        .map(|(a, b)| [circle_log(a[0], b[0]), circle_log(a[1], b[1]), circle_log(a[2], b[2])])
        .collect();
    Ok(TorusTangent { vec })
}

/// A point on one of the component manifolds.
#[derive(Debug, Clone, PartialEq)]
pub enum ManifoldPoint {
    Torus(TorusCloud),
    Euclidean(EuclideanVec),
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("geodesic time {t} outside [0, 1]")));
    }
    Ok(())
}

pub fn torus_geodesic(f0: &TorusCloud, f1: &TorusCloud, t: f64) -> Result<TorusCloud> {
    check_time(t)?;
    torus_exp(f0, &torus_log(f0, f1)?.scaled(t))
}

pub fn euclidean_geodesic(m0: &[f64], m1: &[f64], t: f64) -> Result<Vec<f64>> {
    check_time(t)?;
    if m0.len() != m1.len() {
        return Err(Error::Dimension(format!("{} vs {} components", m0.len(), m1.len())));
    }
    Ok(m0.iter().zip(m1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// `exp_{m0}(t log_{m0}(m1))` on whichever manifold the endpoints live on.
pub fn geodesic_point(m0: &ManifoldPoint, m1: &ManifoldPoint, t: f64) -> Result<ManifoldPoint> {
    match (m0, m1) {
        (ManifoldPoint::Torus(a), ManifoldPoint::Torus(b)) => {
            Ok(ManifoldPoint::Torus(torus_geodesic(a, b, t)?))
        }
        (ManifoldPoint::Euclidean(a), ManifoldPoint::Euclidean(b)) => Ok(ManifoldPoint::Euclidean(
            EuclideanVec { values: euclidean_geodesic(&a.values, &b.values, t)? },
        )),
        _ => Err(Error::Dimension("geodesic endpoints lie on different manifolds".into())),
    }
}

fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {} components", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Weighted product-metric inner product of two tangent states.
pub fn product_inner(u: &TangentState, v: &TangentState, w: &MetricWeights) -> Result<f64> {
    let ia = dot(&u.da, &v.da)?;
    let if_ = dot(u.df.as_flattened(), v.df.as_flattened())?;
    let il = dot(&u.dl, &v.dl)?;
    Ok(w.lambda_a * ia + w.lambda_f * if_ + w.lambda_l * il)
}
