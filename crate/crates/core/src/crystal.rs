//! Crystal data model: lattice parameters and matrices, the angle
//! unconstraining map, analog-bit atom typing and symmetry actions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_unit, TorusCloud};

/// Number of atomic classes.
pub const NUM_CLASSES: usize = 100;
/// Analog bits per atom, `ceil(log2(NUM_CLASSES))`.
pub const NUM_BITS: usize = 7;

pub const ANGLE_MIN: f64 = 60.0;
pub const ANGLE_MAX: f64 = 120.0;
/// Rounding slack when checking the angle window.
pub const ANGLE_SLACK: f64 = 1e-9;
/// Boundary angles are pulled this far (degrees) into the open interval.
pub const ANGLE_CLAMP: f64 = 1e-6;

/// Rotation-invariant lattice description: lengths in Å, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LatticeParams {
    pub fn new(a: f64, b: f64, c: f64, alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let p = Self { a, b, c, alpha, beta, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn from_array(v: [f64; 6]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn lengths(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.a, self.b, self.c, self.alpha, self.beta, self.gamma]
    }

    fn validate(&self) -> Result<()> {
        for (name, l) in [("a", self.a), ("b", self.b), ("c", self.c)] {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::DegenerateCell(format!("length {name} = {l} must be positive")));
            }
        }
        for (name, x) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(ANGLE_MIN - ANGLE_SLACK..=ANGLE_MAX + ANGLE_SLACK).contains(&x) {
                return Err(Error::NiggliViolation(format!("{name} = {x}")));
            }
        }
        if volume_factor(self.angles()) <= 1e-12 {
            return Err(Error::DegenerateCell(format!(
                "angles ({}, {}, {}) enclose no volume",
                self.alpha, self.beta, self.gamma
            )));
        }
        Ok(())
    }

    /// Unit-cell volume in Å³.
    pub fn volume(&self) -> f64 {
        cell_volume(self)
    }
}

/// `1 - cos²α - cos²β - cos²γ + 2 cosα cosβ cosγ`, the squared volume of the unit-edge cell.
fn volume_factor(angles: [f64; 3]) -> f64 {
    let [ca, cb, cg] = angles.map(|x| x.to_radians().cos());
    1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg
}

/// Cartesian lattice vectors stored as columns: `cols[k]` is the k-th vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeMatrix {
    pub cols: [[f64; 3]; 3],
}

impl LatticeMatrix {
    pub fn from_cols(cols: [[f64; 3]; 3]) -> Self {
        Self { cols }
    }

    /// Builds from a row-major nested array whose rows are the lattice vectors.
    pub fn from_row_vectors(rows: [[f64; 3]; 3]) -> Self {
        Self { cols: rows }
    }

    pub fn det(&self) -> f64 {
        let [u, v, w] = self.cols;
        u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0])
            + u[2] * (v[0] * w[1] - v[1] * w[0])
    }

    /// Cartesian image of a fractional vector.
    #[inline]
    pub fn apply(&self, f: [f64; 3]) -> [f64; 3] {
        let [u, v, w] = self.cols;
        [
            f[0] * u[0] + f[1] * v[0] + f[2] * w[0],
            f[0] * u[1] + f[1] * v[1] + f[2] * w[1],
            f[0] * u[2] + f[1] * v[2] + f[2] * w[2],
        ]
    }

    /// `LᵀL`.
    pub fn gram(&self) -> [[f64; 3]; 3] {
        let mut g = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] = dot3(self.cols[i], self.cols[j]);
            }
        }
        g
    }

    /// `Q·L` for a 3×3 matrix `Q` (row-major).
    pub fn rotated(&self, q: &[[f64; 3]; 3]) -> Self {
        let mut cols = [[0.0; 3]; 3];
        for (k, c) in self.cols.iter().enumerate() {
            for i in 0..3 {
                cols[k][i] = (0..3).map(|j| q[i][j] * c[j]).sum();
            }
        }
        Self { cols }
    }
}

#[inline]
pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn angle_deg(u: [f64; 3], v: [f64; 3]) -> f64 {
    (dot3(u, v) / (norm3(u) * norm3(v))).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Lattice parameters of a (reduced) lattice matrix.
pub fn params_from_matrix(l: &LatticeMatrix) -> Result<LatticeParams> {
    let scale = l.cols.iter().map(|c| norm3(*c)).product::<f64>();
    if !(l.det().abs() > 1e-12 * scale) || !scale.is_finite() {
        return Err(Error::DegenerateCell(format!("singular lattice matrix (det {})", l.det())));
    }
    let [u, v, w] = l.cols;
    let snap = |x: f64| {
        if (x - ANGLE_MIN).abs() <= ANGLE_SLACK {
            ANGLE_MIN
        } else if (x - ANGLE_MAX).abs() <= ANGLE_SLACK {
            ANGLE_MAX
        } else {
            x
        }
    };
    LatticeParams::new(
        norm3(u),
        norm3(v),
        norm3(w),
        snap(angle_deg(v, w)),
        snap(angle_deg(u, w)),
        snap(angle_deg(u, v)),
    )
}

/// Canonical lattice matrix: first vector on x, second in the xy-plane, third with positive z.
pub fn matrix_from_params(l: &LatticeParams) -> Result<LatticeMatrix> {
    l.validate()?;
    let [ca, cb, cg] = l.angles().map(|x| x.to_radians().cos());
    let sg = l.gamma.to_radians().sin();
    let cx = cb;
    let cy = (ca - cb * cg) / sg;
    let cz2 = 1.0 - cx * cx - cy * cy;
    if cz2 <= 0.0 {
        return Err(Error::DegenerateCell("non-positive cell volume".into()));
    }
    Ok(LatticeMatrix {
        cols: [
            [l.a, 0.0, 0.0],
            [l.b * cg, l.b * sg, 0.0],
            [l.c * cx, l.c * cy, l.c * cz2.sqrt()],
        ],
    })
}

/// Gram matrix `LᵀL` computed straight from the parameters.
pub fn gram_from_params(l: &LatticeParams) -> [[f64; 3]; 3] {
    let len = l.lengths();
    let [ca, cb, cg] = l.angles().map(|x| x.to_radians().cos());
    let cos = [[1.0, cg, cb], [cg, 1.0, ca], [cb, ca, 1.0]];
    let mut g = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            g[i][j] = len[i] * len[j] * cos[i][j];
        }
    }
    g
}

pub fn cell_volume(l: &LatticeParams) -> f64 {
    l.a * l.b * l.c * volume_factor(l.angles()).max(0.0).sqrt()
}

#[inline]
fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

#[inline]
pub(crate) fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// Angle (degrees) to unconstrained space: `logit((angle - 60) / 60)`.
pub fn angles_to_unconstrained(angle: f64) -> Result<f64> {
    if !(ANGLE_MIN..=ANGLE_MAX).contains(&angle) {
        return Err(Error::Domain(format!("angle {angle} outside [60, 120]")));
    }
    let a = angle.clamp(ANGLE_MIN + ANGLE_CLAMP, ANGLE_MAX - ANGLE_CLAMP);
    Ok(logit((a - ANGLE_MIN) / (ANGLE_MAX - ANGLE_MIN)))
}

/// Inverse of [`angles_to_unconstrained`]: `60 sigmoid(y) + 60`.
pub fn angles_from_unconstrained(y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::Domain(format!("non-finite unconstrained angle {y}")));
    }
    Ok((ANGLE_MAX - ANGLE_MIN) * sigmoid(y) + ANGLE_MIN)
}

pub type Bits = [f64; NUM_BITS];

/// Analog bits of a class index, least-significant bit first, `1 -> +1`, `0 -> -1`.
pub fn encode_kind(kind: usize) -> Result<Bits> {
    if kind >= NUM_CLASSES {
        return Err(Error::Range(format!("atom class {kind} >= {NUM_CLASSES}")));
    }
    let mut bits = [0.0; NUM_BITS];
    for (j, b) in bits.iter_mut().enumerate() {
        *b = if (kind >> j) & 1 == 1 { 1.0 } else { -1.0 };
    }
    Ok(bits)
}

/// Sign-decodes one row of analog bits. `sign(0)` is `+1`. May return indices `>= NUM_CLASSES`.
pub fn decode_kind(bits: &Bits) -> usize {
    bits.iter()
        .enumerate()
        .map(|(j, &x)| if x >= 0.0 { 1usize << j } else { 0 })
        .sum()
}

pub fn encode_atoms(kinds: &[usize]) -> Result<Vec<Bits>> {
    kinds.iter().map(|&k| encode_kind(k)).collect()
}

pub fn decode_atoms(bits: &[Bits]) -> Vec<usize> {
    bits.iter().map(decode_kind).collect()
}

/// Whether a decoded class index lands on one of the unused bit patterns.
pub fn is_unused_class(kind: usize) -> bool {
    kind >= NUM_CLASSES
}

/// Atom classes of a crystal, indices in `[0, NUM_CLASSES)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomTypes {
    kinds: Vec<usize>,
}

impl AtomTypes {
    pub fn new(kinds: Vec<usize>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Dimension("a crystal needs at least one atom".into()));
        }
        if let Some(k) = kinds.iter().find(|&&k| k >= NUM_CLASSES) {
            return Err(Error::Range(format!("atom class {k} >= {NUM_CLASSES}")));
        }
        Ok(Self { kinds })
    }

    pub fn kinds(&self) -> &[usize] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn bits(&self) -> Vec<Bits> {
        encode_atoms(&self.kinds).expect("kinds validated at construction")
    }

    /// Class index for an atomic number `Z` in `1..=100`.
    pub fn kind_from_atomic_number(z: i64) -> Result<usize> {
        if !(1..=NUM_CLASSES as i64).contains(&z) {
            return Err(Error::Range(format!("atomic number {z} outside 1..=100")));
        }
        Ok(z as usize - 1)
    }

    pub fn atomic_number(kind: usize) -> i64 {
        kind as i64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crystal {
    pub atoms: AtomTypes,
    pub frac: TorusCloud,
    pub lattice: LatticeParams,
}

impl Crystal {
    pub fn new(atoms: AtomTypes, frac: TorusCloud, lattice: LatticeParams) -> Result<Self> {
        if atoms.len() != frac.len() {
            return Err(Error::Dimension(format!(
                "{} atom types vs {} coordinates",
                atoms.len(),
                frac.len()
            )));
        }
        Ok(Self { atoms, frac, lattice })
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn kinds(&self) -> &[usize] {
        self.atoms.kinds()
    }
}

/// A group element acting on crystals.
#[derive(Debug, Clone, PartialEq)]
pub enum SymmetryOp {
    /// `perm[i]` is the source index of the atom placed at position `i`.
    Permutation(Vec<usize>),
    Translation([f64; 3]),
    /// Row-major proper rotation matrix.
    Rotation([[f64; 3]; 3]),
}

impl SymmetryOp {
    pub fn permutation(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Domain("permutation is not a bijection".into()));
            }
        }
        Ok(Self::Permutation(perm))
    }

    pub fn translation(tau: [f64; 3]) -> Result<Self> {
        if tau.iter().any(|x| !(-0.5..=0.5).contains(x)) {
            return Err(Error::Domain(format!("translation {tau:?} outside [-1/2, 1/2]^3")));
        }
        Ok(Self::Translation(tau))
    }

    pub fn rotation(q: [[f64; 3]; 3]) -> Result<Self> {
        for i in 0..3 {
            for j in 0..3 {
                let qtq: f64 = (0..3).map(|k| q[k][i] * q[k][j]).sum();
                let id = if i == j { 1.0 } else { 0.0 };
                if (qtq - id).abs() > 1e-10 {
                    return Err(Error::Domain("rotation is not orthogonal".into()));
                }
            }
        }
        let det = LatticeMatrix { cols: q }.det();
        if (det - 1.0).abs() > 1e-10 {
            return Err(Error::Domain(format!("rotation determinant {det} != 1")));
        }
        Ok(Self::Rotation(q))
    }
}

/// Acts with `g` on `c`.
pub fn apply_symmetry(c: &Crystal, g: &SymmetryOp) -> Result<Crystal> {
    match g {
        SymmetryOp::Permutation(perm) => {
            if perm.len() != c.num_atoms() {
                return Err(Error::Dimension(format!(
                    "permutation of {} indices on {} atoms",
                    perm.len(),
                    c.num_atoms()
                )));
            }
            let kinds = perm.iter().map(|&p| c.kinds()[p]).collect();
            let coords = perm.iter().map(|&p| c.frac.coords()[p]).collect();
            Crystal::new(AtomTypes::new(kinds)?, TorusCloud::new(coords)?, c.lattice)
        }
        SymmetryOp::Translation(tau) => {
            let coords = c
                .frac
                .coords()
                .iter()
                .map(|f| [wrap_unit(f[0] + tau[0]), wrap_unit(f[1] + tau[1]), wrap_unit(f[2] + tau[2])])
                .collect();
            Crystal::new(c.atoms.clone(), TorusCloud::new(coords)?, c.lattice)
        }
        SymmetryOp::Rotation(_) => Ok(c.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn params_from_matrix_examples() {
        let l = LatticeMatrix::from_cols([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]]);
        let p = params_from_matrix(&l).unwrap();
        assert_eq!(p.to_array(), [2.0, 2.0, 2.0, 90.0, 90.0, 90.0]);

        let h = LatticeMatrix::from_cols([[1.0, 0.0, 0.0], [0.5, 3f64.sqrt() / 2.0, 0.0], [0.0, 0.0, 1.0]]);
        let p = params_from_matrix(&h).unwrap();
        let want = [1.0, 1.0, 1.0, 90.0, 90.0, 60.0];
        for (x, y) in p.to_array().iter().zip(want) {
            assert!(close(*x, y, 1e-9), "{x} vs {y}");
        }
    }

    #[test]
    fn singular_and_out_of_window_matrices_fail() {
        let s = LatticeMatrix::from_cols([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(params_from_matrix(&s), Err(Error::DegenerateCell(_))));
        // gamma = 30 degrees
        let g = 30f64.to_radians();
        let w = LatticeMatrix::from_cols([[1.0, 0.0, 0.0], [g.cos(), g.sin(), 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(params_from_matrix(&w), Err(Error::NiggliViolation(_))));
    }

    #[test]
    fn matrix_from_params_identity_and_orientation() {
        let m = matrix_from_params(&LatticeParams::new(1.0, 1.0, 1.0, 90.0, 90.0, 90.0).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                assert!(close(m.cols[i][j], id, 1e-15));
            }
        }
        let m = matrix_from_params(&LatticeParams::new(3.0, 4.0, 5.0, 70.0, 100.0, 115.0).unwrap()).unwrap();
        assert_eq!(m.cols[0][1], 0.0);
        assert_eq!(m.cols[0][2], 0.0);
        assert_eq!(m.cols[1][2], 0.0);
        assert!(m.cols[2][2] > 0.0);
    }

    #[test]
    fn volume_examples() {
        let v = |p: [f64; 6]| cell_volume(&LatticeParams::from_array(p).unwrap());
        assert!(close(v([1.0, 1.0, 1.0, 90.0, 90.0, 90.0]), 1.0, 1e-12));
        assert!(close(v([2.0, 3.0, 4.0, 90.0, 90.0, 90.0]), 24.0, 1e-12));
        // oracle: determinant of the hexagonal-slab cell
        let h = LatticeMatrix::from_cols([[1.0, 0.0, 0.0], [0.5, 3f64.sqrt() / 2.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(close(v([1.0, 1.0, 1.0, 90.0, 90.0, 60.0]), h.det(), 1e-12));
        assert!(close(h.det(), 0.8660254037844386, 1e-15));
    }

    #[test]
    fn degenerate_angles_rejected() {
        // 120 + 120 + 120 degrees encloses zero volume
        assert!(matches!(
            LatticeParams::new(1.0, 1.0, 1.0, 120.0, 120.0, 120.0),
            Err(Error::DegenerateCell(_))
        ));
        assert!(LatticeParams::new(-1.0, 1.0, 1.0, 90.0, 90.0, 90.0).is_err());
        assert!(matches!(
            LatticeParams::new(1.0, 1.0, 1.0, 59.0, 90.0, 90.0),
            Err(Error::NiggliViolation(_))
        ));
    }

    #[test]
    fn angle_transform_examples() {
        assert_eq!(angles_to_unconstrained(90.0).unwrap(), 0.0);
        assert!(close(angles_to_unconstrained(75.0).unwrap(), -(3f64.ln()), 1e-12));
        assert!(close(-(3f64.ln()), -1.098612, 1e-6));
        assert_eq!(angles_from_unconstrained(0.0).unwrap(), 90.0);
        assert!(close(angles_from_unconstrained(3f64.ln()).unwrap(), 105.0, 1e-12));
        assert!(close(angles_from_unconstrained(800.0).unwrap(), 120.0, 1e-12));
        assert!(close(angles_from_unconstrained(-800.0).unwrap(), 60.0, 1e-12));
        assert!(angles_from_unconstrained(f64::NAN).is_err());
        assert!(angles_from_unconstrained(f64::INFINITY).is_err());
        assert!(angles_to_unconstrained(59.9).is_err());
        assert!(angles_to_unconstrained(120.1).is_err());
        // boundary values are clamped inward rather than rejected
        let lo = angles_to_unconstrained(60.0).unwrap();
        let hi = angles_to_unconstrained(120.0).unwrap();
        assert!(lo.is_finite() && hi.is_finite() && lo < -10.0 && hi > 10.0);
        assert!(close(angles_from_unconstrained(lo).unwrap(), 60.0 + ANGLE_CLAMP, 1e-9));
    }

    #[test]
    fn bit_examples() {
        assert_eq!(encode_kind(0).unwrap(), [-1.0; 7]);
        assert_eq!(encode_kind(5).unwrap(), [1.0, -1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
        assert!(matches!(encode_kind(100), Err(Error::Range(_))));
        for k in 0..NUM_CLASSES {
            assert_eq!(decode_kind(&encode_kind(k).unwrap()), k);
        }
        assert_eq!(decode_kind(&[0.0; 7]), 127);
        assert!(is_unused_class(decode_kind(&[0.0; 7])));
    }

    #[test]
    fn symmetry_examples() {
        let c = Crystal::new(
            AtomTypes::new(vec![3, 7]).unwrap(),
            TorusCloud::new(vec![[0.7, 0.2, 0.2], [0.1, 0.4, 0.9]]).unwrap(),
            LatticeParams::new(3.0, 3.0, 3.0, 90.0, 90.0, 90.0).unwrap(),
        )
        .unwrap();
        let id = SymmetryOp::permutation(vec![0, 1]).unwrap();
        assert_eq!(apply_symmetry(&c, &id).unwrap(), c);

        let sw = apply_symmetry(&c, &SymmetryOp::permutation(vec![1, 0]).unwrap()).unwrap();
        assert_eq!(sw.kinds(), &[7, 3]);
        assert_eq!(sw.frac.coords()[0], [0.1, 0.4, 0.9]);

        let t = apply_symmetry(&c, &SymmetryOp::translation([0.5, 0.0, 0.0]).unwrap()).unwrap();
        assert!(close(t.frac.coords()[0][0], 0.2, 1e-15));
        assert_eq!(t.frac.coords()[0][1], 0.2);

        let th = 0.3f64;
        let q = [[th.cos(), -th.sin(), 0.0], [th.sin(), th.cos(), 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(apply_symmetry(&c, &SymmetryOp::rotation(q).unwrap()).unwrap(), c);

        assert!(matches!(
            apply_symmetry(&c, &SymmetryOp::permutation(vec![0, 1, 2]).unwrap()),
            Err(Error::Dimension(_))
        ));
        assert!(SymmetryOp::permutation(vec![0, 0]).is_err());
        assert!(SymmetryOp::translation([0.6, 0.0, 0.0]).is_err());
        let refl = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(SymmetryOp::rotation(refl).is_err());
    }

    #[test]
    fn atomic_number_mapping() {
        assert_eq!(AtomTypes::kind_from_atomic_number(1).unwrap(), 0);
        assert_eq!(AtomTypes::kind_from_atomic_number(100).unwrap(), 99);
        assert!(AtomTypes::kind_from_atomic_number(0).is_err());
        assert!(AtomTypes::kind_from_atomic_number(101).is_err());
        assert_eq!(AtomTypes::atomic_number(10), 11);
    }
}
