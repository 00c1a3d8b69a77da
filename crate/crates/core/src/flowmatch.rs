//! Conditional vector-field targets, conditional path sampling and the
//! flow-matching regression loss with its auxiliary bit cross-entropy.

use serde::{Deserialize, Serialize};

use crate::crystal::{angles_to_unconstrained, Bits, Crystal, NUM_BITS};
use crate::error::{Error, Result};
use crate::geometry::{torus_geodesic, torus_log, TorusCloud, TorusTangent};

/// Largest sampled training time is `1 - T_EPS`.
pub const T_EPS: f64 = 1e-5;

/// Crystal structure prediction (composition given) or de novo generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Csp,
    Dng,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csp" => Ok(Task::Csp),
            "dng" => Ok(Task::Dng),
            other => Err(Error::Config(format!("unknown task mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Csp => "csp",
            Task::Dng => "dng",
        })
    }
}

/// The flowed state `c = (a, f, l)`.
///
/// `lattice` holds the three raw lengths followed by the three angles in
/// unconstrained space. `bits` is present only for de novo generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub bits: Option<Vec<Bits>>,
    pub frac: TorusCloud,
    pub lattice: [f64; 6],
}

impl FlowState {
    pub fn from_crystal(c: &Crystal, task: Task) -> Result<Self> {
        let l = c.lattice;
        let lattice = [
            l.a,
            l.b,
            l.c,
            angles_to_unconstrained(l.alpha)?,
            angles_to_unconstrained(l.beta)?,
            angles_to_unconstrained(l.gamma)?,
        ];
        let bits = match task {
            Task::Csp => None,
            Task::Dng => Some(c.atoms.bits()),
        };
        Ok(Self { bits, frac: c.frac.clone(), lattice })
    }

    pub fn num_atoms(&self) -> usize {
        self.frac.len()
    }

    pub fn is_finite(&self) -> bool {
        self.lattice.iter().all(|x| x.is_finite())
            && self.bits.iter().flatten().flatten().all(|x| x.is_finite())
    }
}

/// Per-component tangent vectors: bits (flattened `n×7`), fractional coordinates, lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentState {
    pub da: Vec<f64>,
    pub df: Vec<[f64; 3]>,
    pub dl: [f64; 6],
}

impl TangentState {
    pub fn zeros(n: usize) -> Self {
        Self { da: vec![0.0; n * NUM_BITS], df: vec![[0.0; 3]; n], dl: [0.0; 6] }
    }

    pub fn is_finite(&self) -> bool {
        self.da.iter().chain(self.df.as_flattened()).chain(&self.dl).all(|x| x.is_finite())
    }

    /// Reorders atoms: position `i` takes atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let da = if self.da.is_empty() {
            Vec::new()
        } else {
            perm.iter()
                .flat_map(|&p| self.da[p * NUM_BITS..(p + 1) * NUM_BITS].iter().copied())
                .collect()
        };
        Self { da, df: perm.iter().map(|&p| self.df[p]).collect(), dl: self.dl }
    }
}

/// Euclidean conditional field `(m1 - m) / (1 - t)`.
pub fn cond_vf_euclidean(m: &[f64], m1: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Schedule(t));
    }
    if m.len() != m1.len() {
        return Err(Error::Dimension(format!("{} vs {} components", m.len(), m1.len())));
    }
    Ok(m.iter().zip(m1).map(|(a, b)| (b - a) / (1.0 - t)).collect())
}

/// Translation-invariant torus target: `log_{f0}(f1)` with its atom mean removed.
pub fn cond_vf_torus_meanfree(f0: &TorusCloud, f1: &TorusCloud) -> Result<TorusTangent> {
    Ok(torus_log(f0, f1)?.mean_free())
}

/// A regression pair: the interpolated state at time `t` and its target velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub t: f64,
    pub c_t: FlowState,
    pub target: TangentState,
}

/// Evaluates the conditional geodesic path from `c0` to `c1` at time `t`.
pub fn sample_conditional_path(c0: &FlowState, c1: &FlowState, t: f64, task: Task) -> Result<PathSample> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Schedule(t));
    }
    let n = c1.num_atoms();
    if c0.num_atoms() != n {
        return Err(Error::Dimension(format!("{} vs {} atoms", c0.num_atoms(), n)));
    }
    let (bits, da) = match task {
        Task::Csp => (None, vec![0.0; n * NUM_BITS]),
        Task::Dng => {
            let (Some(a0), Some(a1)) = (&c0.bits, &c1.bits) else {
                return Err(Error::Dimension("de novo states need atom bits".into()));
            };
            let bt = a0
                .iter()
                .zip(a1)
                .map(|(x, y)| std::array::from_fn(|j| (1.0 - t) * x[j] + t * y[j]))
                .collect();
            let da = a0
                .iter()
                .zip(a1)
                .flat_map(|(x, y)| (0..NUM_BITS).map(move |j| y[j] - x[j]))
                .collect();
            (Some(bt), da)
        }
    };
    let frac = torus_geodesic(&c0.frac, &c1.frac, t)?;
    let df = cond_vf_torus_meanfree(&c0.frac, &c1.frac)?.vec;
    let lattice = std::array::from_fn(|k| (1.0 - t) * c0.lattice[k] + t * c1.lattice[k]);
    let dl = std::array::from_fn(|k| c1.lattice[k] - c0.lattice[k]);
    Ok(PathSample { t, c_t: FlowState { bits, frac, lattice }, target: TangentState { da, df, dl } })
}

/// Unnormalized loss weights; normalized to an affine combination before use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_f: f64,
    pub lambda_l: f64,
    pub lambda_sce: f64,
}

impl LossWeights {
    /// Table defaults: CSP `(0, 300, 1, 0)`, DNG `(300, 600, 1, 20)`.
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Csp => Self { lambda_a: 0.0, lambda_f: 300.0, lambda_l: 1.0, lambda_sce: 0.0 },
            Task::Dng => Self { lambda_a: 300.0, lambda_f: 600.0, lambda_l: 1.0, lambda_sce: 20.0 },
        }
    }

    /// Weights divided by their sum. CSP forbids atom and cross-entropy terms.
    pub fn normalized(&self, task: Task) -> Result<NormalizedWeights> {
        let all = [self.lambda_a, self.lambda_f, self.lambda_l, self.lambda_sce];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {all:?}")));
        }
        if task == Task::Csp && (self.lambda_a > 0.0 || self.lambda_sce > 0.0) {
            return Err(Error::Config(
                "crystal structure prediction fixes the atom field at zero; lambda_a and lambda_sce must be 0"
                    .into(),
            ));
        }
        let total: f64 = all.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("loss weights sum to zero".into()));
        }
        Ok(NormalizedWeights {
            a: self.lambda_a / total,
            f: self.lambda_f / total,
            l: self.lambda_l / total,
            sce: self.lambda_sce / total,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedWeights {
    pub a: f64,
    pub f: f64,
    pub l: f64,
    pub sce: f64,
}

/// Weighted loss components of one crystal (or their batch mean).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub a: f64,
    pub f: f64,
    pub l: f64,
    pub sce: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.a + self.f + self.l + self.sce
    }

    pub fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.a += s * o.a;
        self.f += s * o.f;
        self.l += s * o.l;
        self.sce += s * o.sce;
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_shapes(pred: &TangentState, target: &TangentState, task: Task) -> Result<usize> {
    let n = target.df.len();
    if pred.df.len() != n {
        return Err(Error::Dimension(format!("{} vs {} atoms", pred.df.len(), n)));
    }
    if task == Task::Dng && (pred.da.len() != n * NUM_BITS || target.da.len() != n * NUM_BITS) {
        return Err(Error::Dimension("atom-bit velocity must be n×7".into()));
    }
    if !pred.is_finite() || !target.is_finite() {
        return Err(Error::Numeric("non-finite value in loss inputs".into()));
    }
    Ok(n)
}

/// Dimension-normalized weighted squared error per component.
pub fn fm_loss_terms(
    pred: &TangentState,
    target: &TangentState,
    w: &LossWeights,
    task: Task,
) -> Result<LossTerms> {
    let nw = w.normalized(task)?;
    let n = check_shapes(pred, target, task)? as f64;
    let a = match task {
        Task::Csp => 0.0,
        Task::Dng => nw.a / (NUM_BITS as f64 * n) * sq_dist(&pred.da, &target.da),
    };
    let f = nw.f / (3.0 * n) * sq_dist(pred.df.as_flattened(), target.df.as_flattened());
    let l = nw.l / 6.0 * sq_dist(&pred.dl, &target.dl);
    Ok(LossTerms { a, f, l, sce: 0.0 })
}

/// Flow-matching regression loss of one crystal.
pub fn fm_loss(pred: &TangentState, target: &TangentState, w: &LossWeights, task: Task) -> Result<f64> {
    Ok(fm_loss_terms(pred, target, w, task)?.total())
}

/// Gradient of [`fm_loss`] with respect to `pred`.
pub fn fm_loss_grad(
    pred: &TangentState,
    target: &TangentState,
    w: &LossWeights,
    task: Task,
) -> Result<TangentState> {
    let nw = w.normalized(task)?;
    let n = check_shapes(pred, target, task)?;
    let nf = n as f64;
    let da = match task {
        Task::Csp => vec![0.0; pred.da.len()],
        Task::Dng => {
            let s = 2.0 * nw.a / (NUM_BITS as f64 * nf);
            pred.da.iter().zip(&target.da).map(|(p, q)| s * (p - q)).collect()
        }
    };
    let sf = 2.0 * nw.f / (3.0 * nf);
    let df = pred
        .df
        .iter()
        .zip(&target.df)
        .map(|(p, q)| std::array::from_fn(|k| sf * (p[k] - q[k])))
        .collect();
    let sl = 2.0 * nw.l / 6.0;
    let dl = std::array::from_fn(|k| sl * (pred.dl[k] - target.dl[k]));
    Ok(TangentState { da, df, dl })
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sigmoid cross-entropy `-log sigmoid(a1 · â1)` summed over atoms,
/// with `â1 = (1 - t) pred_da + a_t` the one-step bit extrapolation.
pub fn sce_loss(a1_bits: &[Bits], pred_da: &[f64], a_t: &[Bits], t: f64) -> f64 {
    a1_bits
        .iter()
        .zip(a_t)
        .enumerate()
        .map(|(i, (a1, at))| {
            let x: f64 = (0..NUM_BITS).map(|j| a1[j] * ((1.0 - t) * pred_da[i * NUM_BITS + j] + at[j])).sum();
            softplus(-x)
        })
        .sum()
}

/// Gradient of [`sce_loss`] with respect to `pred_da`.
pub fn sce_loss_grad(a1_bits: &[Bits], pred_da: &[f64], a_t: &[Bits], t: f64) -> Vec<f64> {
    let mut g = vec![0.0; pred_da.len()];
    for (i, (a1, at)) in a1_bits.iter().zip(a_t).enumerate() {
        let x: f64 = (0..NUM_BITS).map(|j| a1[j] * ((1.0 - t) * pred_da[i * NUM_BITS + j] + at[j])).sum();
        // d softplus(-x)/dx = -sigmoid(-x)
        let dx = -crate::crystal::sigmoid(-x);
        for j in 0..NUM_BITS {
            g[i * NUM_BITS + j] = dx * (1.0 - t) * a1[j];
        }
    }
    g
}
