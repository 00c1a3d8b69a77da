//! Base distribution `p(a) p(f) p(l)` and the empirical atom-count distribution `p(n)`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::crystal::{angles_to_unconstrained, Crystal, ANGLE_MAX, ANGLE_MIN, NUM_BITS};
use crate::error::{Error, Result};
use crate::flowmatch::{FlowState, Task};
use crate::geometry::TorusCloud;

pub const SCALE_FLOOR: f64 = 1e-6;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-axis log-normal prior over the lattice lengths `(a, b, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthPrior {
    pub loc: [f64; 3],
    pub scale: [f64; 3],
}

impl LengthPrior {
    pub fn new(loc: [f64; 3], scale: [f64; 3]) -> Result<Self> {
        if loc.iter().chain(&scale).any(|x| !x.is_finite()) || scale.iter().any(|&s| s < SCALE_FLOOR) {
            return Err(Error::Domain(format!("invalid length prior loc={loc:?} scale={scale:?}")));
        }
        Ok(Self { loc, scale })
    }

    /// Log-likelihood of a set of length triples.
    pub fn log_likelihood(&self, lengths: &[[f64; 3]]) -> f64 {
        lengths
            .iter()
            .map(|l| (0..3).map(|k| lognormal_logpdf(l[k], self.loc[k], self.scale[k])).sum::<f64>())
            .sum()
    }
}

fn lognormal_logpdf(x: f64, loc: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let z = (x.ln() - loc) / scale;
    -0.5 * z * z - x.ln() - scale.ln() - LN_SQRT_2PI
}

/// Maximum-likelihood log-normal fit: mean and population standard deviation of log lengths.
pub fn fit_length_prior(lengths: &[[f64; 3]]) -> Result<LengthPrior> {
    if lengths.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "length prior needs at least 2 samples, got {}",
            lengths.len()
        )));
    }
    if let Some(bad) = lengths.iter().flatten().find(|&&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::Data(format!("non-positive lattice length {bad}")));
    }
    let n = lengths.len() as f64;
    let mut loc = [0.0; 3];
    let mut scale = [0.0; 3];
    for k in 0..3 {
        let mean = lengths.iter().map(|l| l[k].ln()).sum::<f64>() / n;
        let var = lengths.iter().map(|l| (l[k].ln() - mean).powi(2)).sum::<f64>() / n;
        loc[k] = mean;
        scale[k] = var.sqrt().max(SCALE_FLOOR);
    }
    Ok(LengthPrior { loc, scale })
}

/// Empirical frequencies of atom counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomCountTable {
    pub counts: BTreeMap<usize, f64>,
}

impl AtomCountTable {
    pub fn new(counts: BTreeMap<usize, f64>) -> Result<Self> {
        if counts.values().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Data("atom-count frequencies must be nonnegative".into()));
        }
        if counts.keys().any(|&n| n == 0) {
            return Err(Error::Data("atom count 0 is not a crystal".into()));
        }
        if counts.values().sum::<f64>() <= 0.0 {
            return Err(Error::InsufficientData("atom-count table is empty".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_crystals<'a>(crystals: impl IntoIterator<Item = &'a Crystal>) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for c in crystals {
            *counts.entry(c.num_atoms()).or_insert(0.0) += 1.0;
        }
        Self::new(counts)
    }

    /// Normalized probability of each count.
    pub fn probabilities(&self) -> BTreeMap<usize, f64> {
        let total: f64 = self.counts.values().sum();
        self.counts.iter().map(|(&n, &w)| (n, w / total)).collect()
    }

    pub fn max_atoms(&self) -> usize {
        self.counts.iter().filter(|(_, &w)| w > 0.0).map(|(&n, _)| n).max().unwrap_or(0)
    }
}

pub fn sample_num_atoms<R: Rng + ?Sized>(table: &AtomCountTable, rng: &mut R) -> Result<usize> {
    if table.counts.is_empty() {
        return Err(Error::InsufficientData("atom-count table is empty".into()));
    }
    let keys: Vec<usize> = table.counts.keys().copied().collect();
    let dist = WeightedIndex::new(table.counts.values().copied())
        .map_err(|e| Error::InsufficientData(format!("atom-count table: {e}")))?;
    Ok(keys[dist.sample(rng)])
}

/// Draws `c0`: uniform torus, log-normal lengths, uniform angles mapped to
/// unconstrained space, and standard-normal bits for de novo generation.
pub fn sample_base<R: Rng + ?Sized>(n: usize, task: Task, prior: &LengthPrior, rng: &mut R) -> Result<FlowState> {
    if n < 1 {
        return Err(Error::Domain("base sample needs at least one atom".into()));
    }
    let coords: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let mut lattice = [0.0; 6];
    for k in 0..3 {
        let d = LogNormal::new(prior.loc[k], prior.scale[k]).map_err(|e| Error::Domain(e.to_string()))?;
        lattice[k] = d.sample(rng);
    }
    for slot in lattice.iter_mut().skip(3) {
        // strictly inside (60, 120) so the logit stays finite
        let angle = loop {
            let a = rng.random_range(ANGLE_MIN..ANGLE_MAX);
            if a > ANGLE_MIN {
                break a;
            }
        };
        *slot = angles_to_unconstrained(angle)?;
    }
    let bits = match task {
        Task::Csp => None,
        Task::Dng => Some(
            (0..n)
                .map(|_| std::array::from_fn(|_| StandardNormal.sample(rng)))
                .collect::<Vec<[f64; NUM_BITS]>>(),
        ),
    };
    Ok(FlowState { bits, frac: TorusCloud::new(coords)?, lattice })
}

/// Log-density of an unconstrained angle whose constrained image is `Uniform(60, 120)`.
pub fn angle_log_density(y: f64) -> f64 {
    // p(y) = sigmoid(y) sigmoid(-y)
    -softplus(-y) - softplus(y)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Log-density of a flow state under the base distribution.
pub fn base_log_density(state: &FlowState, task: Task, prior: &LengthPrior) -> Result<f64> {
    let mut lp = 0.0;
    // p(f) is uniform on the torus; TorusCloud guarantees the domain.
    for k in 0..3 {
        let x = state.lattice[k];
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::Domain(format!("lattice length {x} outside the prior support")));
        }
        lp += lognormal_logpdf(x, prior.loc[k], prior.scale[k]);
    }
    for &y in &state.lattice[3..] {
        if !y.is_finite() {
            return Err(Error::Domain("non-finite unconstrained angle".into()));
        }
        lp += angle_log_density(y);
    }
    match (task, &state.bits) {
        (Task::Csp, _) => {}
        (Task::Dng, Some(bits)) => {
            for &x in bits.iter().flatten() {
                if !x.is_finite() {
                    return Err(Error::Domain("non-finite atom bit".into()));
                }
                lp += -0.5 * x * x - LN_SQRT_2PI;
            }
        }
        (Task::Dng, None) => return Err(Error::Domain("de novo state without atom bits".into())),
    }
    Ok(lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::angles_from_unconstrained;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fit_examples() {
        let e = std::f64::consts::E;
        let p = fit_length_prior(&[[e; 3], [e; 3], [e; 3]]).unwrap();
        for k in 0..3 {
            assert!((p.loc[k] - 1.0).abs() < 1e-15);
            assert_eq!(p.scale[k], SCALE_FLOOR);
        }
        let p = fit_length_prior(&[[1.0, 1.0, 1.0], [e * e, e * e, e * e]]).unwrap();
        assert!((p.loc[0] - 1.0).abs() < 1e-15 && (p.scale[0] - 1.0).abs() < 1e-15);

        assert!(matches!(fit_length_prior(&[[1.0; 3]]), Err(Error::InsufficientData(_))));
        assert!(matches!(fit_length_prior(&[[1.0; 3], [0.0, 1.0, 1.0]]), Err(Error::Data(_))));
    }

    #[test]
    fn fitted_prior_beats_perturbed_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = LogNormal::new(1.2, 0.15).unwrap();
        let data: Vec<[f64; 3]> =
            (0..500).map(|_| [truth.sample(&mut rng), truth.sample(&mut rng), truth.sample(&mut rng)]).collect();
        let fit = fit_length_prior(&data).unwrap();
        let best = fit.log_likelihood(&data);
        for dl in [-0.1, 0.1] {
            for ds in [-0.1, 0.0, 0.1] {
                let p = LengthPrior {
                    loc: fit.loc.map(|x| x * (1.0 + dl)),
                    scale: fit.scale.map(|x| x * (1.0 + ds)),
                };
                assert!(p.log_likelihood(&data) < best);
                let q = LengthPrior { loc: fit.loc, scale: fit.scale.map(|x| x * (1.0 + dl)) };
                assert!(q.log_likelihood(&data) < best);
            }
        }
    }

    #[test]
    fn count_table_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let point = AtomCountTable::new(BTreeMap::from([(4, 1.0)])).unwrap();
        assert!((0..100).all(|_| sample_num_atoms(&point, &mut rng).unwrap() == 4));
        assert!(AtomCountTable::new(BTreeMap::new()).is_err());
        let empty = AtomCountTable { counts: BTreeMap::new() };
        assert!(matches!(sample_num_atoms(&empty, &mut rng), Err(Error::InsufficientData(_))));

        let t = AtomCountTable::new(BTreeMap::from([(2, 1.0), (4, 3.0)])).unwrap();
        let scaled = AtomCountTable::new(BTreeMap::from([(2, 10.0), (4, 30.0)])).unwrap();
        assert_eq!(t.probabilities(), scaled.probabilities());
    }

    #[test]
    fn base_sample_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prior = LengthPrior::new([1.0; 3], [0.1; 3]).unwrap();
        let s = sample_base(3, Task::Csp, &prior, &mut rng).unwrap();
        assert!(s.bits.is_none());
        assert_eq!(s.num_atoms(), 3);
        let s = sample_base(3, Task::Dng, &prior, &mut rng).unwrap();
        assert_eq!(s.bits.as_ref().unwrap().len(), 3);
        for &y in &s.lattice[3..] {
            let a = angles_from_unconstrained(y).unwrap();
            assert!(a > 60.0 && a < 120.0);
        }
        assert!(sample_base(0, Task::Csp, &prior, &mut rng).is_err());
    }

    #[test]
    fn density_examples() {
        assert_eq!(angle_log_density(1.3), angle_log_density(-1.3));
        assert!((angle_log_density(0.0) - 0.25f64.ln()).abs() < 1e-15);

        let prior = LengthPrior::new([1.0; 3], [0.2; 3]).unwrap();
        let s = FlowState {
            bits: None,
            frac: TorusCloud::new(vec![[0.1, 0.2, 0.3]]).unwrap(),
            lattice: [2.5, 2.7, 3.0, 0.1, 0.2, 0.3],
        };
        let moved = FlowState { frac: TorusCloud::new(vec![[0.9, 0.4, 0.7]]).unwrap(), ..s.clone() };
        assert_eq!(
            base_log_density(&s, Task::Csp, &prior).unwrap(),
            base_log_density(&moved, Task::Csp, &prior).unwrap()
        );
        let bad = FlowState { lattice: [-1.0, 2.7, 3.0, 0.1, 0.2, 0.3], ..s.clone() };
        assert!(matches!(base_log_density(&bad, Task::Csp, &prior), Err(Error::Domain(_))));
        assert!(base_log_density(&s, Task::Dng, &prior).is_err());
    }

    #[test]
    fn angle_marginal_integrates_to_one() {
        // trapezoid quadrature over [-40, 40]; tails beyond are below 1e-17
        let n = 80_000;
        let (lo, hi) = (-40.0, 40.0);
        let h = (hi - lo) / n as f64;
        let integral: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * angle_log_density(lo + i as f64 * h).exp()
            })
            .sum::<f64>()
            * h;
        assert!((integral - 1.0).abs() < 0.01, "{integral}");
        assert!((integral - 1.0).abs() < 1e-9, "{integral}");
    }
}
