//! Proxy metrics: structure matching, validity, property distances and cost arithmetic.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crystal::{matrix_from_params, norm3, Crystal, LatticeMatrix};
use crate::error::{Error, Result};

/// Minimum interatomic distance (Å) of a structurally valid crystal.
pub const MIN_DISTANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchTolerances {
    pub stol: f64,
    pub angle_tol: f64,
    pub ltol: f64,
}

impl Default for MatchTolerances {
    fn default() -> Self {
        Self { stol: 0.5, angle_tol: 10.0, ltol: 0.3 }
    }
}

impl MatchTolerances {
    pub fn new(stol: f64, angle_tol: f64, ltol: f64) -> Result<Self> {
        if !(stol > 0.0 && angle_tol > 0.0 && ltol > 0.0) {
            return Err(Error::Domain("match tolerances must be positive".into()));
        }
        Ok(Self { stol, angle_tol, ltol })
    }
}

/// Minimum-cost perfect assignment for a square cost matrix; `result[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // potentials u (rows), v (cols); p[col] = matched row, 1-based with 0 as sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

fn sorted_kinds(c: &Crystal) -> Vec<usize> {
    let mut k = c.kinds().to_vec();
    k.sort_unstable();
    k
}

fn lattices_compatible(x: &Crystal, y: &Crystal, tol: &MatchTolerances) -> bool {
    let (lx, ly) = (x.lattice.lengths(), y.lattice.lengths());
    let (ax, ay) = (x.lattice.angles(), y.lattice.angles());
    (0..3).all(|k| lx[k].max(ly[k]) / lx[k].min(ly[k]) - 1.0 <= tol.ltol)
        && (0..3).all(|k| (ax[k] - ay[k]).abs() <= tol.angle_tol)
}

fn wrap_half(x: f64) -> f64 {
    x - x.round()
}

/// Fractional displacement from `a` to `b` whose Cartesian image is shortest among the 27 neighbours.
fn min_image(l: &LatticeMatrix, a: [f64; 3], b: [f64; 3]) -> ([f64; 3], f64) {
    let d0: [f64; 3] = std::array::from_fn(|k| wrap_half(b[k] - a[k]));
    let mut best = (d0, f64::INFINITY);
    for i in -1..=1 {
        for j in -1..=1 {
            for k in -1..=1 {
                let d = [d0[0] + i as f64, d0[1] + j as f64, d0[2] + k as f64];
                let r = norm3(l.apply(d));
                if r < best.1 {
                    best = (d, r);
                }
            }
        }
    }
    best
}

/// Sites of `x` that `y` may be anchored to: the rarest species (smallest class on ties).
fn anchor_species(kinds: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &k in kinds {
        *counts.entry(k).or_default() += 1;
    }
    counts.iter().min_by_key(|(k, c)| (**c, **k)).map(|(k, _)| *k).unwrap()
}

/// Normalized RMSD between two crystals if they match within `tol`, otherwise `None`.
///
/// Both cells are compared in the average of their canonical lattice matrices,
/// `y` is anchored on every same-species site pair of the rarest species,
/// sites are paired by optimal assignment on minimal-image distances and the
/// mean displacement is removed before the site tolerance is checked.
pub fn match_structures(x: &Crystal, y: &Crystal, tol: &MatchTolerances) -> Option<f64> {
    let n = x.num_atoms();
    if sorted_kinds(x) != sorted_kinds(y) || !lattices_compatible(x, y, tol) {
        return None;
    }
    let mx = matrix_from_params(&x.lattice).ok()?;
    let my = matrix_from_params(&y.lattice).ok()?;
    let l = LatticeMatrix::from_cols(std::array::from_fn(|c| std::array::from_fn(|r| 0.5 * (mx.cols[c][r] + my.cols[c][r]))));
    let volume = 0.5 * (x.lattice.volume() + y.lattice.volume());
    let scale = (volume / n as f64).cbrt();
    let max_disp = tol.stol * scale;

    let species: Vec<usize> = {
        let mut s = x.kinds().to_vec();
        s.sort_unstable();
        s.dedup();
        s
    };
    let groups: Vec<(Vec<usize>, Vec<usize>)> = species
        .iter()
        .map(|&s| {
            let gx = (0..n).filter(|&i| x.kinds()[i] == s).collect();
            let gy = (0..n).filter(|&i| y.kinds()[i] == s).collect();
            (gx, gy)
        })
        .collect();

    let anchor = anchor_species(x.kinds());
    let fx = x.frac.coords();
    let fy = y.frac.coords();
    let mut best: Option<f64> = None;
    for i in (0..n).filter(|&i| x.kinds()[i] == anchor) {
        for j in (0..n).filter(|&j| y.kinds()[j] == anchor) {
            let tau: [f64; 3] = std::array::from_fn(|k| fx[i][k] - fy[j][k]);
            let mut disp = Vec::with_capacity(n);
            for (gx, gy) in &groups {
                let cost: Vec<Vec<f64>> = gx
                    .iter()
                    .map(|&a| {
                        gy.iter()
                            .map(|&b| {
                                let shifted = std::array::from_fn(|k| fy[b][k] + tau[k]);
                                min_image(&l, fx[a], shifted).1.powi(2)
                            })
                            .collect()
                    })
                    .collect();
                for (r, c) in hungarian(&cost).into_iter().enumerate() {
                    let shifted = std::array::from_fn(|k| fy[gy[c]][k] + tau[k]);
                    disp.push(min_image(&l, fx[gx[r]], shifted).0);
                }
            }
            let mean: [f64; 3] = std::array::from_fn(|k| disp.iter().map(|d| d[k]).sum::<f64>() / n as f64);
            let dists: Vec<f64> =
                disp.iter().map(|d| norm3(l.apply(std::array::from_fn(|k| d[k] - mean[k])))).collect();
            let worst = dists.iter().cloned().fold(0.0, f64::max);
            if worst <= max_disp {
                let rmsd = (dists.iter().map(|d| d * d).sum::<f64>() / n as f64).sqrt() / scale;
                best = Some(best.map_or(rmsd, |b: f64| b.min(rmsd)));
            }
        }
    }
    best
}

/// Fraction of matched pairs and mean normalized RMSD over the matches.
pub fn match_rate(
    generated: &[Option<Crystal>],
    references: &[Crystal],
    tol: &MatchTolerances,
) -> Result<(f64, Option<f64>)> {
    if generated.len() != references.len() {
        return Err(Error::Pairing(generated.len(), references.len()));
    }
    if references.is_empty() {
        return Err(Error::InsufficientData("no structures to match".into()));
    }
    let hits: Vec<Option<f64>> = generated
        .par_iter()
        .zip(references.par_iter())
        .map(|(g, r)| g.as_ref().and_then(|g| match_structures(g, r, tol)))
        .collect();
    let matched: Vec<f64> = hits.into_iter().flatten().collect();
    let rate = matched.len() as f64 / references.len() as f64;
    let rmse = (!matched.is_empty()).then(|| matched.iter().sum::<f64>() / matched.len() as f64);
    Ok((rate, rmse))
}

/// Smallest Cartesian distance between any two sites, including periodic self-images.
pub fn min_interatomic_distance(c: &Crystal) -> f64 {
    let Ok(l) = matrix_from_params(&c.lattice) else {
        return 0.0;
    };
    let f = c.frac.coords();
    let mut best = f64::INFINITY;
    for i in 0..f.len() {
        for j in i..f.len() {
            let d0: [f64; 3] = std::array::from_fn(|k| wrap_half(f[j][k] - f[i][k]));
            for a in -1..=1 {
                for b in -1..=1 {
                    for e in -1..=1 {
                        if i == j && a == 0 && b == 0 && e == 0 {
                            continue;
                        }
                        let d = [d0[0] + a as f64, d0[1] + b as f64, d0[2] + e as f64];
                        best = best.min(norm3(l.apply(d)));
                    }
                }
            }
        }
    }
    best
}

/// True iff every pair of sites (and every site and its own images) is more than 0.5 Å apart.
pub fn structural_validity(c: &Crystal) -> bool {
    min_interatomic_distance(c) > MIN_DISTANCE
}

/// Exact 1-Wasserstein distance between two empirical distributions on the line.
pub fn wasserstein_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Data("wasserstein distance needs nonempty samples".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Data("wasserstein distance needs finite samples".into()));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = a.iter().chain(&b).cloned().collect();
    all.sort_by(f64::total_cmp);
    // integral of |F - G| over consecutive breakpoints
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut total = 0.0;
    for w in all.windows(2) {
        while ia < a.len() && a[ia] <= w[0] {
            ia += 1;
        }
        while ib < b.len() && b[ib] <= w[0] {
            ib += 1;
        }
        total += (ia as f64 / na - ib as f64 / nb).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

/// Number density (atoms per Å³) and number of distinct elements.
pub fn density_and_nary(c: &Crystal) -> (f64, usize) {
    let mut k = sorted_kinds(c);
    k.dedup();
    (c.num_atoms() as f64 / c.lattice.volume(), k.len())
}

/// `rate = n_hit / n_gen` and `cost = steps / rate` (infinite when nothing hits).
pub fn rate_cost(n_hit: usize, n_gen: usize, steps: usize) -> Result<(f64, f64)> {
    if n_gen == 0 {
        return Err(Error::Domain("rate needs at least one generation".into()));
    }
    if steps == 0 {
        return Err(Error::Domain("cost needs at least one integration step".into()));
    }
    if n_hit > n_gen {
        return Err(Error::Domain(format!("{n_hit} hits out of {n_gen} generations")));
    }
    let rate = n_hit as f64 / n_gen as f64;
    let cost = if n_hit == 0 { f64::INFINITY } else { steps as f64 / rate };
    Ok((rate, cost))
}

/// Counts kept so a downstream stability rate can be formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StabilityInputs {
    pub n_generated: usize,
    pub n_valid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Present only for paired corpora.
    pub match_rate: Option<f64>,
    pub mean_rmse: Option<f64>,
    pub structural_validity_rate: f64,
    pub wdist_rho: f64,
    pub wdist_nel: f64,
    /// Number of generated crystals per count of distinct elements.
    pub nary_histogram: BTreeMap<usize, usize>,
    pub stability_rate_inputs: StabilityInputs,
}

impl MetricReport {
    /// Histogram as `bin,count` CSV.
    pub fn nary_csv(&self) -> String {
        let mut s = String::from("bin,count\n");
        for (k, v) in &self.nary_histogram {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }
}

/// Evaluates generations (`None` marks an invalid sample) against a reference corpus.
pub fn evaluate(
    generated: &[Option<Crystal>],
    references: &[Crystal],
    tol: &MatchTolerances,
    paired: bool,
) -> Result<MetricReport> {
    if generated.is_empty() || references.is_empty() {
        return Err(Error::InsufficientData("both corpora must be nonempty".into()));
    }
    let (match_rate, mean_rmse) = if paired {
        let (r, e) = self::match_rate(generated, references, tol)?;
        (Some(r), e)
    } else {
        (None, None)
    };
    let valid: Vec<&Crystal> = generated.iter().flatten().collect();
    let n_struct_valid = valid.par_iter().filter(|c| structural_validity(c)).count();
    let props = |cs: &[&Crystal]| -> (Vec<f64>, Vec<f64>) {
        cs.iter().map(|c| density_and_nary(c)).map(|(r, n)| (r, n as f64)).unzip()
    };
    let (gr, gn) = props(&valid);
    let refs: Vec<&Crystal> = references.iter().collect();
    let (rr, rn) = props(&refs);
    let (wdist_rho, wdist_nel) = if valid.is_empty() {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (wasserstein_1d(&gr, &rr)?, wasserstein_1d(&gn, &rn)?)
    };
    let mut nary_histogram = BTreeMap::new();
    for n in &gn {
        *nary_histogram.entry(*n as usize).or_insert(0) += 1;
    }
    Ok(MetricReport {
        match_rate,
        mean_rmse,
        structural_validity_rate: n_struct_valid as f64 / generated.len() as f64,
        wdist_rho,
        wdist_nel,
        nary_histogram,
        stability_rate_inputs: StabilityInputs { n_generated: generated.len(), n_valid: valid.len() },
    })
}
