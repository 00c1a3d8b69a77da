//! Acceptance criteria, one printed line each. Exits nonzero if any fails.

use std::time::Instant;

use flowcryst::basedist::{
    base_log_density, fit_length_prior, sample_base, sample_num_atoms, AtomCountTable, LengthPrior,
};
use flowcryst::crystal::{
    angles_from_unconstrained, angles_to_unconstrained, apply_symmetry, decode_kind, encode_kind, gram_from_params,
    matrix_from_params, params_from_matrix, AtomTypes, Crystal, LatticeMatrix, LatticeParams, SymmetryOp,
    NUM_BITS, NUM_CLASSES,
};
use flowcryst::engine::{
    euler_step, integrate, reconstruct_many, train, AnnealFlags, ConditionalField, IntegrationConfig, RunConfig,
};
use flowcryst::flowmatch::{sample_conditional_path, FlowState, LossWeights, Task};
use flowcryst::geometry::{
    geodesic_point, torus_exp, torus_log, EuclideanVec, ManifoldPoint, TorusCloud, TorusTangent,
};
use flowcryst::metrics::{
    match_rate, match_structures, rate_cost, structural_validity, wasserstein_1d, MatchTolerances,
};
use flowcryst::net::{Model, NetConfig, TrainItem};
use flowcryst::synth::{perov_family, separation_histogram, total_variation, ToyTorus};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, checks: Vec<(bool, String)>) -> Outcome {
    let pass = checks.iter().all(|c| c.0);
    let detail = checks
        .iter()
        .map(|(ok, d)| if *ok { d.clone() } else { format!("FAILED {d}") })
        .collect::<Vec<_>>()
        .join("; ");
    let o = Outcome { id, name, pass, detail };
    println!("{} [{}] {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    o
}

fn within(name: &str, measured: f64, tol: f64) -> (bool, String) {
    (measured <= tol, format!("{name} {measured:.3e} <= {tol:.0e}"))
}

/// Signed circular difference in `[-1/2, 1/2]`, computed with `round`.
fn wrap_diff(a: f64, b: f64) -> f64 {
    let d = a - b;
    d - d.round()
}

fn cloud<R: Rng>(n: usize, rng: &mut R) -> TorusCloud {
    TorusCloud::new((0..n).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect()).unwrap()
}

fn shifted(f: &TorusCloud, tau: [f64; 3]) -> TorusCloud {
    torus_exp(f, &TorusTangent { vec: vec![tau; f.len()] }).unwrap()
}

fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn random_params<R: Rng>(rng: &mut R) -> LatticeParams {
    loop {
        let p = [
            rng.random_range(2.0..12.0),
            rng.random_range(2.0..12.0),
            rng.random_range(2.0..12.0),
            rng.random_range(61.0..119.0),
            rng.random_range(61.0..119.0),
            rng.random_range(61.0..119.0),
        ];
        if let Ok(l) = LatticeParams::from_array(p) {
            return l;
        }
    }
}

fn random_crystal<R: Rng>(n: usize, rng: &mut R) -> Crystal {
    let kinds = (0..n).map(|_| rng.random_range(0..4)).collect();
    let l = rng.random_range(4.0..8.0);
    let lattice = LatticeParams::new(
        l,
        l * rng.random_range(0.9..1.1),
        l * rng.random_range(0.9..1.1),
        rng.random_range(80.0..100.0),
        rng.random_range(80.0..100.0),
        rng.random_range(80.0..100.0),
    )
    .unwrap();
    Crystal::new(AtomTypes::new(kinds).unwrap(), cloud(n, rng), lattice).unwrap()
}

fn permute_state(s: &FlowState, perm: &[usize]) -> FlowState {
    FlowState {
        bits: s.bits.as_ref().map(|b| perm.iter().map(|&p| b[p]).collect()),
        frac: TorusCloud::new(perm.iter().map(|&p| s.frac.coords()[p]).collect()).unwrap(),
        lattice: s.lattice,
    }
}

fn geometry() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cases = 10_000;
    let (mut inv, mut range, mut anti, mut shift, mut ends) = (0.0f64, true, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let n = rng.random_range(1..6);
        let f0 = cloud(n, &mut rng);
        let f1 = cloud(n, &mut rng);
        let v = torus_log(&f0, &f1).unwrap();
        let back = torus_exp(&f0, &v).unwrap();
        for (a, b) in back.coords().iter().flatten().zip(f1.coords().iter().flatten()) {
            inv = inv.max(wrap_diff(*a, *b).abs());
        }
        range &= v.vec.iter().flatten().all(|x| *x > -0.5 && *x <= 0.5);
        let w = torus_log(&f1, &f0).unwrap();
        for (a, b) in v.vec.iter().flatten().zip(w.vec.iter().flatten()) {
            if a.abs() < 0.5 - 1e-9 {
                anti = anti.max((a + b).abs());
            }
        }
        let tau: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        let vs = torus_log(&shifted(&f0, tau), &shifted(&f1, tau)).unwrap();
        for (a, b) in v.vec.iter().flatten().zip(vs.vec.iter().flatten()) {
            if a.abs() < 0.5 - 1e-9 {
                shift = shift.max((a - b).abs());
            }
        }
        let (p0, p1) = (ManifoldPoint::Torus(f0.clone()), ManifoldPoint::Torus(f1.clone()));
        for (t, want) in [(0.0, &f0), (1.0, &f1)] {
            let ManifoldPoint::Torus(g) = geodesic_point(&p0, &p1, t).unwrap() else { unreachable!() };
            for (a, b) in g.coords().iter().flatten().zip(want.coords().iter().flatten()) {
                ends = ends.max(wrap_diff(*a, *b).abs());
            }
        }
        let m0: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
        let m1: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (e0, e1) = (
            ManifoldPoint::Euclidean(EuclideanVec::new(m0.clone()).unwrap()),
            ManifoldPoint::Euclidean(EuclideanVec::new(m1.clone()).unwrap()),
        );
        for (t, want) in [(0.0, &m0), (1.0, &m1)] {
            let ManifoldPoint::Euclidean(g) = geodesic_point(&e0, &e1, t).unwrap() else { unreachable!() };
            for (a, b) in g.values.iter().zip(want) {
                ends = ends.max((a - b).abs());
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        1,
        "geometry primitives",
        vec![
            within("exp/log inversion", inv, 1e-12),
            (range, "log range (-1/2, 1/2]".into()),
            within("antisymmetry", anti, 1e-12),
            within("shift equivariance", shift, 1e-12),
            within("geodesic endpoints", ends, 1e-12),
            (secs < 10.0, format!("runtime {secs:.2}s < 10s")),
        ],
    )
}

fn mean_free_target() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let prior = LengthPrior::new([1.5; 3], [0.2; 3]).unwrap();
    let (mut mean, mut trans, mut single) = (0.0f64, 0.0f64, true);
    for _ in 0..1000 {
        let n = rng.random_range(1..13);
        let c0 = sample_base(n, Task::Csp, &prior, &mut rng).unwrap();
        let c1 = sample_base(n, Task::Csp, &prior, &mut rng).unwrap();
        let t = rng.random_range(0.0..0.99);
        let p = sample_conditional_path(&c0, &c1, t, Task::Csp).unwrap();
        for k in 0..3 {
            let m = p.target.df.iter().map(|r| r[k]).sum::<f64>() / n as f64;
            mean = mean.max(m.abs());
        }
        let tau: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        let s0 = FlowState { frac: shifted(&c0.frac, tau), ..c0.clone() };
        let s1 = FlowState { frac: shifted(&c1.frac, tau), ..c1.clone() };
        let ps = sample_conditional_path(&s0, &s1, t, Task::Csp).unwrap();
        let near_cut = torus_log(&c0.frac, &c1.frac).unwrap().vec.iter().flatten().any(|x| x.abs() > 0.5 - 1e-9);
        if !near_cut {
            for (a, b) in p.target.df.iter().flatten().zip(ps.target.df.iter().flatten()) {
                trans = trans.max((a - b).abs());
            }
        }
        if n == 1 {
            single &= p.target.df[0] == [0.0; 3];
        }
    }
    let c0 = sample_base(1, Task::Csp, &prior, &mut rng).unwrap();
    let c1 = sample_base(1, Task::Csp, &prior, &mut rng).unwrap();
    single &= sample_conditional_path(&c0, &c1, 0.5, Task::Csp).unwrap().target.df[0] == [0.0; 3];
    outcome(
        2,
        "mean-free torus target",
        vec![
            within("column mean", mean, 1e-12),
            within("translation invariance", trans, 1e-12),
            (single, "identically zero for one atom".into()),
        ],
    )
}

fn analytic_field_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let prior = LengthPrior::new([1.5; 3], [0.2; 3]).unwrap();
    let cfg = IntegrationConfig::plain(1000);
    let (mut f_err, mut l_err) = (0.0f64, 0.0f64);
    for n in [1, 2, 4, 8] {
        for _ in 0..100 {
            let c0 = sample_base(n, Task::Csp, &prior, &mut rng).unwrap();
            let c1 = sample_base(n, Task::Csp, &prior, &mut rng).unwrap();
            let field = ConditionalField { target: c1.clone(), task: Task::Csp };
            let end = integrate(&field, &c0, None, &cfg).unwrap().last().clone();
            let d: Vec<[f64; 3]> = end
                .frac
                .coords()
                .iter()
                .zip(c1.frac.coords())
                .map(|(a, b)| std::array::from_fn(|k| wrap_diff(a[k], b[k])))
                .collect();
            for row in &d {
                for k in 0..3 {
                    f_err = f_err.max(wrap_diff(row[k], d[0][k]).abs());
                }
            }
            for (a, b) in end.lattice.iter().zip(&c1.lattice) {
                l_err = l_err.max((a - b).abs());
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        3,
        "analytic conditional field reaches its endpoint",
        vec![
            within("f up to translation", f_err, 1e-3),
            within("l", l_err, 1e-6),
            (secs < 60.0, format!("runtime {secs:.2}s < 60s")),
        ],
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let prior = LengthPrior::new([1.5; 3], [0.15; 3]).unwrap();
    let mut checks = Vec::new();
    for task in [Task::Csp, Task::Dng] {
        let net = NetConfig { hidden_dim: 16, layers: 2, ..NetConfig::desk(task) };
        let mut model = Model::init(net, &mut rng).unwrap();
        let batch: Vec<TrainItem> = [3usize, 2]
            .iter()
            .map(|&n| {
                let c0 = sample_base(n, task, &prior, &mut rng).unwrap();
                let c1 = sample_base(n, task, &prior, &mut rng).unwrap();
                let kinds: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
                let c1 = FlowState {
                    bits: c1.bits.map(|_| AtomTypes::new(kinds.clone()).unwrap().bits()),
                    ..c1
                };
                let t = rng.random_range(0.05..0.9);
                TrainItem {
                    path: sample_conditional_path(&c0, &c1, t, task).unwrap(),
                    kinds: (task == Task::Csp).then(|| kinds.clone()),
                    a1_bits: c1.bits.clone(),
                }
            })
            .collect();
        let w = LossWeights::default_for(task);
        let (_, g) = model.gradient(&batch, &w).unwrap();
        let mut idx: Vec<usize> = (0..g.len()).collect();
        idx.shuffle(&mut rng);
        let probes = 200.min(idx.len());
        let h = 1e-5;
        let mut worst = 0.0f64;
        for &i in &idx[..probes] {
            let x = model.params.values[i];
            model.params.values[i] = x + h;
            let up = model.loss(&batch, &w).unwrap().total();
            model.params.values[i] = x - h;
            let dn = model.loss(&batch, &w).unwrap().total();
            model.params.values[i] = x;
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-7));
        }
        checks.push((probes >= 200, format!("{task} probes {probes} of {}", g.len())));
        checks.push(within(&format!("{task} relative error"), worst, 1e-4));
    }
    outcome(4, "finite-difference gradient check", checks)
}

fn symmetry_probe(model: &Model, trained: &Model, prior: &LengthPrior, kinds_pool: &[Vec<usize>]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (mut perm_err, mut trans_err) = (0.0f64, 0.0f64);
    for task in [Task::Csp, Task::Dng] {
        let m = if task == Task::Csp {
            model.clone()
        } else {
            Model::init(NetConfig::desk(Task::Dng), &mut rng).unwrap()
        };
        for n in [1, 2, 4, 8] {
            for _ in 0..10 {
                let s = sample_base(n, task, prior, &mut rng).unwrap();
                let kinds: Vec<usize> = (0..n).map(|_| rng.random_range(0..20)).collect();
                let k = (task == Task::Csp).then_some(&kinds[..]);
                let t = rng.random_range(0.0..1.0);
                let v = m.forward(&s, t, k).unwrap();
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                let pk: Vec<usize> = perm.iter().map(|&p| kinds[p]).collect();
                let pv = m.forward(&permute_state(&s, &perm), t, (task == Task::Csp).then_some(&pk[..])).unwrap();
                let want = v.permuted(&perm);
                for (a, b) in pv.df.iter().flatten().chain(&pv.da).chain(&pv.dl).zip(
                    want.df.iter().flatten().chain(&want.da).chain(&want.dl),
                ) {
                    perm_err = perm_err.max((a - b).abs());
                }
                let tau: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
                let ts = FlowState { frac: shifted(&s.frac, tau), ..s.clone() };
                let tv = m.forward(&ts, t, k).unwrap();
                for (a, b) in tv.df.iter().flatten().chain(&tv.da).chain(&tv.dl).zip(
                    v.df.iter().flatten().chain(&v.da).chain(&v.dl),
                ) {
                    trans_err = trans_err.max((a - b).abs());
                }
            }
        }
    }

    let cfg = IntegrationConfig { steps: 50, ..RunConfig::default_for(Task::Csp).integration() };
    let (mut end_err, mut path_perm) = (0.0f64, 0.0f64);
    for kinds in kinds_pool.iter().take(10) {
        let n = kinds.len();
        let c0 = sample_base(n, Task::Csp, prior, &mut rng).unwrap();
        let tau: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        let a = integrate(trained, &c0, Some(kinds), &cfg).unwrap();
        let b = integrate(trained, &FlowState { frac: shifted(&c0.frac, tau), ..c0.clone() }, Some(kinds), &cfg)
            .unwrap();
        for (x, y) in a.last().frac.coords().iter().zip(b.last().frac.coords()) {
            for k in 0..3 {
                end_err = end_err.max(wrap_diff(y[k], x[k] + tau[k]).abs());
            }
        }
        for (x, y) in a.last().lattice.iter().zip(&b.last().lattice) {
            end_err = end_err.max((x - y).abs());
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pk: Vec<usize> = perm.iter().map(|&p| kinds[p]).collect();
        let p = integrate(trained, &permute_state(&c0, &perm), Some(&pk), &cfg).unwrap();
        for (sa, sp) in a.states.iter().zip(&p.states) {
            let want = permute_state(sa, &perm);
            for (x, y) in want.frac.coords().iter().flatten().zip(sp.frac.coords().iter().flatten()) {
                path_perm = path_perm.max(wrap_diff(*x, *y).abs());
            }
            for (x, y) in want.lattice.iter().zip(&sp.lattice) {
                path_perm = path_perm.max((x - y).abs());
            }
        }
    }
    outcome(
        5,
        "network and flow symmetries",
        vec![
            within("forward permutation equivariance", perm_err, 1e-10),
            within("forward translation invariance", trans_err, 1e-10),
            within("trained flow endpoint translation equivariance", end_err, 1e-6),
            within("trained flow permutation probe", path_perm, 1e-6),
        ],
    )
}

/// Exact bin masses of the wrapped Gaussian mixture on the first two separation components.
fn toy_target_histogram(toy: &ToyTorus, bins: usize) -> Vec<f64> {
    let mut out = vec![0.0; bins * bins];
    // the sign is shared by both axes, so the mixture does not factor
    for sign in [1.0, -1.0] {
        let gx = Normal::new(sign * toy.mode[0], toy.sigma).unwrap();
        let gy = Normal::new(sign * toy.mode[1], toy.sigma).unwrap();
        let mass = |g: &Normal, b: usize| -> f64 {
            let (lo, hi) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
            (-3..=3).map(|w| g.cdf(hi + w as f64) - g.cdf(lo + w as f64)).sum()
        };
        for ix in 0..bins {
            for iy in 0..bins {
                out[ix * bins + iy] += 0.5 * mass(&gx, ix) * mass(&gy, iy);
            }
        }
    }
    out
}

fn toy_density() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let toy = ToyTorus::default();
    let train_set = toy.sample(2000, &mut rng).unwrap();
    let lengths: Vec<[f64; 3]> = train_set.iter().map(|c| c.lattice.lengths()).collect();
    let prior = fit_length_prior(&lengths).unwrap();
    let mut cfg = RunConfig::default_for(Task::Csp);
    cfg.epochs = 200;
    cfg.learning_rate = 3e-3;
    cfg.weight_decay = 0.0;
    cfg.batch_size = 64;
    cfg.anneal = AnnealFlags::NONE;
    cfg.anneal_slope = 0.0;
    cfg.seed = 106;
    let t0 = Instant::now();
    let out = train(&cfg, &train_set, &prior, |_| {}).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let comps = vec![vec![toy.kind, toy.kind]; 4000];
    let ic = IntegrationConfig { steps: 50, ..cfg.integration() };
    let gen: Vec<Crystal> = reconstruct_many(&out.model, &comps, &prior, &ic, 206)
        .into_iter()
        .filter_map(|s| s.unwrap().to_crystal())
        .collect();
    let tv = total_variation(&separation_histogram(&gen, 20), &toy_target_histogram(&toy, 20));
    outcome(
        6,
        "toy torus density",
        vec![
            (tv < 0.15, format!("TV {tv:.4} < 0.15 over {} samples", gen.len())),
            (secs <= 600.0, format!("training {secs:.1}s <= 600s")),
        ],
    )
}

struct Perov {
    model: Model,
    prior: LengthPrior,
    test: Vec<Crystal>,
}

fn train_perov() -> Perov {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train_set = perov_family(400, 0.03, &mut rng).unwrap();
    let test = perov_family(100, 0.03, &mut rng).unwrap();
    let lengths: Vec<[f64; 3]> = train_set.iter().map(|c| c.lattice.lengths()).collect();
    let prior = fit_length_prior(&lengths).unwrap();
    let mut cfg = RunConfig::default_for(Task::Csp);
    cfg.epochs = 200;
    cfg.learning_rate = 1e-3;
    cfg.weight_decay = 0.0;
    cfg.batch_size = 32;
    let model = train(&cfg, &train_set, &prior, |_| {}).unwrap().model;
    Perov { model, prior, test }
}

fn perov_match(p: &Perov) -> Outcome {
    let comps: Vec<Vec<usize>> = p.test.iter().map(|c| c.kinds().to_vec()).collect();
    let base = RunConfig::default_for(Task::Csp).integration();
    let rate = |steps: usize| {
        let ic = IntegrationConfig { steps, ..base };
        let gen: Vec<Option<Crystal>> = reconstruct_many(&p.model, &comps, &p.prior, &ic, 99)
            .into_iter()
            .map(|s| s.unwrap().to_crystal())
            .collect();
        match_rate(&gen, &p.test, &MatchTolerances::default()).unwrap().0
    };
    let (r50, r500) = (rate(50), rate(500));
    outcome(
        7,
        "perovskite-family structure prediction",
        vec![
            (r50 >= 0.90, format!("match rate at 50 steps {r50:.3} >= 0.90")),
            (r500 - r50 < 0.05, format!("rate(500) - rate(50) = {:.3} < 0.05", r500 - r50)),
        ],
    )
}

fn groups_equal(a: &FlowState, b: &FlowState, flags: AnnealFlags) -> (bool, bool) {
    let same_a = a.bits == b.bits;
    let same_f = a.frac == b.frac;
    let same_l = a.lattice == b.lattice;
    let unflagged = (flags.a || same_a) && (flags.f || same_f) && (flags.l || same_l);
    let flagged = (!flags.a || !same_a) && (!flags.f || !same_f) && (!flags.l || !same_l);
    (unflagged, flagged)
}

fn anneal_contracts(p: &Perov) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let all = ["a", "f", "l", "a,f", "f,l", "a,l", "a,f,l"];
    let mut checks = Vec::new();

    let (mut decoupled, mut cases) = (true, 0);
    for task in [Task::Csp, Task::Dng] {
        for spec in all {
            let flags = AnnealFlags::parse(spec).unwrap();
            if task == Task::Csp && flags.a {
                continue;
            }
            let c0 = sample_base(4, task, &p.prior, &mut rng).unwrap();
            let c1 = sample_base(4, task, &p.prior, &mut rng).unwrap();
            let field = ConditionalField { target: c1, task };
            let plain = integrate(&field, &c0, None, &IntegrationConfig::plain(50)).unwrap();
            let cfg = IntegrationConfig { steps: 50, anneal_slope: 5.0, anneal: flags };
            let annealed = integrate(&field, &c0, None, &cfg).unwrap();
            for (x, y) in plain.states.iter().zip(&annealed.states) {
                decoupled &= groups_equal(x, y, flags).0;
            }
            decoupled &= groups_equal(plain.last(), annealed.last(), flags).1;
            cases += 1;
        }
    }
    checks.push((decoupled, format!("analytic field: unflagged trajectories bitwise equal ({cases} flag sets)")));

    let kinds = p.test[0].kinds().to_vec();
    let (mut step_ok, mut zero_ok) = (true, true);
    for spec in ["f", "l", "f,l"] {
        let flags = AnnealFlags::parse(spec).unwrap();
        let c0 = sample_base(kinds.len(), Task::Csp, &p.prior, &mut rng).unwrap();
        let plain = integrate(&p.model, &c0, Some(&kinds), &IntegrationConfig::plain(50)).unwrap();
        let cfg = IntegrationConfig { steps: 50, anneal_slope: 10.0, anneal: flags };
        for k in [1, 10, 25, 49] {
            let a = euler_step(&p.model, &plain.states[k], k, Some(&kinds), &IntegrationConfig::plain(50)).unwrap();
            let b = euler_step(&p.model, &plain.states[k], k, Some(&kinds), &cfg).unwrap();
            let (u, f) = groups_equal(&a, &b, flags);
            step_ok &= u && f;
        }
        let zero = IntegrationConfig { steps: 50, anneal_slope: 0.0, anneal: flags };
        zero_ok &= integrate(&p.model, &c0, Some(&kinds), &zero).unwrap() == plain;
    }
    checks.push((step_ok, "trained field: single step leaves unflagged groups bitwise equal".into()));
    checks.push((zero_ok, "slope 0 is bitwise plain Euler".into()));
    outcome(8, "anti-annealing contracts", checks)
}

fn codecs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut bits_ok = true;
    for k in 0..NUM_CLASSES {
        let b = encode_kind(k).unwrap();
        let want: Vec<f64> = (0..NUM_BITS).map(|j| if (k >> j) & 1 == 1 { 1.0 } else { -1.0 }).collect();
        bits_ok &= b.to_vec() == want && decode_kind(&b) == k;
    }
    bits_ok &= encode_kind(NUM_CLASSES).is_err();
    let mut lat = 0.0f64;
    let mut gram = 0.0f64;
    for _ in 0..1000 {
        let l = random_params(&mut rng);
        let back = params_from_matrix(&matrix_from_params(&l).unwrap()).unwrap();
        for (a, b) in l.to_array().iter().zip(back.to_array()) {
            lat = lat.max((a - b).abs());
        }
        let m = matrix_from_params(&l).unwrap().rotated(&random_rotation(&mut rng));
        let g = LatticeMatrix::gram(&m);
        let want = gram_from_params(&params_from_matrix(&m).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                gram = gram.max((g[i][j] - want[i][j]).abs() / (1.0 + want[i][j].abs()));
            }
        }
    }
    let mut ang = 0.0f64;
    let mut mono = true;
    let mut prev = f64::NEG_INFINITY;
    for i in 1..10_000 {
        let a = 60.0 + 60.0 * i as f64 / 10_000.0;
        let y = angles_to_unconstrained(a).unwrap();
        ang = ang.max((angles_from_unconstrained(y).unwrap() - a).abs());
        mono &= y > prev;
        prev = y;
    }
    outcome(
        9,
        "codecs",
        vec![
            (bits_ok, format!("all {NUM_CLASSES} classes encode and decode")),
            within("lattice round trip", lat, 1e-9),
            within("rotated gram", gram, 1e-9),
            within("angle transform inverse", ang, 1e-10),
            (mono, "angle transform monotone".into()),
        ],
    )
}

fn metric_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let tol = MatchTolerances::default();
    let mut self_rmsd = 0.0f64;
    let mut matched = true;
    for _ in 0..200 {
        let n = rng.random_range(1..9);
        let c = random_crystal(n, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let tau: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        let mut g = apply_symmetry(&c, &SymmetryOp::permutation(perm).unwrap()).unwrap();
        g = apply_symmetry(&g, &SymmetryOp::translation(tau).unwrap()).unwrap();
        g = apply_symmetry(&g, &SymmetryOp::rotation(random_rotation(&mut rng)).unwrap()).unwrap();
        match match_structures(&c, &g, &tol) {
            Some(r) => self_rmsd = self_rmsd.max(r),
            None => matched = false,
        }
    }
    let mut asym = 0.0f64;
    let mut agree = true;
    for _ in 0..200 {
        let n = rng.random_range(1..7);
        let x = random_crystal(n, &mut rng);
        let jitter: Vec<[f64; 3]> = x
            .frac
            .coords()
            .iter()
            .map(|r| std::array::from_fn(|k| r[k] + rng.random_range(-0.05..0.05)))
            .map(|r: [f64; 3]| r.map(|v| v.rem_euclid(1.0)))
            .collect();
        let y = Crystal::new(x.atoms.clone(), TorusCloud::new(jitter).unwrap(), x.lattice).unwrap();
        match (match_structures(&x, &y, &tol), match_structures(&y, &x, &tol)) {
            (Some(a), Some(b)) => asym = asym.max((a - b).abs()),
            (None, None) => {}
            _ => agree = false,
        }
    }
    let mut w2 = 0.0f64;
    for _ in 0..1000 {
        let x: [f64; 2] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let y: [f64; 2] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let lp = (0.5 * ((x[0] - y[0]).abs() + (x[1] - y[1]).abs()))
            .min(0.5 * ((x[0] - y[1]).abs() + (x[1] - y[0]).abs()));
        w2 = w2.max((wasserstein_1d(&x, &y).unwrap() - lp).abs());
    }
    let cell = |a: f64, coords: Vec<[f64; 3]>| {
        let n = coords.len();
        Crystal::new(
            AtomTypes::new(vec![5; n]).unwrap(),
            TorusCloud::new(coords).unwrap(),
            LatticeParams::new(a, a, a, 90.0, 90.0, 90.0).unwrap(),
        )
        .unwrap()
    };
    let validity = structural_validity(&cell(5.0, vec![[0.0; 3]]))
        && !structural_validity(&cell(0.4, vec![[0.0; 3]]))
        && !structural_validity(&cell(10.0, vec![[0.5; 3], [0.52, 0.5, 0.5]]))
        && !structural_validity(&cell(15.0, vec![[0.01, 0.5, 0.5], [0.99, 0.5, 0.5]]))
        && structural_validity(&cell(15.0, vec![[0.1, 0.5, 0.5], [0.9, 0.5, 0.5]]));
    // (steps, stability rate %, cost in units of 10^4)
    let table = [
        (5000, 1.57, 31.85),
        (1000, 5.06, 1.98),
        (250, 4.32, 0.58),
        (500, 4.19, 1.19),
        (750, 4.14, 1.81),
        (1000, 4.65, 2.15),
        (1000, 3.34, 2.99),
        (250, 2.38, 1.05),
    ];
    let mut cost_ok = true;
    for (steps, pct, cost) in table {
        let (rate, c) = rate_cost((pct * 100.0f64).round() as usize, 10_000, steps).unwrap();
        cost_ok &= (rate * 100.0 - pct).abs() < 1e-12 && ((c / 1e4 * 100.0).round() / 100.0 - cost).abs() < 1e-9;
    }
    outcome(
        10,
        "proxy metrics",
        vec![
            (matched, "symmetry images always match".into()),
            within("symmetry image RMSD", self_rmsd, 1e-9),
            (agree, "match decision symmetric".into()),
            within("matcher asymmetry", asym, 1e-9),
            within("two-point Wasserstein vs LP", w2, 1e-12),
            (validity, "validity image-scan cases".into()),
            (cost_ok, format!("rate/cost reproduce {} published rows", table.len())),
        ],
    )
}

fn base_distribution() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let truth = LengthPrior::new([1.2, 1.6, 2.0], [0.1, 0.2, 0.3]).unwrap();
    let draws: Vec<[f64; 3]> =
        (0..5000).map(|_| sample_base(1, Task::Csp, &truth, &mut rng).unwrap().lattice[..3].try_into().unwrap()).collect();
    let fit = fit_length_prior(&draws).unwrap();
    let mut mle = 0.0f64;
    for k in 0..3 {
        let logs: Vec<f64> = draws.iter().map(|d| d[k].ln()).collect();
        let n = logs.len() as f64;
        let s1: f64 = logs.iter().sum();
        let s2: f64 = logs.iter().map(|x| x * x).sum();
        let mu = s1 / n;
        let sd = (s2 / n - mu * mu).sqrt();
        mle = mle.max((fit.loc[k] - mu).abs()).max((fit.scale[k] - sd).abs());
    }

    let bins = 20;
    let mut frac_h = vec![0usize; bins];
    let mut ang_h = vec![0usize; bins];
    let mut total = 0usize;
    for _ in 0..20_000 {
        let s = sample_base(3, Task::Csp, &truth, &mut rng).unwrap();
        for x in s.frac.coords().iter().flatten() {
            frac_h[((x * bins as f64) as usize).min(bins - 1)] += 1;
        }
        for y in &s.lattice[3..] {
            let a = angles_from_unconstrained(*y).unwrap();
            ang_h[(((a - 60.0) / 60.0 * bins as f64) as usize).min(bins - 1)] += 1;
        }
        total += 9;
    }
    let chi = ChiSquared::new((bins - 1) as f64).unwrap();
    let p_value = |h: &[usize], count: usize| {
        let e = count as f64 / bins as f64;
        let stat: f64 = h.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        1.0 - chi.cdf(stat)
    };
    let (pf, pa) = (p_value(&frac_h, total / 9 * 9), p_value(&ang_h, 60_000));

    let table = AtomCountTable::new([(2, 3.0), (5, 1.0), (8, 4.0), (12, 2.0)].into_iter().collect()).unwrap();
    let draws = 10_000;
    let mut counts = std::collections::BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(sample_num_atoms(&table, &mut rng).unwrap()).or_insert(0usize) += 1;
    }
    let mut freq = 0.0f64;
    for (n, p) in table.probabilities() {
        let f = counts.get(&n).copied().unwrap_or(0) as f64 / draws as f64;
        freq = freq.max((f - p).abs() / (p * (1.0 - p) / draws as f64).sqrt());
    }
    let only_support = counts.keys().all(|n| table.probabilities().contains_key(n));

    let mut exact = true;
    for task in [Task::Csp, Task::Dng] {
        for _ in 0..200 {
            let s = sample_base(rng.random_range(1..9), task, &truth, &mut rng).unwrap();
            let tau: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
            let t = FlowState { frac: shifted(&s.frac, tau), ..s.clone() };
            exact &= base_log_density(&s, task, &truth).unwrap() == base_log_density(&t, task, &truth).unwrap();
        }
    }
    outcome(
        11,
        "base distribution",
        vec![
            within("length prior MLE", mle, 1e-12),
            (pf > 1e-3, format!("torus uniformity chi-square p {pf:.3} > 1e-3")),
            (pa > 1e-3, format!("angle uniformity chi-square p {pa:.3} > 1e-3")),
            (freq < 5.0 && only_support, format!("p(n) frequencies within {freq:.2} sd < 5")),
            (exact, "p(f) exactly translation invariant".into()),
        ],
    )
}

fn main() {
    let t0 = Instant::now();
    let mut results = vec![
        geometry(),
        mean_free_target(),
        analytic_field_oracle(),
        gradient_check(),
        codecs(),
        metric_checks(),
        base_distribution(),
    ];
    let perov = train_perov();
    let comps: Vec<Vec<usize>> = perov.test.iter().map(|c| c.kinds().to_vec()).collect();
    let fresh = Model::init(NetConfig::desk(Task::Csp), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    results.push(perov_match(&perov));
    results.push(symmetry_probe(&fresh, &perov.model, &perov.prior, &comps));
    results.push(anneal_contracts(&perov));
    results.push(toy_density());
    results.sort_by_key(|o| o.id);

    println!("\nsummary ({:.0}s)", t0.elapsed().as_secs_f64());
    for o in &results {
        println!("{} [{}] {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name);
    }
    let failed = results.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
