//! Fast invariant checks over every module, run by `flowcryst selfcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basedist::{fit_length_prior, sample_base, LengthPrior};
use crate::crystal::{
    angles_from_unconstrained, angles_to_unconstrained, apply_symmetry, decode_kind, encode_kind, matrix_from_params,
    params_from_matrix, AtomTypes, Crystal, LatticeParams, SymmetryOp, NUM_CLASSES,
};
use crate::engine::{integrate_final, ConditionalField, IntegrationConfig};
use crate::flowmatch::{sample_conditional_path, LossWeights, Task};
use crate::geometry::{circle_dist, torus_exp, torus_geodesic, torus_log, TorusCloud, TorusTangent};
use crate::io::{fmt_g17, CrystalRecord};
use crate::metrics::{match_structures, rate_cost, structural_validity, wasserstein_1d, MatchTolerances};
use crate::net::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use crate::net::{Model, NetConfig, TrainItem};

type Check = std::result::Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn cloud<R: Rng>(n: usize, rng: &mut R) -> TorusCloud {
    TorusCloud::new((0..n).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect()).unwrap()
}

fn tangent<R: Rng>(n: usize, rng: &mut R) -> TorusTangent {
    TorusTangent { vec: (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-0.49..0.49))).collect() }
}

fn random_crystal<R: Rng>(n: usize, rng: &mut R) -> Crystal {
    let kinds = (0..n).map(|_| rng.random_range(0..4)).collect();
    let a = rng.random_range(4.0..6.0);
    Crystal::new(
        AtomTypes::new(kinds).unwrap(),
        cloud(n, rng),
        LatticeParams::new(a, a * rng.random_range(0.9..1.1), a, 90.0, rng.random_range(80.0..100.0), 90.0).unwrap(),
    )
    .unwrap()
}

fn exp_log_inverse() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let f = cloud(4, &mut rng);
        let v = tangent(4, &mut rng);
        let back = torus_log(&f, &torus_exp(&f, &v).map_err(err)?).map_err(err)?;
        for (a, b) in back.vec.iter().flatten().zip(v.vec.iter().flatten()) {
            ensure((a - b).abs() < 1e-12, || format!("log(exp(v)) = {a}, v = {b}"))?;
        }
    }
    Ok(())
}

fn log_range_and_antisymmetry() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let (f0, f1) = (cloud(3, &mut rng), cloud(3, &mut rng));
        let u = torus_log(&f0, &f1).map_err(err)?;
        let w = torus_log(&f1, &f0).map_err(err)?;
        for (a, b) in u.vec.iter().flatten().zip(w.vec.iter().flatten()) {
            ensure(*a > -0.5 && *a <= 0.5, || format!("log component {a} outside (-1/2, 1/2]"))?;
            ensure((a + b).abs() < 1e-12 || (a.abs() - 0.5).abs() < 1e-12, || format!("log not antisymmetric: {a}, {b}"))?;
        }
    }
    Ok(())
}

fn geodesic_endpoints() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (f0, f1) = (cloud(3, &mut rng), cloud(3, &mut rng));
        let g0 = torus_geodesic(&f0, &f1, 0.0).map_err(err)?;
        let g1 = torus_geodesic(&f0, &f1, 1.0).map_err(err)?;
        ensure(g0.max_circle_dist(&f0).map_err(err)? < 1e-12, || "geodesic(0) != f0".into())?;
        ensure(g1.max_circle_dist(&f1).map_err(err)? < 1e-12, || "geodesic(1) != f1".into())?;
    }
    Ok(())
}

fn mean_free_target() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let prior = LengthPrior::new([1.4; 3], [0.1; 3]).map_err(err)?;
    for n in [1, 2, 5] {
        let c0 = sample_base(n, Task::Csp, &prior, &mut rng).map_err(err)?;
        let c1 = sample_base(n, Task::Csp, &prior, &mut rng).map_err(err)?;
        let p = sample_conditional_path(&c0, &c1, 0.3, Task::Csp).map_err(err)?;
        for k in 0..3 {
            let m: f64 = p.target.df.iter().map(|r| r[k]).sum::<f64>() / n as f64;
            ensure(m.abs() < 1e-12, || format!("target mean {m} for n = {n}"))?;
        }
    }
    Ok(())
}

fn conditional_field_reaches_endpoint() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prior = LengthPrior::new([1.4; 3], [0.1; 3]).map_err(err)?;
    for n in [1, 3] {
        let c0 = sample_base(n, Task::Csp, &prior, &mut rng).map_err(err)?;
        let c1 = sample_base(n, Task::Csp, &prior, &mut rng).map_err(err)?;
        let field = ConditionalField { target: c1.clone(), task: Task::Csp };
        let end = integrate_final(&field, &c0, None, &IntegrationConfig::plain(200)).map_err(err)?;
        let shift = torus_log(&c1.frac, &end.frac).map_err(err)?;
        for r in &shift.vec {
            for k in 0..3 {
                ensure(circle_dist(r[k], shift.vec[0][k]) < 1e-3, || "endpoint differs by more than a translation".into())?;
            }
        }
        for k in 0..6 {
            ensure((end.lattice[k] - c1.lattice[k]).abs() < 1e-6, || "lattice endpoint missed".into())?;
        }
    }
    Ok(())
}

fn bit_codec() -> Check {
    for k in 0..NUM_CLASSES {
        let d = decode_kind(&encode_kind(k).map_err(err)?);
        ensure(d == k, || format!("class {k} decodes to {d}"))?;
    }
    Ok(())
}

fn lattice_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        let p = LatticeParams::new(
            rng.random_range(2.0..9.0),
            rng.random_range(2.0..9.0),
            rng.random_range(2.0..9.0),
            rng.random_range(75.0..105.0),
            rng.random_range(75.0..105.0),
            rng.random_range(75.0..105.0),
        );
        let Ok(p) = p else { continue };
        let q = params_from_matrix(&matrix_from_params(&p).map_err(err)?).map_err(err)?;
        for (a, b) in p.to_array().iter().zip(q.to_array()) {
            ensure((a - b).abs() < 1e-9, || format!("round trip {a} -> {b}"))?;
        }
    }
    Ok(())
}

fn angle_transform_inverse() -> Check {
    for i in 1..600 {
        let a = 60.0 + i as f64 * 0.1;
        let b = angles_from_unconstrained(angles_to_unconstrained(a).map_err(err)?).map_err(err)?;
        ensure((a - b).abs() < 1e-10, || format!("angle {a} -> {b}"))?;
    }
    Ok(())
}

fn length_prior_mle() -> Check {
    let lengths = [[3.0, 4.0, 5.0], [3.5, 4.5, 6.0], [4.0, 4.2, 5.5]];
    let p = fit_length_prior(&lengths).map_err(err)?;
    for k in 0..3 {
        let logs: Vec<f64> = lengths.iter().map(|l| l[k].ln()).collect();
        let mu = logs.iter().sum::<f64>() / 3.0;
        let sd = (logs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 3.0).sqrt();
        ensure((p.loc[k] - mu).abs() < 1e-12 && (p.scale[k] - sd).abs() < 1e-12, || "length prior is not the MLE".into())?;
    }
    Ok(())
}

fn matcher_symmetry() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tol = MatchTolerances::default();
    for _ in 0..30 {
        let x = random_crystal(5, &mut rng);
        let mut perm: Vec<usize> = (0..5).collect();
        perm.sort_by_key(|_| rng.random::<u32>());
        let y = apply_symmetry(&x, &SymmetryOp::permutation(perm).map_err(err)?).map_err(err)?;
        let tau = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        let y = apply_symmetry(&y, &SymmetryOp::translation(tau).map_err(err)?).map_err(err)?;
        let r = match_structures(&x, &y, &tol).ok_or("symmetric copy did not match")?;
        ensure(r < 1e-9, || format!("RMSD {r} for a symmetric copy"))?;
        let s = match_structures(&y, &x, &tol).ok_or("matcher is not symmetric")?;
        ensure((r - s).abs() < 1e-9, || "matcher is not symmetric".into())?;
    }
    Ok(())
}

fn metric_examples() -> Check {
    ensure(wasserstein_1d(&[0.0, 1.0], &[0.0, 3.0]).map_err(err)? == 1.0, || "wasserstein {0,1} vs {0,3}".into())?;
    let cube = |a: f64| {
        Crystal::new(
            AtomTypes::new(vec![5]).unwrap(),
            TorusCloud::new(vec![[0.0; 3]]).unwrap(),
            LatticeParams::new(a, a, a, 90.0, 90.0, 90.0).unwrap(),
        )
        .unwrap()
    };
    ensure(structural_validity(&cube(5.0)) && !structural_validity(&cube(0.4)), || "validity image scan".into())?;
    let (r, c) = rate_cost(506, 10000, 1000).map_err(err)?;
    ensure(r == 0.0506 && (c - 19762.845849802372).abs() < 1e-6, || "rate/cost arithmetic".into())
}

fn tiny_net(task: Task) -> NetConfig {
    NetConfig { hidden_dim: 8, layers: 2, time_embed_dim: 8, count_embed_dim: 4, ..NetConfig::desk(task) }
}

fn network_symmetries() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let prior = LengthPrior::new([1.4; 3], [0.1; 3]).map_err(err)?;
    for task in [Task::Csp, Task::Dng] {
        let model = Model::init(tiny_net(task), &mut rng).map_err(err)?;
        let s = sample_base(4, task, &prior, &mut rng).map_err(err)?;
        let kinds = [1, 2, 2, 7];
        let k = (task == Task::Csp).then_some(&kinds[..]);
        let v = model.forward(&s, 0.4, k).map_err(err)?;

        let perm = [2, 0, 3, 1];
        let ps = crate::flowmatch::FlowState {
            bits: s.bits.as_ref().map(|b| perm.iter().map(|&p| b[p]).collect()),
            frac: TorusCloud::new(perm.iter().map(|&p| s.frac.coords()[p]).collect()).map_err(err)?,
            lattice: s.lattice,
        };
        let pk: Vec<usize> = perm.iter().map(|&p| kinds[p]).collect();
        let pv = model.forward(&ps, 0.4, (task == Task::Csp).then_some(&pk[..])).map_err(err)?;
        let want = v.permuted(&perm);
        for (a, b) in pv.df.iter().flatten().zip(want.df.iter().flatten()) {
            ensure((a - b).abs() < 1e-10, || "forward is not permutation equivariant".into())?;
        }

        let shift = TorusTangent { vec: vec![[0.3, -0.2, 0.45]; 4] };
        let ts = crate::flowmatch::FlowState { frac: torus_exp(&s.frac, &shift).map_err(err)?, ..s.clone() };
        let tv = model.forward(&ts, 0.4, k).map_err(err)?;
        for (a, b) in tv.df.iter().flatten().chain(&tv.dl).zip(v.df.iter().flatten().chain(&v.dl)) {
            ensure((a - b).abs() < 1e-10, || "forward is not translation invariant".into())?;
        }
    }
    Ok(())
}

fn gradient_matches_finite_differences() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let prior = LengthPrior::new([1.4; 3], [0.1; 3]).map_err(err)?;
    let task = Task::Dng;
    let mut model = Model::init(tiny_net(task), &mut rng).map_err(err)?;
    let c0 = sample_base(3, task, &prior, &mut rng).map_err(err)?;
    let c1 = sample_base(3, task, &prior, &mut rng).map_err(err)?;
    let item = TrainItem {
        path: sample_conditional_path(&c0, &c1, 0.35, task).map_err(err)?,
        kinds: None,
        a1_bits: c1.bits.clone(),
    };
    let w = LossWeights::default_for(task);
    let batch = [item];
    let (_, g) = model.gradient(&batch, &w).map_err(err)?;
    let h = 1e-6;
    for _ in 0..30 {
        let i = rng.random_range(0..g.len());
        let x = model.params.values[i];
        model.params.values[i] = x + h;
        let up = model.loss(&batch, &w).map_err(err)?.total();
        model.params.values[i] = x - h;
        let dn = model.loss(&batch, &w).map_err(err)?.total();
        model.params.values[i] = x;
        let fd = (up - dn) / (2.0 * h);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
        ensure(rel < 1e-4, || format!("parameter {i}: analytic {} vs numeric {fd}", g[i]))?;
    }
    Ok(())
}

fn checkpoint_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = Model::init(tiny_net(Task::Csp), &mut rng).map_err(err)?;
    let meta = CheckpointMeta { config_hash: "0".into(), seed: 1 };
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &m, &meta).map_err(err)?;
    let (back, _) = read_checkpoint(buf.as_slice()).map_err(err)?;
    ensure(back == m, || "checkpoint round trip changed the model".into())
}

fn record_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..50 {
        let c = random_crystal(3, &mut rng);
        let r = CrystalRecord::from_crystal(format!("c{i}"), &c, None);
        let back: CrystalRecord = serde_json::from_str(&r.to_json_line()).map_err(err)?;
        ensure(back == r && back.to_crystal().map_err(err)? == c, || format!("record round trip: {}", r.to_json_line()))?;
    }
    ensure(fmt_g17(0.1).parse::<f64>() == Ok(0.1), || "17-digit formatting".into())
}

/// Every named property with its check.
pub fn checks() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("geometry.exp_log_inverse", exp_log_inverse),
        ("geometry.log_range_antisymmetry", log_range_and_antisymmetry),
        ("geometry.geodesic_endpoints", geodesic_endpoints),
        ("flowmatch.mean_free_target", mean_free_target),
        ("engine.conditional_field_endpoint", conditional_field_reaches_endpoint),
        ("crystal.bit_codec_exhaustive", bit_codec),
        ("crystal.lattice_round_trip", lattice_round_trip),
        ("crystal.angle_transform_inverse", angle_transform_inverse),
        ("basedist.length_prior_mle", length_prior_mle),
        ("metrics.matcher_symmetry", matcher_symmetry),
        ("metrics.examples", metric_examples),
        ("net.permutation_translation_symmetry", network_symmetries),
        ("net.gradient_finite_differences", gradient_matches_finite_differences),
        ("net.checkpoint_round_trip", checkpoint_round_trip),
        ("io.record_round_trip", record_round_trip),
    ]
}

/// Runs every check; returns `(name, outcome)` in order.
pub fn run_all() -> Vec<(&'static str, Check)> {
    checks().into_iter().map(|(name, f)| (name, f())).collect()
}
