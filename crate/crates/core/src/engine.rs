//! Training loop, Euler integration with velocity anti-annealing, and
//! end-to-end structure prediction / de novo sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basedist::{sample_base, sample_num_atoms, AtomCountTable, LengthPrior};
use crate::crystal::{
    angles_from_unconstrained, decode_atoms, is_unused_class, AtomTypes, Bits, Crystal, LatticeParams, NUM_BITS,
};
use crate::error::{Error, Result};
use crate::flowmatch::{sample_conditional_path, FlowState, LossTerms, LossWeights, TangentState, Task, T_EPS};
use crate::geometry::{torus_exp, torus_log, TorusCloud, TorusTangent};
use crate::net::{Model, NetConfig, TrainItem, ZScoreStats};

/// Which variable groups receive the anti-annealing velocity scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnealFlags {
    pub a: bool,
    pub f: bool,
    pub l: bool,
}

impl AnnealFlags {
    pub const NONE: Self = Self { a: false, f: false, l: false };

    /// Parses a comma-separated subset of `a,f,l` (or `none`).
    pub fn parse(s: &str) -> Result<Self> {
        let mut flags = Self::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "a" => flags.a = true,
                "f" => flags.f = true,
                "l" => flags.l = true,
                "none" => {}
                other => return Err(Error::Config(format!("unknown anneal group {other:?}"))),
            }
        }
        Ok(flags)
    }
}

impl std::fmt::Display for AnnealFlags {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<&str> =
            [(self.a, "a"), (self.f, "f"), (self.l, "l")].iter().filter(|(on, _)| *on).map(|(_, n)| *n).collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

/// Everything needed to train a model and to sample from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub loss_weights: LossWeights,
    /// Euler steps `N`.
    pub steps: usize,
    /// Anti-annealing slope `s'` in `s(t) = 1 + s' t`.
    pub anneal_slope: f64,
    pub anneal: AnnealFlags,
    pub seed: u64,
    pub net: NetConfig,
    /// Path samples used to estimate z-score statistics.
    pub zscore_samples: usize,
}

impl RunConfig {
    /// CSP defaults follow the MP-20 column, DNG the single DNG column.
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Csp => Self {
                task,
                learning_rate: 1e-4,
                weight_decay: 1e-3,
                grad_clip: 0.5,
                epochs: 100,
                batch_size: 64,
                max_steps: 0,
                loss_weights: LossWeights::default_for(task),
                steps: 1000,
                anneal_slope: 10.0,
                anneal: AnnealFlags { a: false, f: true, l: false },
                seed: 0,
                net: NetConfig::desk(task),
                zscore_samples: 2048,
            },
            Task::Dng => Self {
                task,
                learning_rate: 5e-4,
                weight_decay: 5e-3,
                grad_clip: 0.5,
                epochs: 100,
                batch_size: 64,
                max_steps: 0,
                loss_weights: LossWeights::default_for(task),
                steps: 1000,
                anneal_slope: 5.0,
                anneal: AnnealFlags { a: false, f: true, l: true },
                seed: 0,
                net: NetConfig::desk(task),
                zscore_samples: 2048,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("integration steps must be at least 1".into()));
        }
        if !(self.anneal_slope >= 0.0 && self.anneal_slope.is_finite()) {
            return Err(Error::Config(format!("anneal slope {} must be >= 0", self.anneal_slope)));
        }
        if self.task == Task::Csp && self.anneal.a {
            return Err(Error::Config("structure prediction has no atom velocity to anneal".into()));
        }
        if self.net.task != self.task {
            return Err(Error::Config("network task differs from run task".into()));
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::Config("batch size and epochs must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) || !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("grad_clip and learning_rate must be > 0, weight_decay >= 0".into()));
        }
        self.loss_weights.normalized(self.task)?;
        self.net.validate()
    }

    pub fn integration(&self) -> IntegrationConfig {
        IntegrationConfig { steps: self.steps, anneal_slope: self.anneal_slope, anneal: self.anneal }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub steps: usize,
    pub anneal_slope: f64,
    pub anneal: AnnealFlags,
}

impl IntegrationConfig {
    pub fn plain(steps: usize) -> Self {
        Self { steps, anneal_slope: 0.0, anneal: AnnealFlags::NONE }
    }
}

/// A time-dependent velocity field on flow states.
pub trait VectorField: Sync {
    fn task(&self) -> Task;
    fn velocity(&self, state: &FlowState, t: f64, kinds: Option<&[usize]>) -> Result<TangentState>;
}

impl VectorField for Model {
    fn task(&self) -> Task {
        self.config.task
    }

    fn velocity(&self, state: &FlowState, t: f64, kinds: Option<&[usize]>) -> Result<TangentState> {
        self.forward(state, t, kinds)
    }
}

/// The generating field of the conditional path towards a fixed endpoint `c1`:
/// `(m1 - m)/(1 - t)` on Euclidean parts and the mean-free torus log over `1 - t`.
#[derive(Debug, Clone)]
pub struct ConditionalField {
    pub target: FlowState,
    pub task: Task,
}

impl VectorField for ConditionalField {
    fn task(&self) -> Task {
        self.task
    }

    fn velocity(&self, state: &FlowState, t: f64, _kinds: Option<&[usize]>) -> Result<TangentState> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::Schedule(t));
        }
        let inv = 1.0 / (1.0 - t);
        let df = torus_log(&state.frac, &self.target.frac)?.mean_free().scaled(inv).vec;
        let dl = std::array::from_fn(|k| (self.target.lattice[k] - state.lattice[k]) * inv);
        let da = match (self.task, &state.bits, &self.target.bits) {
            (Task::Dng, Some(a), Some(a1)) => {
                a.iter().zip(a1).flat_map(|(x, y)| (0..NUM_BITS).map(move |j| (y[j] - x[j]) * inv)).collect()
            }
            (Task::Dng, _, _) => return Err(Error::Dimension("de novo field needs atom bits".into())),
            (Task::Csp, _, _) => vec![0.0; state.num_atoms() * NUM_BITS],
        };
        Ok(TangentState { da, df, dl })
    }
}

/// States at the uniform time grid `t_k = k / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<FlowState>,
}

impl Trajectory {
    pub fn last(&self) -> &FlowState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// One explicit Euler step from `t_k = k/N` with anti-annealing on flagged groups.
pub fn euler_step(
    field: &dyn VectorField,
    state: &FlowState,
    k: usize,
    kinds: Option<&[usize]>,
    cfg: &IntegrationConfig,
) -> Result<FlowState> {
    let n_steps = cfg.steps;
    let t = k as f64 / n_steps as f64;
    let dt = 1.0 / n_steps as f64;
    let v = field.velocity(state, t, kinds)?;
    if !v.is_finite() {
        return Err(Error::Integration { step: k, reason: "non-finite velocity".into() });
    }
    let scale = 1.0 + cfg.anneal_slope * t;
    let s_a = if cfg.anneal.a { scale } else { 1.0 };
    let s_f = if cfg.anneal.f { scale } else { 1.0 };
    let s_l = if cfg.anneal.l { scale } else { 1.0 };

    let step_f = TorusTangent { vec: v.df.iter().map(|r| r.map(|x| x * dt * s_f)).collect() };
    let frac = torus_exp(&state.frac, &step_f)?;
    let lattice = std::array::from_fn(|i| state.lattice[i] + v.dl[i] * dt * s_l);
    let bits = match (&state.bits, field.task()) {
        (Some(b), Task::Dng) => Some(
            b.iter()
                .enumerate()
                .map(|(i, row)| std::array::from_fn(|j| row[j] + v.da[i * NUM_BITS + j] * dt * s_a))
                .collect::<Vec<Bits>>(),
        ),
        (b, _) => b.clone(),
    };
    let next = FlowState { bits, frac, lattice };
    if !next.is_finite() {
        return Err(Error::Integration { step: k, reason: "state became non-finite".into() });
    }
    Ok(next)
}

/// Integrates `d/dt c = s(t) v(c, t)` from `t = 0` to `1` with `N` Euler steps.
pub fn integrate(
    field: &dyn VectorField,
    c0: &FlowState,
    kinds: Option<&[usize]>,
    cfg: &IntegrationConfig,
) -> Result<Trajectory> {
    if cfg.steps < 1 {
        return Err(Error::Config("integration steps must be at least 1".into()));
    }
    if !(cfg.anneal_slope >= 0.0) {
        return Err(Error::Config("anneal slope must be >= 0".into()));
    }
    let mut times = Vec::with_capacity(cfg.steps + 1);
    let mut states = Vec::with_capacity(cfg.steps + 1);
    times.push(0.0);
    states.push(c0.clone());
    for k in 0..cfg.steps {
        let next = euler_step(field, states.last().unwrap(), k, kinds, cfg)?;
        states.push(next);
        times.push((k + 1) as f64 / cfg.steps as f64);
    }
    Ok(Trajectory { times, states })
}

/// Final state only, without storing intermediate states.
pub fn integrate_final(
    field: &dyn VectorField,
    c0: &FlowState,
    kinds: Option<&[usize]>,
    cfg: &IntegrationConfig,
) -> Result<FlowState> {
    if cfg.steps < 1 {
        return Err(Error::Config("integration steps must be at least 1".into()));
    }
    let mut s = c0.clone();
    for k in 0..cfg.steps {
        s = euler_step(field, &s, k, kinds, cfg)?;
    }
    Ok(s)
}

/// A decoded generation; `invalid` explains why it is not a valid crystal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub kinds: Vec<usize>,
    pub frac: TorusCloud,
    pub lengths: [f64; 3],
    pub angles: [f64; 3],
    pub invalid: Option<String>,
}

impl Sample {
    pub fn decode(state: &FlowState, kinds: Option<&[usize]>) -> Result<Self> {
        let kinds: Vec<usize> = match (kinds, &state.bits) {
            (Some(k), _) => k.to_vec(),
            (None, Some(b)) => decode_atoms(b),
            (None, None) => return Err(Error::Dimension("no composition to decode".into())),
        };
        let lengths = [state.lattice[0], state.lattice[1], state.lattice[2]];
        let angles = [
            angles_from_unconstrained(state.lattice[3])?,
            angles_from_unconstrained(state.lattice[4])?,
            angles_from_unconstrained(state.lattice[5])?,
        ];
        let mut invalid = None;
        if let Some(k) = kinds.iter().find(|&&k| is_unused_class(k)) {
            invalid = Some(format!("atom bits decode to unused class {k}"));
        } else if let Err(e) = LatticeParams::new(lengths[0], lengths[1], lengths[2], angles[0], angles[1], angles[2]) {
            invalid = Some(e.to_string());
        }
        Ok(Self { kinds, frac: state.frac.clone(), lengths, angles, invalid })
    }

    pub fn is_valid(&self) -> bool {
        self.invalid.is_none()
    }

    pub fn to_crystal(&self) -> Option<Crystal> {
        if !self.is_valid() {
            return None;
        }
        let lattice = LatticeParams::new(
            self.lengths[0],
            self.lengths[1],
            self.lengths[2],
            self.angles[0],
            self.angles[1],
            self.angles[2],
        )
        .ok()?;
        Crystal::new(AtomTypes::new(self.kinds.clone()).ok()?, self.frac.clone(), lattice).ok()
    }
}

/// Predicts a structure for a fixed composition.
pub fn reconstruct_csp<R: Rng + ?Sized>(
    model: &dyn VectorField,
    kinds: &[usize],
    prior: &LengthPrior,
    cfg: &IntegrationConfig,
    rng: &mut R,
) -> Result<Sample> {
    if model.task() != Task::Csp {
        return Err(Error::Config("structure prediction needs a CSP model".into()));
    }
    AtomTypes::new(kinds.to_vec())?;
    let c0 = sample_base(kinds.len(), Task::Csp, prior, rng)?;
    let end = integrate_final(model, &c0, Some(kinds), cfg)?;
    Sample::decode(&end, Some(kinds))
}

/// Samples a crystal of unknown composition: `n ~ p(n)`, then the full base state.
pub fn generate_dng<R: Rng + ?Sized>(
    model: &dyn VectorField,
    table: &AtomCountTable,
    prior: &LengthPrior,
    cfg: &IntegrationConfig,
    rng: &mut R,
) -> Result<Sample> {
    if model.task() != Task::Dng {
        return Err(Error::Config("de novo generation needs a DNG model".into()));
    }
    let n = sample_num_atoms(table, rng)?;
    let c0 = sample_base(n, Task::Dng, prior, rng)?;
    let end = integrate_final(model, &c0, None, cfg)?;
    Sample::decode(&end, None)
}

/// Independent RNG stream `index` of `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Reconstructs many compositions in parallel, one RNG stream per item.
pub fn reconstruct_many(
    model: &dyn VectorField,
    compositions: &[Vec<usize>],
    prior: &LengthPrior,
    cfg: &IntegrationConfig,
    seed: u64,
) -> Vec<Result<Sample>> {
    compositions
        .par_iter()
        .enumerate()
        .map(|(i, kinds)| reconstruct_csp(model, kinds, prior, cfg, &mut stream_rng(seed, i as u64)))
        .collect()
}

pub fn generate_many(
    model: &dyn VectorField,
    count: usize,
    table: &AtomCountTable,
    prior: &LengthPrior,
    cfg: &IntegrationConfig,
    seed: u64,
) -> Vec<Result<Sample>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_dng(model, table, prior, cfg, &mut stream_rng(seed, i as u64)))
        .collect()
}

/// Rescales `g` in place to global norm at most `max_norm`; returns the norms before and after.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> (f64, f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    let after = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm, after)
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] *= 1.0 - self.lr * self.weight_decay;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossTerms,
    pub total: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
    /// Largest global gradient norm after clipping.
    pub clipped_norm_max: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Training data in flow-state form.
struct Prepared {
    c1: Vec<FlowState>,
    kinds: Vec<Vec<usize>>,
}

fn prepare(task: Task, data: &[Crystal], net: &NetConfig) -> Result<Prepared> {
    if data.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let mut c1 = Vec::with_capacity(data.len());
    let mut kinds = Vec::with_capacity(data.len());
    for c in data {
        if c.num_atoms() > net.max_atoms {
            return Err(Error::Capacity { n: c.num_atoms(), cap: net.max_atoms });
        }
        c1.push(FlowState::from_crystal(c, task)?);
        kinds.push(c.kinds().to_vec());
    }
    Ok(Prepared { c1, kinds })
}

fn draw_item<R: Rng + ?Sized>(
    task: Task,
    prep: &Prepared,
    idx: usize,
    prior: &LengthPrior,
    rng: &mut R,
) -> Result<TrainItem> {
    let c1 = &prep.c1[idx];
    let c0 = sample_base(c1.num_atoms(), task, prior, rng)?;
    let t = rng.random_range(0.0..1.0 - T_EPS);
    let path = sample_conditional_path(&c0, c1, t, task)?;
    Ok(match task {
        Task::Csp => TrainItem { path, kinds: Some(prep.kinds[idx].clone()), a1_bits: None },
        Task::Dng => TrainItem { path, kinds: None, a1_bits: c1.bits.clone() },
    })
}

/// Estimates z-score statistics from random regression pairs.
pub fn estimate_zscore<R: Rng + ?Sized>(
    task: Task,
    data: &[Crystal],
    prior: &LengthPrior,
    samples: usize,
    net: &NetConfig,
    rng: &mut R,
) -> Result<ZScoreStats> {
    let prep = prepare(task, data, net)?;
    let paths = (0..samples.max(1))
        .map(|_| {
            let idx = rng.random_range(0..prep.c1.len());
            draw_item(task, &prep, idx, prior, rng).map(|it| it.path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ZScoreStats::from_paths(&paths))
}

/// Trains a vector-field model by flow matching; deterministic for a fixed seed.
pub fn train(
    config: &RunConfig,
    data: &[Crystal],
    prior: &LengthPrior,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutput> {
    config.validate()?;
    let task = config.task;
    let prep = prepare(task, data, &config.net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let zscore = estimate_zscore(task, data, prior, config.zscore_samples, &config.net, &mut rng)?;
    let mut model = Model::init(config.net.clone(), &mut rng)?;
    model.zscore = zscore;
    let mut opt = AdamW::new(model.params.values.len(), config.learning_rate, config.weight_decay);

    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut order: Vec<usize> = (0..prep.c1.len()).collect();
    let mut step = 0usize;
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossTerms::default();
        let mut norm_acc = 0.0;
        let mut clipped_max: f64 = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| draw_item(task, &prep, i, prior, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (terms, mut grad) = match model.gradient(&batch, &config.loss_weights) {
                Ok(r) => r,
                Err(Error::Numeric(reason)) => {
                    return Err(Error::Diverged { step, reason, last_good: Box::new(model) })
                }
                Err(e) => return Err(e),
            };
            let total = terms.total();
            if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite loss or gradient".into(),
                    last_good: Box::new(model),
                });
            }
            let (pre, post) = clip_grad_norm(&mut grad, config.grad_clip);
            opt.step(&mut model.params.values, &grad);
            acc.add_scaled(&terms, 1.0);
            norm_acc += pre;
            clipped_max = clipped_max.max(post);
            n_batches += 1;
            step_losses.push(total);
            step += 1;
            if config.max_steps > 0 && step >= config.max_steps {
                let entry = epoch_entry(epoch, step, acc, norm_acc, clipped_max, n_batches);
                on_epoch(&entry);
                log.push(entry);
                break 'epochs;
            }
        }
        let entry = epoch_entry(epoch, step, acc, norm_acc, clipped_max, n_batches);
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutput { model, log, step_losses })
}

fn epoch_entry(epoch: usize, steps: usize, acc: LossTerms, norm: f64, clipped: f64, n: usize) -> EpochLog {
    let inv = 1.0 / n.max(1) as f64;
    let mut loss = LossTerms::default();
    loss.add_scaled(&acc, inv);
    EpochLog { epoch, steps, total: loss.total(), loss, grad_norm: norm * inv, clipped_norm_max: clipped }
}
