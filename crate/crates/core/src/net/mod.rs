//! The parametric vector field: a message-passing network over a fully
//! connected atom graph, with reverse-mode gradients of the training loss.

pub mod checkpoint;
pub mod tape;

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crystal::{angles_from_unconstrained, dot3, norm3, Bits, NUM_BITS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::flowmatch::{
    fm_loss_grad, fm_loss_terms, sce_loss, sce_loss_grad, FlowState, LossTerms, LossWeights, PathSample,
    TangentState, Task,
};
use crate::geometry::circle_log;
use tape::{Tape, Var};

/// `(sin 2πkx, cos 2πkx)` for `k = 0..=n_freq`, interleaved.
pub fn sinusoidal_embedding(x: f64, n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * (n_freq + 1));
    push_sinusoidal(&mut out, x, n_freq);
    out
}

fn push_sinusoidal(out: &mut Vec<f64>, x: f64, n_freq: usize) {
    for k in 0..=n_freq {
        let w = TAU * k as f64 * x;
        out.push(w.sin());
        out.push(w.cos());
    }
}

/// Log-spaced frequencies from 1 to 1000 over `dim / 2` sine/cosine pairs.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let freqs: Vec<f64> = (0..half).map(|k| (1000f64.ln() * k as f64 / denom).exp()).collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (w * t).sin()).collect();
    out.extend(freqs.iter().map(|w| (w * t).cos()));
    out.resize(dim, 0.0);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub task: Task,
    pub hidden_dim: usize,
    pub layers: usize,
    pub n_freq: usize,
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub layer_norm: bool,
    /// Largest atom count accepted by `forward`.
    pub max_atoms: usize,
    /// Width of the learned atom-count embedding (de novo only).
    pub count_embed_dim: usize,
    /// Crystals per gradient shard; shards are evaluated in parallel.
    pub shard_size: usize,
}

impl NetConfig {
    /// Full-size architecture: hidden 512, 6 layers, time embedding 256.
    pub fn full(task: Task) -> Self {
        Self {
            task,
            hidden_dim: 512,
            layers: 6,
            n_freq: 8,
            time_embed_dim: 256,
            activation: Activation::Silu,
            layer_norm: true,
            max_atoms: 24,
            count_embed_dim: 32,
            shard_size: 8,
        }
    }

    /// Desk-scale profile: same shape, smaller widths.
    pub fn desk(task: Task) -> Self {
        Self { hidden_dim: 64, layers: 3, time_embed_dim: 32, count_embed_dim: 16, ..Self::full(task) }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("layers", self.layers),
            ("time_embed_dim", self.time_embed_dim),
            ("max_atoms", self.max_atoms),
            ("count_embed_dim", self.count_embed_dim),
            ("shard_size", self.shard_size),
        ];
        for (name, d) in dims {
            if d < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    fn edge_dim(&self) -> usize {
        let base = 3 * 2 * (self.n_freq + 1);
        match self.task {
            Task::Csp => base,
            Task::Dng => base + 3,
        }
    }

    fn global_dim(&self) -> usize {
        let base = 6 + self.time_embed_dim;
        match self.task {
            Task::Csp => base,
            Task::Dng => base + self.count_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Names and shapes of every parameter block in the flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
    pub total: usize,
}

impl ParamLayout {
    pub fn for_config(cfg: &NetConfig) -> Self {
        let h = cfg.hidden_dim;
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        let mut add = |name: String, r: usize, c: usize| shapes.push((name, r, c));
        match cfg.task {
            Task::Csp => add("embed_atoms".into(), NUM_CLASSES, h),
            Task::Dng => {
                add("embed_bits_w".into(), NUM_BITS, h);
                add("embed_bits_b".into(), 1, h);
                add("embed_count".into(), cfg.max_atoms + 1, cfg.count_embed_dim);
            }
        }
        for s in 0..cfg.layers {
            if cfg.layer_norm {
                add(format!("ln{s}_gain"), 1, h);
                add(format!("ln{s}_bias"), 1, h);
            }
            add(format!("msg{s}_wi"), h, h);
            add(format!("msg{s}_wj"), h, h);
            add(format!("msg{s}_we"), cfg.edge_dim(), h);
            add(format!("msg{s}_wg"), cfg.global_dim(), h);
            add(format!("msg{s}_b1"), 1, h);
            add(format!("msg{s}_w2"), h, h);
            add(format!("msg{s}_b2"), 1, h);
            add(format!("node{s}_wh"), h, h);
            add(format!("node{s}_wm"), h, h);
            add(format!("node{s}_wt"), cfg.time_embed_dim, h);
            add(format!("node{s}_b1"), 1, h);
            add(format!("node{s}_w2"), h, h);
            add(format!("node{s}_b2"), 1, h);
        }
        if cfg.layer_norm {
            add("lnf_gain".into(), 1, h);
            add("lnf_bias".into(), 1, h);
        }
        add("out_f".into(), h, 3);
        let pool = match cfg.task {
            Task::Csp => h,
            Task::Dng => 2 * h,
        };
        add("out_l_w".into(), pool, 6);
        add("out_l_b".into(), 1, 6);
        if cfg.task == Task::Dng {
            add("out_a_w".into(), h, NUM_BITS);
            add("out_a_b".into(), 1, NUM_BITS);
        }
        let mut offset = 0;
        let blocks = shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let b = ParamBlock { name, rows, cols, offset };
                offset += rows * cols;
                b
            })
            .collect();
        Self { blocks, total: offset }
    }

    pub fn block(&self, name: &str) -> &ParamBlock {
        self.blocks.iter().find(|b| b.name == name).unwrap_or_else(|| panic!("no parameter block {name}"))
    }
}

/// Flat parameter vector together with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Self {
        let layout = ParamLayout::for_config(cfg);
        let mut values = vec![0.0; layout.total];
        for b in &layout.blocks {
            let slot = &mut values[b.offset..b.offset + b.rows * b.cols];
            if b.name.ends_with("_gain") {
                slot.fill(1.0);
            } else if b.rows == 1 {
                // biases
            } else {
                let std = if b.name.starts_with("embed_atoms") || b.name.starts_with("embed_count") {
                    1.0
                } else {
                    1.0 / (b.rows as f64).sqrt()
                };
                let d = Normal::new(0.0, std).expect("finite std");
                slot.iter_mut().for_each(|x| *x = d.sample(rng));
            }
        }
        Self { layout, values }
    }

    pub fn zeros(cfg: &NetConfig) -> Self {
        let layout = ParamLayout::for_config(cfg);
        Self { values: vec![0.0; layout.total], layout }
    }
}

pub const STD_FLOOR: f64 = 1e-8;

/// Standardization statistics for the lattice input and the velocity outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub lattice_mean: [f64; 6],
    pub lattice_std: [f64; 6],
    pub df_mean: [f64; 3],
    pub df_std: [f64; 3],
    pub dl_mean: [f64; 6],
    pub dl_std: [f64; 6],
}

impl Default for ZScoreStats {
    fn default() -> Self {
        Self {
            lattice_mean: [0.0; 6],
            lattice_std: [1.0; 6],
            df_mean: [0.0; 3],
            df_std: [1.0; 3],
            dl_mean: [0.0; 6],
            dl_std: [1.0; 6],
        }
    }
}

fn mean_std<const D: usize>(rows: &[[f64; D]]) -> ([f64; D], [f64; D]) {
    let n = rows.len().max(1) as f64;
    let mean: [f64; D] = std::array::from_fn(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n);
    let std = std::array::from_fn(|k| {
        (rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt().max(STD_FLOOR)
    });
    (mean, std)
}

impl ZScoreStats {
    /// Statistics of path states and targets over a sample of regression pairs.
    pub fn from_paths<'a>(paths: impl IntoIterator<Item = &'a PathSample>) -> Self {
        let mut lat = Vec::new();
        let mut df = Vec::new();
        let mut dl = Vec::new();
        for p in paths {
            lat.push(p.c_t.lattice);
            df.extend_from_slice(&p.target.df);
            dl.push(p.target.dl);
        }
        let (lattice_mean, lattice_std) = mean_std(&lat);
        let (df_mean, df_std) = mean_std(&df);
        let (dl_mean, dl_std) = mean_std(&dl);
        Self { lattice_mean, lattice_std, df_mean, df_std, dl_mean, dl_std }
    }
}

/// A configured network with parameters and standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub params: ModelParams,
    pub zscore: ZScoreStats,
}

/// One graph to evaluate: state `c_t`, time, and the composition for CSP.
#[derive(Debug, Clone, Copy)]
pub struct GraphInput<'a> {
    pub state: &'a FlowState,
    pub t: f64,
    pub kinds: Option<&'a [usize]>,
}

/// One regression pair of a minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub path: PathSample,
    /// Composition conditioning (CSP).
    pub kinds: Option<Vec<usize>>,
    /// Data atom bits `a1` (DNG cross-entropy term).
    pub a1_bits: Option<Vec<Bits>>,
}

impl TrainItem {
    fn graph(&self) -> GraphInput<'_> {
        GraphInput { state: &self.path.c_t, t: self.path.t, kinds: self.kinds.as_deref() }
    }
}

struct Outputs {
    df: Var,
    dl: Var,
    da: Option<Var>,
    node_offsets: Vec<usize>,
}

/// Lattice vectors as columns, computed without validation; `None` when degenerate.
fn lattice_columns(lattice: &[f64; 6]) -> Option<[[f64; 3]; 3]> {
    let angles: Vec<f64> = lattice[3..].iter().map(|&y| angles_from_unconstrained(y).ok()).collect::<Option<_>>()?;
    let [ca, cb, cg] = [angles[0], angles[1], angles[2]].map(|x| x.to_radians().cos());
    let sg = angles[2].to_radians().sin();
    let cy = (ca - cb * cg) / sg;
    let cz2 = 1.0 - cb * cb - cy * cy;
    if cz2 <= 0.0 || lattice[..3].iter().any(|&l| !(l > 0.0)) {
        return None;
    }
    let (a, b, c) = (lattice[0], lattice[1], lattice[2]);
    Some([[a, 0.0, 0.0], [b * cg, b * sg, 0.0], [c * cb, c * cy, c * cz2.sqrt()]])
}

impl Model {
    pub fn new(config: NetConfig, params: ModelParams, zscore: ZScoreStats) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        if layout != params.layout || params.values.len() != layout.total {
            return Err(Error::Dimension("parameter layout does not match the network configuration".into()));
        }
        Ok(Self { config, params, zscore })
    }

    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(Self { config, params, zscore: ZScoreStats::default() })
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    fn check_input(&self, g: &GraphInput<'_>) -> Result<()> {
        let n = g.state.num_atoms();
        if n > self.config.max_atoms {
            return Err(Error::Capacity { n, cap: self.config.max_atoms });
        }
        if !g.t.is_finite() || !g.state.is_finite() {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        match self.config.task {
            Task::Csp => match g.kinds {
                Some(k) if k.len() == n => {
                    if let Some(bad) = k.iter().find(|&&x| x >= NUM_CLASSES) {
                        return Err(Error::Range(format!("atom class {bad} >= {NUM_CLASSES}")));
                    }
                }
                Some(k) => return Err(Error::Dimension(format!("{} kinds for {n} atoms", k.len()))),
                None => return Err(Error::Dimension("structure prediction needs a composition".into())),
            },
            Task::Dng => match &g.state.bits {
                Some(b) if b.len() == n => {}
                _ => return Err(Error::Dimension("de novo input needs n×7 atom bits".into())),
            },
        }
        Ok(())
    }

    fn build(&self, tape: &mut Tape, items: &[GraphInput<'_>]) -> Result<Outputs> {
        for g in items {
            self.check_input(g)?;
        }
        let cfg = &self.config;
        let p = &self.params.values;
        let layout = &self.params.layout;
        let h = cfg.hidden_dim;
        let param = |tape: &mut Tape, name: &str| {
            let b = layout.block(name);
            tape.param(p, b.offset, b.rows, b.cols)
        };

        let nb = items.len();
        let mut node_offsets = Vec::with_capacity(nb + 1);
        let mut node_crystal = Vec::new();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut edge_crystal = Vec::new();
        let mut edge_feats = Vec::new();
        let mut total = 0;
        for (b, g) in items.iter().enumerate() {
            node_offsets.push(total);
            let n = g.state.num_atoms();
            let f = g.state.frac.coords();
            let cols = match cfg.task {
                Task::Dng => lattice_columns(&g.state.lattice),
                Task::Csp => None,
            };
            for i in 0..n {
                node_crystal.push(b);
                for j in 0..n {
                    src.push(total + i);
                    dst.push(total + j);
                    edge_crystal.push(b);
                    match cfg.task {
                        Task::Csp => {
                            for k in 0..3 {
                                push_sinusoidal(&mut edge_feats, f[j][k] - f[i][k], cfg.n_freq);
                            }
                        }
                        Task::Dng => {
                            let d: [f64; 3] = std::array::from_fn(|k| circle_log(f[i][k], f[j][k]));
                            for dk in d {
                                push_sinusoidal(&mut edge_feats, dk, cfg.n_freq);
                            }
                            edge_feats.extend_from_slice(&direction_cosines(cols.as_ref(), d));
                        }
                    }
                }
            }
            total += n;
        }
        node_offsets.push(total);
        let n_edges = src.len();
        let ef = tape.input(Array2::from_shape_vec((n_edges, cfg.edge_dim()), edge_feats).expect("edge features"));

        let z = &self.zscore;
        let mut temb = Vec::with_capacity(nb * cfg.time_embed_dim);
        let mut glob = Vec::with_capacity(nb * (6 + cfg.time_embed_dim));
        for g in items {
            let te = time_embedding(g.t, cfg.time_embed_dim);
            glob.extend((0..6).map(|k| (g.state.lattice[k] - z.lattice_mean[k]) / z.lattice_std[k]));
            glob.extend_from_slice(&te);
            temb.extend_from_slice(&te);
        }
        let temb = tape.input(Array2::from_shape_vec((nb, cfg.time_embed_dim), temb).expect("time embedding"));
        let glob = tape.input(Array2::from_shape_vec((nb, 6 + cfg.time_embed_dim), glob).expect("globals"));

        let (mut hcur, glob) = match cfg.task {
            Task::Csp => {
                let kinds: Vec<usize> = items.iter().flat_map(|g| g.kinds.unwrap().iter().copied()).collect();
                let table = param(tape, "embed_atoms");
                (tape.gather(table, &kinds), glob)
            }
            Task::Dng => {
                let bits: Vec<f64> =
                    items.iter().flat_map(|g| g.state.bits.as_ref().unwrap().iter().flatten().copied()).collect();
                let bits = tape.input(Array2::from_shape_vec((total, NUM_BITS), bits).expect("bits"));
                let w = param(tape, "embed_bits_w");
                let b = param(tape, "embed_bits_b");
                let h0 = tape.matmul(bits, w);
                let h0 = tape.add_row(h0, b);
                let counts: Vec<usize> = items.iter().map(|g| g.state.num_atoms()).collect();
                let table = param(tape, "embed_count");
                let zn = tape.gather(table, &counts);
                (h0, tape.concat_cols(&[glob, zn]))
            }
        };

        for s in 0..cfg.layers {
            let hn = if cfg.layer_norm {
                let gain = param(tape, &format!("ln{s}_gain"));
                let bias = param(tape, &format!("ln{s}_bias"));
                tape.layer_norm(hcur, gain, bias)
            } else {
                hcur
            };
            // phi_m on [h_i, h_j, edge, globals], split per input block
            let wi = param(tape, &format!("msg{s}_wi"));
            let wj = param(tape, &format!("msg{s}_wj"));
            let we = param(tape, &format!("msg{s}_we"));
            let wg = param(tape, &format!("msg{s}_wg"));
            let b1 = param(tape, &format!("msg{s}_b1"));
            let w2 = param(tape, &format!("msg{s}_w2"));
            let b2 = param(tape, &format!("msg{s}_b2"));
            let hi = tape.matmul(hn, wi);
            let hj = tape.matmul(hn, wj);
            let gw = tape.matmul(glob, wg);
            let pre_i = tape.gather(hi, &src);
            let pre_j = tape.gather(hj, &dst);
            let pre_e = tape.matmul(ef, we);
            let pre_g = tape.gather(gw, &edge_crystal);
            let pre = tape.add(pre_i, pre_j);
            let pre = tape.add(pre, pre_e);
            let pre = tape.add(pre, pre_g);
            let pre = tape.add_row(pre, b1);
            let act = tape.silu(pre);
            let m = tape.matmul(act, w2);
            let m = tape.add_row(m, b2);
            let m = tape.silu(m);
            let agg = tape.scatter_sum(m, &src, total);

            // phi_h on [h_i, m_i, time]
            let wh = param(tape, &format!("node{s}_wh"));
            let wm = param(tape, &format!("node{s}_wm"));
            let wt = param(tape, &format!("node{s}_wt"));
            let c1 = param(tape, &format!("node{s}_b1"));
            let u2 = param(tape, &format!("node{s}_w2"));
            let c2 = param(tape, &format!("node{s}_b2"));
            let qh = tape.matmul(hn, wh);
            let qm = tape.matmul(agg, wm);
            let tw = tape.matmul(temb, wt);
            let qt = tape.gather(tw, &node_crystal);
            let q = tape.add(qh, qm);
            let q = tape.add(q, qt);
            let q = tape.add_row(q, c1);
            let q = tape.silu(q);
            let u = tape.matmul(q, u2);
            let u = tape.add_row(u, c2);
            let u = tape.silu(u);
            hcur = tape.add(hcur, u);
        }
        debug_assert_eq!(tape.value(hcur).ncols(), h);

        let hf = if cfg.layer_norm {
            let gain = param(tape, "lnf_gain");
            let bias = param(tape, "lnf_bias");
            tape.layer_norm(hcur, gain, bias)
        } else {
            hcur
        };

        let wf = param(tape, "out_f");
        let df = tape.matmul(hf, wf);
        let df = tape.col_affine(df, &z.df_std, &z.df_mean);

        let sum = tape.scatter_sum(hf, &node_crystal, nb);
        let inv_n: Vec<f64> = items.iter().map(|g| 1.0 / g.state.num_atoms() as f64).collect();
        let mean = tape.scale_rows(sum, &inv_n);
        let pooled = match cfg.task {
            Task::Csp => mean,
            Task::Dng => tape.concat_cols(&[mean, sum]),
        };
        let wl = param(tape, "out_l_w");
        let bl = param(tape, "out_l_b");
        let dl = tape.matmul(pooled, wl);
        let dl = tape.add_row(dl, bl);
        let dl = tape.col_affine(dl, &z.dl_std, &z.dl_mean);

        let da = match cfg.task {
            Task::Csp => None,
            Task::Dng => {
                let wa = param(tape, "out_a_w");
                let ba = param(tape, "out_a_b");
                let da = tape.matmul(hf, wa);
                Some(tape.add_row(da, ba))
            }
        };
        Ok(Outputs { df, dl, da, node_offsets })
    }

    fn collect(&self, tape: &Tape, out: &Outputs, nb: usize) -> Vec<TangentState> {
        let df = tape.value(out.df);
        let dl = tape.value(out.dl);
        (0..nb)
            .map(|b| {
                let (lo, hi) = (out.node_offsets[b], out.node_offsets[b + 1]);
                let da = match out.da {
                    Some(v) => {
                        let da = tape.value(v);
                        (lo..hi).flat_map(|i| (0..NUM_BITS).map(move |j| da[[i, j]])).collect()
                    }
                    None => vec![0.0; (hi - lo) * NUM_BITS],
                };
                TangentState {
                    da,
                    df: (lo..hi).map(|i| [df[[i, 0]], df[[i, 1]], df[[i, 2]]]).collect(),
                    dl: std::array::from_fn(|k| dl[[b, k]]),
                }
            })
            .collect()
    }

    /// Velocity prediction for a batch of graphs.
    pub fn forward_batch(&self, items: &[GraphInput<'_>]) -> Result<Vec<TangentState>> {
        let mut tape = Tape::new();
        let out = self.build(&mut tape, items)?;
        let res = self.collect(&tape, &out, items.len());
        if res.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("network produced a non-finite velocity".into()));
        }
        Ok(res)
    }

    pub fn forward(&self, state: &FlowState, t: f64, kinds: Option<&[usize]>) -> Result<TangentState> {
        Ok(self.forward_batch(&[GraphInput { state, t, kinds }])?.remove(0))
    }

    /// Mean minibatch loss and its exact gradient with respect to every parameter.
    pub fn gradient(&self, batch: &[TrainItem], weights: &LossWeights) -> Result<(LossTerms, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty minibatch".into()));
        }
        let task = self.config.task;
        let nw = weights.normalized(task)?;
        let inv_b = 1.0 / batch.len() as f64;
        let shards: Vec<&[TrainItem]> = batch.chunks(self.config.shard_size).collect();
        let results: Vec<Result<(LossTerms, Vec<f64>)>> = shards
            .par_iter()
            .map(|shard| {
                let mut tape = Tape::new();
                let graphs: Vec<GraphInput<'_>> = shard.iter().map(TrainItem::graph).collect();
                let out = self.build(&mut tape, &graphs)?;
                let preds = self.collect(&tape, &out, shard.len());
                let total_nodes = *out.node_offsets.last().unwrap();
                let mut g_df = Array2::zeros((total_nodes, 3));
                let mut g_dl = Array2::zeros((shard.len(), 6));
                let mut g_da = Array2::zeros((total_nodes, NUM_BITS));
                let mut terms = LossTerms::default();
                for (b, (item, pred)) in shard.iter().zip(&preds).enumerate() {
                    let target = &item.path.target;
                    let mut lt = fm_loss_terms(pred, target, weights, task)?;
                    let gp = fm_loss_grad(pred, target, weights, task)?;
                    let mut gda = gp.da;
                    if task == Task::Dng && nw.sce > 0.0 {
                        let (Some(a1), Some(at)) = (&item.a1_bits, &item.path.c_t.bits) else {
                            return Err(Error::Dimension("cross-entropy term needs data and path bits".into()));
                        };
                        lt.sce = nw.sce * sce_loss(a1, &pred.da, at, item.path.t);
                        let gs = sce_loss_grad(a1, &pred.da, at, item.path.t);
                        gda.iter_mut().zip(gs).for_each(|(x, y)| *x += nw.sce * y);
                    }
                    for (name, v) in [("atom", lt.a), ("frac", lt.f), ("lattice", lt.l), ("cross-entropy", lt.sce)] {
                        if !v.is_finite() {
                            return Err(Error::Numeric(format!("non-finite {name} loss term")));
                        }
                    }
                    terms.add_scaled(&lt, inv_b);
                    let lo = out.node_offsets[b];
                    for (i, row) in gp.df.iter().enumerate() {
                        for k in 0..3 {
                            g_df[[lo + i, k]] = row[k] * inv_b;
                        }
                    }
                    for k in 0..6 {
                        g_dl[[b, k]] = gp.dl[k] * inv_b;
                    }
                    if task == Task::Dng {
                        for (e, v) in gda.iter().enumerate() {
                            g_da[[lo + e / NUM_BITS, e % NUM_BITS]] = v * inv_b;
                        }
                    }
                }
                let mut seeds = vec![(out.df, g_df), (out.dl, g_dl)];
                if let Some(da) = out.da {
                    seeds.push((da, g_da));
                }
                let mut grad = vec![0.0; self.params.values.len()];
                tape.backward(seeds, &mut grad);
                Ok((terms, grad))
            })
            .collect();
        let mut terms = LossTerms::default();
        let mut grad = vec![0.0; self.params.values.len()];
        for r in results {
            let (t, g) = r?;
            terms.add_scaled(&t, 1.0);
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok((terms, grad))
    }

    /// Mean minibatch loss without gradients.
    pub fn loss(&self, batch: &[TrainItem], weights: &LossWeights) -> Result<LossTerms> {
        let task = self.config.task;
        let nw = weights.normalized(task)?;
        let graphs: Vec<GraphInput<'_>> = batch.iter().map(TrainItem::graph).collect();
        let preds = self.forward_batch(&graphs)?;
        let mut terms = LossTerms::default();
        let inv_b = 1.0 / batch.len().max(1) as f64;
        for (item, pred) in batch.iter().zip(&preds) {
            let mut lt = fm_loss_terms(pred, &item.path.target, weights, task)?;
            if task == Task::Dng && nw.sce > 0.0 {
                if let (Some(a1), Some(at)) = (&item.a1_bits, &item.path.c_t.bits) {
                    lt.sce = nw.sce * sce_loss(a1, &pred.da, at, item.path.t);
                }
            }
            terms.add_scaled(&lt, inv_b);
        }
        Ok(terms)
    }
}

/// Cosines between the Cartesian edge vector and each lattice vector.
fn direction_cosines(cols: Option<&[[f64; 3]; 3]>, d: [f64; 3]) -> [f64; 3] {
    let Some(cols) = cols else { return [0.0; 3] };
    let e: [f64; 3] = std::array::from_fn(|r| (0..3).map(|k| d[k] * cols[k][r]).sum());
    let ne = norm3(e);
    if ne < 1e-12 {
        return [0.0; 3];
    }
    std::array::from_fn(|k| dot3(cols[k], e) / (norm3(cols[k]) * ne))
}
