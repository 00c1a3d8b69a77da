//! Minimal reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! leaves tied to an offset in a flat parameter vector; `backward` writes
//! their adjoints into a flat gradient of the same layout.

use ndarray::{s, Array1, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param { offset: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Silu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Array2<f64>, inv_std: Array1<f64> },
    Gather { x: Var, idx: Vec<usize> },
    ScatterSum { x: Var, idx: Vec<usize> },
    ScaleRows { x: Var, s: Vec<f64> },
    ConcatCols(Vec<Var>),
    ColAffine { x: Var, scale: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A parameter block occupying `rows*cols` entries of `flat` starting at `offset`.
    pub fn param(&mut self, flat: &[f64], offset: usize, rows: usize, cols: usize) -> Var {
        let value = Array2::from_shape_vec((rows, cols), flat[offset..offset + rows * cols].to_vec())
            .expect("parameter block shape");
        self.push(value, Op::Param { offset }, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// `x + row` broadcast over the rows of `x`; `row` is `1×c`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        let ng = self.ng(x) || self.ng(row);
        self.push(v, Op::AddRow(x, row), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|z| z * sigmoid(z));
        let ng = self.ng(x);
        self.push(v, Op::Silu(x), ng)
    }

    /// Row-wise layer normalization with learnable `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let c = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / c;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|z| z * z).sum_axis(Axis(1)) / c;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let v = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(v, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng)
    }

    /// Output row `e` is input row `idx[e]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), idx);
        let ng = self.ng(x);
        self.push(v, Op::Gather { x, idx: idx.to_vec() }, ng)
    }

    /// Output row `r` is the sum of input rows `e` with `idx[e] == r`, in input order.
    pub fn scatter_sum(&mut self, x: Var, idx: &[usize], rows: usize) -> Var {
        let xv = self.value(x);
        let mut v = Array2::zeros((rows, xv.ncols()));
        for (e, &r) in idx.iter().enumerate() {
            let mut dst = v.row_mut(r);
            dst += &xv.row(e);
        }
        let ng = self.ng(x);
        self.push(v, Op::ScatterSum { x, idx: idx.to_vec() }, ng)
    }

    pub fn scale_rows(&mut self, x: Var, s: &[f64]) -> Var {
        let sv = Array1::from(s.to_vec());
        let v = self.value(x) * &sv.view().insert_axis(Axis(1));
        let ng = self.ng(x);
        self.push(v, Op::ScaleRows { x, s: s.to_vec() }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat rows agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// `x * scale + shift` per column with constant `scale` and `shift`.
    pub fn col_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Var {
        let sc = Array1::from(scale.to_vec());
        let sh = Array1::from(shift.to_vec());
        let v = self.value(x) * &sc + &sh;
        let ng = self.ng(x);
        self.push(v, Op::ColAffine { x, scale: scale.to_vec() }, ng)
    }

    /// Propagates the given output adjoints back to every parameter, accumulating into `grad`.
    pub fn backward(&self, seeds: Vec<(Var, Array2<f64>)>, grad: &mut [f64]) {
        let mut adj: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut adj, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (dst, src) in grad[*offset..*offset + g.len()].iter_mut().zip(g.iter()) {
                        *dst += src;
                    }
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut adj, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut adj, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut adj, *b, g.clone());
                    }
                    if self.ng(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.ng(*row) {
                        accumulate(&mut adj, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        accumulate(&mut adj, *x, g);
                    }
                }
                Op::Silu(x) => {
                    let mut gx = g;
                    ndarray::Zip::from(&mut gx).and(self.value(*x)).for_each(|gi, &z| {
                        let s = sigmoid(z);
                        *gi *= s * (1.0 + z * (1.0 - s));
                    });
                    accumulate(&mut adj, *x, gx);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    if self.ng(*bias) {
                        accumulate(&mut adj, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*gain) {
                        accumulate(&mut adj, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        let c = xhat.ncols() as f64;
                        let gxhat = &g * self.value(*gain);
                        let m1 = gxhat.sum_axis(Axis(1)) / c;
                        let m2 = (&gxhat * xhat).sum_axis(Axis(1)) / c;
                        let gx = (gxhat - &m1.insert_axis(Axis(1)) - xhat * &m2.insert_axis(Axis(1)))
                            * &inv_std.view().insert_axis(Axis(1));
                        accumulate(&mut adj, *x, gx);
                    }
                }
                Op::Gather { x, idx } => {
                    let rows = self.value(*x).nrows();
                    let mut gx = Array2::zeros((rows, g.ncols()));
                    for (e, &r) in idx.iter().enumerate() {
                        let mut dst = gx.row_mut(r);
                        dst += &g.row(e);
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::ScatterSum { x, idx } => {
                    accumulate(&mut adj, *x, g.select(Axis(0), idx));
                }
                Op::ScaleRows { x, s } => {
                    let sv = Array1::from(s.clone());
                    accumulate(&mut adj, *x, g * &sv.insert_axis(Axis(1)));
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.ng(*p) {
                            accumulate(&mut adj, *p, g.slice(s![.., c0..c0 + w]).to_owned());
                        }
                        c0 += w;
                    }
                }
                Op::ColAffine { x, scale } => {
                    let sc = Array1::from(scale.clone());
                    accumulate(&mut adj, *x, g * &sc);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut adj[v.0] {
        Some(a) => *a += &g,
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    crate::crystal::sigmoid(z)
}
