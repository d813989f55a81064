//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates exact partial derivatives for every parameter leaf.
//!
//! Losses with closed-form gradients (softmax cross-entropy, the contrastive
//! family) enter the tape through [`Tape::scalar_loss`], which stores the
//! gradient with respect to the loss input next to the value.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const BN_EPS: f64 = 1e-5;
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Image geometry of a batch whose rows are flattened `(C, H, W)` tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageGeom {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    L2Rows {
        x: Var,
        norms: Vec<f64>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        geom: ImageGeom,
        out_channels: usize,
    },
    AvgPool2 {
        x: Var,
        geom: ImageGeom,
    },
    GlobalAvgPool {
        x: Var,
        geom: ImageGeom,
    },
    ScalarLoss {
        x: Var,
        grad: Matrix,
    },
    HalfSumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Per-parameter gradients, indexed by the id passed to [`Tape::param`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&Matrix> {
        self.by_param.get(param).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn into_vec(self) -> Vec<Option<Matrix>> {
        self.by_param
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    relu_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn finite(op: &'static str, pass: &'static str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op, pass })
    }
}

fn shape_err(a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        left: vec![a.rows(), a.cols()],
        right: vec![b.rows(), b.cols()],
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            relu_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Smallest `|input|` seen by any rectifier; finite-difference checks use
    /// it to stay away from kinks.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op) -> Result<Var> {
        finite(name, "forward", &value)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push("constant", value, Op::Constant)
    }

    pub fn param(&mut self, id: usize, value: Matrix) -> Result<Var> {
        self.push("param", value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err(xv, bv));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push("add_bias", value, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(av, bv));
        }
        let mut value = av.clone();
        value.add_assign(bv);
        self.push("add", value, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).scale(s);
        self.push("scale", value, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let margin = xv.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let mut value = xv.clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.relu_margin = self.relu_margin.min(margin);
        self.push("relu", value, Op::Relu(x))
    }

    /// Column-wise normalisation with batch statistics, then `gamma * x + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != (1, cols) || bv.shape() != (1, cols) {
            return Err(shape_err(xv, gv));
        }
        if rows == 0 {
            return Err(Error::Empty("batch-norm input"));
        }
        let n = rows as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(cols);
        for c in 0..cols {
            let mean = (0..rows).map(|r| xv.get(r, c)).sum::<f64>() / n;
            let var = (0..rows).map(|r| (xv.get(r, c) - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + BN_EPS).sqrt();
            for r in 0..rows {
                xhat.set(r, c, (xv.get(r, c) - mean) * inv);
            }
            inv_std.push(inv);
        }
        let mut value = xhat.clone();
        for r in 0..rows {
            for c in 0..cols {
                value.set(r, c, gv.data()[c] * xhat.get(r, c) + bv.data()[c]);
            }
        }
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = crate::tensor::norm(xv.row(r));
            if !(n >= DEGENERATE_NORM) {
                return Err(Error::DegenerateEmbedding { row: r, norm: n });
            }
            value.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push("l2_normalize", value, Op::L2Rows { x, norms })
    }

    /// 3x3 convolution, stride 1, zero padding 1. `w` is
    /// `out_channels x (in_channels * 9)`, `b` is `1 x out_channels`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, geom: ImageGeom) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != geom.len() || wv.cols() != geom.channels * 9 || bv.shape() != (1, wv.rows()) {
            return Err(shape_err(xv, wv));
        }
        let out_channels = wv.rows();
        let (h, wd, plane) = (geom.height, geom.width, geom.plane());
        let mut value = Matrix::zeros(xv.rows(), out_channels * plane);
        for r in 0..xv.rows() {
            let input = xv.row(r);
            let out = value.row_mut(r);
            for co in 0..out_channels {
                let kernel = wv.row(co);
                let dst = &mut out[co * plane..(co + 1) * plane];
                dst.fill(bv.data()[co]);
                for ci in 0..geom.channels {
                    let src = &input[ci * plane..(ci + 1) * plane];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let k = kernel[ci * 9 + ky * 3 + kx];
                            for y in 0..h {
                                let sy = y + ky;
                                if sy < 1 || sy > h {
                                    continue;
                                }
                                let sy = sy - 1;
                                for xx in 0..wd {
                                    let sx = xx + kx;
                                    if sx < 1 || sx > wd {
                                        continue;
                                    }
                                    dst[y * wd + xx] += k * src[sy * wd + sx - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            "conv3x3",
            value,
            Op::Conv3x3 {
                x,
                w,
                b,
                geom,
                out_channels,
            },
        )
    }

    /// 2x2 average pooling; height and width must be even.
    pub fn avg_pool2(&mut self, x: Var, geom: ImageGeom) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != geom.len() || geom.height % 2 != 0 || geom.width % 2 != 0 {
            return Err(Error::ShapeMismatch {
                left: vec![geom.channels, geom.height, geom.width],
                right: vec![xv.cols()],
            });
        }
        let (oh, ow) = (geom.height / 2, geom.width / 2);
        let mut value = Matrix::zeros(xv.rows(), geom.channels * oh * ow);
        for r in 0..xv.rows() {
            let src = xv.row(r);
            let dst = value.row_mut(r);
            for c in 0..geom.channels {
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = c * geom.plane();
                        let s = src[base + 2 * y * geom.width + 2 * xx]
                            + src[base + 2 * y * geom.width + 2 * xx + 1]
                            + src[base + (2 * y + 1) * geom.width + 2 * xx]
                            + src[base + (2 * y + 1) * geom.width + 2 * xx + 1];
                        dst[c * oh * ow + y * ow + xx] = 0.25 * s;
                    }
                }
            }
        }
        self.push("avg_pool2", value, Op::AvgPool2 { x, geom })
    }

    /// Mean over each channel plane.
    pub fn global_avg_pool(&mut self, x: Var, geom: ImageGeom) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != geom.len() {
            return Err(Error::ShapeMismatch {
                left: vec![geom.channels, geom.height, geom.width],
                right: vec![xv.cols()],
            });
        }
        let plane = geom.plane();
        let mut value = Matrix::zeros(xv.rows(), geom.channels);
        for r in 0..xv.rows() {
            for c in 0..geom.channels {
                let s: f64 = xv.row(r)[c * plane..(c + 1) * plane].iter().sum();
                value.set(r, c, s / plane as f64);
            }
        }
        self.push("global_avg_pool", value, Op::GlobalAvgPool { x, geom })
    }

    /// Records a scalar loss of `x` whose gradient `d loss / d x` is already
    /// known.
    pub fn scalar_loss(&mut self, name: &'static str, x: Var, value: f64, grad: Matrix) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(shape_err(self.value(x), &grad));
        }
        finite(name, "backward", &grad)?;
        self.push(name, Matrix::scalar(value), Op::ScalarLoss { x, grad })
    }

    /// `0.5 * sum(x^2)`.
    pub fn half_sum_squares(&mut self, x: Var) -> Result<Var> {
        let v = 0.5 * self.value(x).frobenius_sq();
        self.push("half_sum_squares", Matrix::scalar(v), Op::HalfSumSquares(x))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            if self.value(v).shape() != (1, 1) {
                return Err(shape_err(self.value(v), &Matrix::scalar(0.0)));
            }
            let scaled = self.scale(v, w)?;
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        match acc {
            Some(v) => Ok(v),
            None => self.constant(Matrix::scalar(0.0)),
        }
    }

    /// Gradients of the scalar `output` with respect to every parameter leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                left: vec![1, 1],
                right: vec![out.rows(), out.cols()],
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));
        let mut params: Vec<Option<Matrix>> = Vec::new();

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if params.len() <= *id {
                        params.resize(*id + 1, None);
                    }
                    match &mut params[*id] {
                        Some(existing) => existing.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&g)?;
                    finite("matmul", "backward", &da)?;
                    finite("matmul", "backward", &db)?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddBias(x, b) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for row in g.iter_rows() {
                        for (o, v) in db.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.scale(*s)),
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = g.shape();
                    let n = rows as f64;
                    let gv = self.value(*gamma);
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for c in 0..cols {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for r in 0..rows {
                            sum_g += g.get(r, c);
                            sum_gx += g.get(r, c) * xhat.get(r, c);
                        }
                        dgamma.data_mut()[c] = sum_gx;
                        dbeta.data_mut()[c] = sum_g;
                        let scale = gv.data()[c] * inv_std[c] / n;
                        for r in 0..rows {
                            let v = scale * (n * g.get(r, c) - sum_g - xhat.get(r, c) * sum_gx);
                            dx.set(r, c, v);
                        }
                    }
                    finite("batch_norm", "backward", &dx)?;
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                    acc(&mut grads, *x, dx);
                }
                Op::L2Rows { x, norms } => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for r in 0..y.rows() {
                        let proj = crate::tensor::dot(y.row(r), g.row(r));
                        for (d, yv) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                            *d = (*d - yv * proj) / norms[r];
                        }
                    }
                    finite("l2_normalize", "backward", &dx)?;
                    acc(&mut grads, *x, dx);
                }
                Op::Conv3x3 {
                    x,
                    w,
                    b,
                    geom,
                    out_channels,
                } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (h, wd, plane) = (geom.height, geom.width, geom.plane());
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                    let mut db = Matrix::zeros(1, *out_channels);
                    for r in 0..xv.rows() {
                        let input = xv.row(r);
                        let gout = g.row(r);
                        for co in 0..*out_channels {
                            let gplane = &gout[co * plane..(co + 1) * plane];
                            db.data_mut()[co] += gplane.iter().sum::<f64>();
                            for ci in 0..geom.channels {
                                let src = &input[ci * plane..(ci + 1) * plane];
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let kidx = ci * 9 + ky * 3 + kx;
                                        let k = wv.get(co, kidx);
                                        let mut dk = 0.0;
                                        for y in 0..h {
                                            let sy = y + ky;
                                            if sy < 1 || sy > h {
                                                continue;
                                            }
                                            let sy = sy - 1;
                                            for xx in 0..wd {
                                                let sx = xx + kx;
                                                if sx < 1 || sx > wd {
                                                    continue;
                                                }
                                                let gv = gplane[y * wd + xx];
                                                dk += gv * src[sy * wd + sx - 1];
                                                dx.row_mut(r)[ci * plane + sy * wd + sx - 1] += gv * k;
                                            }
                                        }
                                        dw.row_mut(co)[kidx] += dk;
                                    }
                                }
                            }
                        }
                    }
                    finite("conv3x3", "backward", &dx)?;
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *x, dx);
                }
                Op::AvgPool2 { x, geom } => {
                    let (oh, ow) = (geom.height / 2, geom.width / 2);
                    let mut dx = Matrix::zeros(g.rows(), geom.len());
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let d = dx.row_mut(r);
                        for c in 0..geom.channels {
                            let base = c * geom.plane();
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let v = 0.25 * gr[c * oh * ow + y * ow + xx];
                                    d[base + 2 * y * geom.width + 2 * xx] += v;
                                    d[base + 2 * y * geom.width + 2 * xx + 1] += v;
                                    d[base + (2 * y + 1) * geom.width + 2 * xx] += v;
                                    d[base + (2 * y + 1) * geom.width + 2 * xx + 1] += v;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool { x, geom } => {
                    let plane = geom.plane();
                    let mut dx = Matrix::zeros(g.rows(), geom.len());
                    for r in 0..g.rows() {
                        for c in 0..geom.channels {
                            let v = g.get(r, c) / plane as f64;
                            dx.row_mut(r)[c * plane..(c + 1) * plane].fill(v);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ScalarLoss { x, grad } => {
                    acc(&mut grads, *x, grad.scale(g.data()[0]));
                }
                Op::HalfSumSquares(x) => {
                    acc(&mut grads, *x, self.value(*x).scale(g.data()[0]));
                }
            }
        }
        Ok(Gradients { by_param: params })
    }
}
