//! Operator set of the tape: forward evaluation on [`Tape`] plus the
//! matching backward rules.

use alloc::{format, vec, vec::Vec};

use super::{leading_dims, with_grad, Node, Tape, Var};
use crate::compositing;
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::math;
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
    Sigmoid,
    Exp,
    Log,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus => math::softplus(x),
            Activation::Sigmoid => math::sigmoid(x),
            Activation::Exp => math::exp(x),
            Activation::Log => math::ln(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => math::sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Exp => y,
            Activation::Log => 1.0 / x,
        }
    }
}

pub(super) enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, groups: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Var, Activation),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, normalized: Vec<f64>, rstd: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Transpose12 { x: Var, dims: [usize; 4] },
    Reshape(Var),
    Sum(Var),
    VolumeRender { sigma: Var, attr: Var, deltas: Vec<f64>, rays: usize, samples: usize },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<f64> },
    SumSquaredError { pred: Var, target: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
}

#[derive(Clone, Copy)]
pub(super) struct ConvGeom {
    images: usize,
    height: usize,
    width: usize,
    cin: usize,
    cout: usize,
}

impl ConvGeom {
    fn pixels(&self) -> usize {
        self.images * self.height * self.width
    }

    /// 3×3 same-padding patches, one row per output pixel, ordered `(ky, kx, c)`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let k = 9 * self.cin;
        let mut cols = vec![0.0; self.pixels() * k];
        for n in 0..self.images {
            for y in 0..self.height {
                for xx in 0..self.width {
                    let row = ((n * self.height + y) * self.width + xx) * k;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= self.width as isize {
                                continue;
                            }
                            let src = ((n * self.height + sy as usize) * self.width + sx as usize) * self.cin;
                            let dst = row + (ky * 3 + kx) * self.cin;
                            cols[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let k = 9 * self.cin;
        for n in 0..self.images {
            for y in 0..self.height {
                for xx in 0..self.width {
                    let row = ((n * self.height + y) * self.width + xx) * k;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= self.width as isize {
                                continue;
                            }
                            let dst = ((n * self.height + sy as usize) * self.width + sx as usize) * self.cin;
                            let src = row + (ky * 3 + kx) * self.cin;
                            for c in 0..self.cin {
                                dx[dst + c] += cols[src + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.last_dim())
}

impl Tape {
    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, rg, op)
    }

    /// `x · w + b` over the last axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, inner) = rows_cols(xv);
        if wv.rank() != 2 || wv.shape()[0] != inner {
            return Err(Error::dim(
                "affine",
                format!("x {:?} cannot multiply w {:?}", xv.shape(), wv.shape()),
            ));
        }
        let outd = wv.shape()[1];
        let mut data = vec![0.0; rows * outd];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != outd {
                return Err(Error::dim("affine", format!("bias {:?} for {outd} outputs", bv.shape())));
            }
            for r in 0..rows {
                data[r * outd..(r + 1) * outd].copy_from_slice(bv.data());
            }
        }
        gemm(
            MatRef::new(xv.data(), rows, inner),
            MatRef::new(wv.data(), inner, outd),
            &mut data,
            1.0,
        );
        let mut shape = leading_dims(xv.shape());
        if shape.is_empty() {
            shape.push(1);
        }
        shape.push(outd);
        let value = Tensor::new(shape, data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(value, &inputs, Op::Affine { x, w, b }))
    }

    /// Batched product `[G,M,K] · [G,K,N]`, or `[G,M,K] · [G,N,K]ᵀ` when
    /// `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::dim(
                "batch_matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (groups, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(Error::dim(
                "batch_matmul",
                format!("inner dims {k} vs {bk} (trans_b = {trans_b})"),
            ));
        }
        let mut data = vec![0.0; groups * m * n];
        for g in 0..groups {
            let am = MatRef::new(&av.data()[g * m * k..(g + 1) * m * k], m, k);
            let bm = if trans_b {
                MatRef::new(&bv.data()[g * n * k..(g + 1) * n * k], n, k).t()
            } else {
                MatRef::new(&bv.data()[g * k * n..(g + 1) * k * n], k, n)
            };
            gemm(am, bm, &mut data[g * m * n..(g + 1) * m * n], 0.0);
        }
        let value = Tensor::new(vec![groups, m, n], data)?;
        Ok(self.record(value, &[a, b], Op::BatchMatMul { a, b, groups, m, k, n, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::dim("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.record(value, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::dim("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.record(value, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        self.record(value, &[x], Op::Scale(x, c))
    }

    pub fn activation(&mut self, x: Var, f: Activation) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f.apply(v)).collect())
            .expect("same shape");
        self.record(value, &[x], Op::Unary(x, f))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Log)
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = rows_cols(xv);
        if cols == 0 {
            return Err(Error::contract("softmax", "empty axis"));
        }
        let mut data = xv.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.record(value, &[x], Op::Softmax(x)))
    }

    /// Normalizes each row of `x` over the last axis, then applies the
    /// per-channel `gamma` scale and `beta` shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = rows_cols(xv);
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::dim("layer_norm", format!("{cols} channels")));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = s;
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                normalized[r * cols + c] = h;
                data[r * cols + c] = gv[c] * h + bv[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.record(value, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, normalized, rstd }))
    }

    /// Concatenates along the last axis; all inputs must have equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_cols", "no inputs"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::dim("concat_cols", format!("{} rows vs {rows}", v.rows())));
            }
            widths.push(v.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = leading_dims(self.value(*first).shape());
        if shape.is_empty() {
            shape.push(1);
        }
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, parts, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks `[R_i, C]` inputs into `[ΣR_i, C]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_rows", "no inputs"))?;
        let cols = self.value(*first).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.last_dim() != cols {
                return Err(Error::dim("concat_rows", format!("{} cols vs {cols}", v.last_dim())));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols.max(1);
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.record(value, parts, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = rows_cols(xv);
        if start + len > cols {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {cols}")));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let mut shape = leading_dims(xv.shape());
        if shape.is_empty() {
            shape.push(1);
        }
        shape.push(len);
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, &[x], Op::SliceCols { x, start }))
    }

    /// Hard gather of rows of `x` viewed as `[rows, last_dim]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = rows_cols(xv);
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::Domain { what: "row index", detail: format!("{i} >= {rows}") });
            }
            data.extend_from_slice(&xv.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![index.len(), cols], data)?;
        Ok(self.record(value, &[x], Op::GatherRows { x, index: index.to_vec() }))
    }

    /// `[A,B,C,D] → [A,C,B,D]`.
    pub fn transpose12(&mut self, x: Var, dims: [usize; 4]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != dims.iter().product::<usize>() {
            return Err(Error::dim("transpose12", format!("{:?} as {dims:?}", xv.shape())));
        }
        let data = transpose12(xv.data(), dims);
        let [a, b, c, d] = dims;
        let value = Tensor::new(vec![a, c, b, d], data)?;
        Ok(self.record(value, &[x], Op::Transpose12 { x, dims }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.record(value, &[x], Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Composites `attr [R,N,C]` along each ray with densities `sigma [R,N]`
    /// and constant interval lengths `deltas [R,N]`, giving `[R,C]`.
    pub fn volume_render(&mut self, sigma: Var, attr: Var, deltas: &[f64]) -> Result<Var> {
        let (sv, av) = (self.value(sigma), self.value(attr));
        let (rays, samples) = rows_cols(sv);
        if samples == 0 || av.len() % (rays * samples).max(1) != 0 || deltas.len() != rays * samples {
            return Err(Error::dim(
                "volume_render",
                format!("sigma {:?}, attr {:?}, {} deltas", sv.shape(), av.shape(), deltas.len()),
            ));
        }
        let channels = av.len() / (rays * samples);
        if sv.data().iter().any(|&s| s < 0.0) || deltas.iter().any(|&d| d < 0.0) {
            return Err(Error::contract("volume_render", "negative density or interval"));
        }
        let mut data = vec![0.0; rays * channels];
        let mut w = vec![0.0; samples];
        for r in 0..rays {
            let span = r * samples..(r + 1) * samples;
            compositing::ray_weights(&sv.data()[span.clone()], &deltas[span], &mut w);
            let out = &mut data[r * channels..(r + 1) * channels];
            for (i, wi) in w.iter().enumerate() {
                let a = &av.data()[(r * samples + i) * channels..(r * samples + i + 1) * channels];
                for c in 0..channels {
                    out[c] += wi * a[c];
                }
            }
        }
        let value = Tensor::new(vec![rays, channels], data)?;
        Ok(self.record(
            value,
            &[sigma, attr],
            Op::VolumeRender { sigma, attr, deltas: deltas.to_vec(), rays, samples },
        ))
    }

    /// `-Σ_r Σ_l t_rl log softmax(logits)_rl`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = rows_cols(lv);
        if targets.len() != rows * cols {
            return Err(Error::dim("softmax_cross_entropy", format!("{} targets for {:?}", targets.len(), lv.shape())));
        }
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &lv.data()[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for c in 0..cols {
                let t = targets[r * cols + c];
                if t != 0.0 {
                    loss += t * (lse - row[c]);
                }
            }
        }
        Ok(self.record(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec() },
        ))
    }

    /// `Σ (pred - target)²`.
    pub fn sum_squared_error(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(Error::dim("sum_squared_error", format!("{} vs {}", pv.len(), target.len())));
        }
        let loss = pv.data().iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
        Ok(self.record(
            Tensor::scalar(loss),
            &[pred],
            Op::SumSquaredError { pred, target: target.to_vec() },
        ))
    }

    /// 3×3, stride 1, zero-padded convolution. `x` is `[N,H,W,Cin]`, `w` is
    /// `[9·Cin, Cout]` with rows ordered `(ky, kx, cin)`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::dim("conv2d", format!("input {:?} is not [N,H,W,C]", xv.shape())));
        }
        let s = xv.shape();
        let wv = self.value(w);
        let cout = wv.last_dim();
        let geom = ConvGeom { images: s[0], height: s[1], width: s[2], cin: s[3], cout };
        if wv.rank() != 2 || wv.shape()[0] != 9 * geom.cin || self.value(b).len() != cout {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {:?} for {} input channels", wv.shape(), geom.cin),
            ));
        }
        let cols = geom.im2col(xv.data());
        let p = geom.pixels();
        let mut data = vec![0.0; p * cout];
        for r in 0..p {
            data[r * cout..(r + 1) * cout].copy_from_slice(self.value(b).data());
        }
        gemm(
            MatRef::new(&cols, p, 9 * geom.cin),
            MatRef::new(self.value(w).data(), 9 * geom.cin, cout),
            &mut data,
            1.0,
        );
        let value = Tensor::new(vec![geom.images, geom.height, geom.width, cout], data)?;
        Ok(self.record(value, &[x, w, b], Op::Conv2d { x, w, b, geom }))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - m);
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + math::ln(row.iter().map(|&v| math::exp(v - m)).sum::<f64>())
}

fn transpose12(src: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                let s = ((ia * b + ib) * c + ic) * d;
                let t = ((ia * c + ic) * b + ib) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

/// Pushes `g = d(root)/d(out)` through `op` into the gradients of its inputs.
pub(super) fn backward(op: &Op, out: &Tensor, g: &[f64], nodes: &mut [Node]) {
    match op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let (x, w) = (*x, *w);
            let outd = out.last_dim();
            let rows = out.len() / outd;
            let inner = nodes[w.0].value.shape()[0];
            let gm = MatRef::new(g, rows, outd);
            with_grad(nodes, w, |n, dw| {
                gemm(MatRef::new(n[x.0].value.data(), rows, inner).t(), gm, dw, 1.0);
            });
            with_grad(nodes, x, |n, dx| {
                gemm(gm, MatRef::new(n[w.0].value.data(), inner, outd).t(), dx, 1.0);
            });
            if let Some(b) = *b {
                with_grad(nodes, b, |_, db| {
                    for r in 0..rows {
                        for c in 0..outd {
                            db[c] += g[r * outd + c];
                        }
                    }
                });
            }
        }
        &Op::BatchMatMul { a, b, groups, m, k, n, trans_b } => {
            with_grad(nodes, a, |nd, da| {
                let bv = nd[b.0].value.data();
                for gi in 0..groups {
                    let gm = MatRef::new(&g[gi * m * n..(gi + 1) * m * n], m, n);
                    // dA = G · Bᵀ  (B is [k,n]) or G · B (B stored [n,k])
                    let bm = if trans_b {
                        MatRef::new(&bv[gi * n * k..(gi + 1) * n * k], n, k)
                    } else {
                        MatRef::new(&bv[gi * k * n..(gi + 1) * k * n], k, n).t()
                    };
                    gemm(gm, bm, &mut da[gi * m * k..(gi + 1) * m * k], 1.0);
                }
            });
            with_grad(nodes, b, |nd, db| {
                let av = nd[a.0].value.data();
                for gi in 0..groups {
                    let am = MatRef::new(&av[gi * m * k..(gi + 1) * m * k], m, k);
                    let gm = MatRef::new(&g[gi * m * n..(gi + 1) * m * n], m, n);
                    if trans_b {
                        // dB[n,k] = Gᵀ · A
                        gemm(gm.t(), am, &mut db[gi * n * k..(gi + 1) * n * k], 1.0);
                    } else {
                        gemm(am.t(), gm, &mut db[gi * k * n..(gi + 1) * k * n], 1.0);
                    }
                }
            });
        }
        &Op::Add(a, b) => {
            for v in [a, b] {
                with_grad(nodes, v, |_, d| {
                    for (d, g) in d.iter_mut().zip(g) {
                        *d += g;
                    }
                });
            }
        }
        &Op::Mul(a, b) => {
            with_grad(nodes, a, |n, d| {
                for ((d, g), o) in d.iter_mut().zip(g).zip(n[b.0].value.data()) {
                    *d += g * o;
                }
            });
            with_grad(nodes, b, |n, d| {
                for ((d, g), o) in d.iter_mut().zip(g).zip(n[a.0].value.data()) {
                    *d += g * o;
                }
            });
        }
        &Op::Scale(x, c) => with_grad(nodes, x, |_, d| {
            for (d, g) in d.iter_mut().zip(g) {
                *d += c * g;
            }
        }),
        &Op::Unary(x, f) => with_grad(nodes, x, |n, d| {
            let xv = n[x.0].value.data();
            for i in 0..d.len() {
                d[i] += g[i] * f.derivative(xv[i], out.data()[i]);
            }
        }),
        &Op::Softmax(x) => with_grad(nodes, x, |_, d| {
            let (rows, cols) = rows_cols(out);
            let y = out.data();
            for r in 0..rows {
                let s = r * cols..(r + 1) * cols;
                let dot: f64 = y[s.clone()].iter().zip(&g[s.clone()]).map(|(a, b)| a * b).sum();
                for i in s {
                    d[i] += y[i] * (g[i] - dot);
                }
            }
        }),
        Op::LayerNorm { x, gamma, beta, normalized, rstd } => {
            let (rows, cols) = rows_cols(out);
            with_grad(nodes, *gamma, |_, d| {
                for r in 0..rows {
                    for c in 0..cols {
                        d[c] += g[r * cols + c] * normalized[r * cols + c];
                    }
                }
            });
            with_grad(nodes, *beta, |_, d| {
                for r in 0..rows {
                    for c in 0..cols {
                        d[c] += g[r * cols + c];
                    }
                }
            });
            let gamma = *gamma;
            with_grad(nodes, *x, |n, d| {
                let gv = n[gamma.0].value.data();
                let mut dh = vec![0.0; cols];
                for r in 0..rows {
                    let h = &normalized[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dh[c] = g[r * cols + c] * gv[c];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                    let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        d[r * cols + c] += rstd[r] * (dh[c] - mean_dh - h[c] * mean_dh_h);
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = out.last_dim();
            let rows = out.len() / total.max(1);
            let mut off = 0;
            for &p in parts {
                let w = nodes[p.0].value.last_dim();
                with_grad(nodes, p, |_, d| {
                    for r in 0..rows {
                        for c in 0..w {
                            d[r * w + c] += g[r * total + off + c];
                        }
                    }
                });
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                with_grad(nodes, p, |_, d| {
                    for i in 0..len {
                        d[i] += g[off + i];
                    }
                });
                off += len;
            }
        }
        &Op::SliceCols { x, start } => {
            let len = out.last_dim();
            let cols = nodes[x.0].value.last_dim();
            let rows = out.len() / len.max(1);
            with_grad(nodes, x, |_, d| {
                for r in 0..rows {
                    for c in 0..len {
                        d[r * cols + start + c] += g[r * len + c];
                    }
                }
            });
        }
        Op::GatherRows { x, index } => {
            let cols = out.last_dim();
            with_grad(nodes, *x, |_, d| {
                for (k, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        d[i * cols + c] += g[k * cols + c];
                    }
                }
            });
        }
        &Op::Transpose12 { x, dims: [a, b, c, dd] } => with_grad(nodes, x, |_, d| {
            // gradient of [A,B,C,D]→[A,C,B,D] is the reverse transpose.
            let back = transpose12(g, [a, c, b, dd]);
            for (d, v) in d.iter_mut().zip(back) {
                *d += v;
            }
        }),
        &Op::Reshape(x) => with_grad(nodes, x, |_, d| {
            for (d, g) in d.iter_mut().zip(g) {
                *d += g;
            }
        }),
        &Op::Sum(x) => with_grad(nodes, x, |_, d| {
            for v in d.iter_mut() {
                *v += g[0];
            }
        }),
        Op::VolumeRender { sigma, attr, deltas, rays, samples } => {
            let (rays, samples) = (*rays, *samples);
            let channels = out.last_dim();
            let (sigma, attr) = (*sigma, *attr);
            let mut weights = vec![0.0; rays * samples];
            for r in 0..rays {
                let span = r * samples..(r + 1) * samples;
                compositing::ray_weights(&nodes[sigma.0].value.data()[span.clone()], &deltas[span.clone()], &mut weights[span]);
            }
            with_grad(nodes, attr, |_, d| {
                for r in 0..rays {
                    for i in 0..samples {
                        let w = weights[r * samples + i];
                        for c in 0..channels {
                            d[(r * samples + i) * channels + c] += w * g[r * channels + c];
                        }
                    }
                }
            });
            with_grad(nodes, sigma, |n, d| {
                let sv = n[sigma.0].value.data();
                let av = n[attr.0].value.data();
                let mut e = vec![0.0; samples];
                let mut t_next = vec![0.0; samples];
                for r in 0..rays {
                    for i in 0..samples {
                        let a = &av[(r * samples + i) * channels..(r * samples + i + 1) * channels];
                        e[i] = a.iter().zip(&g[r * channels..(r + 1) * channels]).map(|(a, g)| a * g).sum();
                    }
                    // d/da_k = T_{k+1} e_k - Σ_{i>k} w_i e_i
                    let mut depth = 0.0;
                    for k in 0..samples {
                        let idx = r * samples + k;
                        depth += deltas[idx] * sv[idx];
                        t_next[k] = math::exp(-depth);
                    }
                    let mut tail = 0.0;
                    for k in (0..samples).rev() {
                        let idx = r * samples + k;
                        d[idx] += deltas[idx] * (t_next[k] * e[k] - tail);
                        tail += weights[idx] * e[k];
                    }
                }
            });
        }
        Op::SoftmaxCrossEntropy { logits, targets } => with_grad(nodes, *logits, |n, d| {
            let lv = &n[logits.0].value;
            let (rows, cols) = rows_cols(lv);
            let mut p = vec![0.0; cols];
            for r in 0..rows {
                p.copy_from_slice(&lv.data()[r * cols..(r + 1) * cols]);
                softmax_in_place(&mut p);
                let t = &targets[r * cols..(r + 1) * cols];
                let mass: f64 = t.iter().sum();
                for c in 0..cols {
                    d[r * cols + c] += g[0] * (p[c] * mass - t[c]);
                }
            }
        }),
        Op::SumSquaredError { pred, target } => with_grad(nodes, *pred, |n, d| {
            let pv = n[pred.0].value.data();
            for i in 0..d.len() {
                d[i] += g[0] * 2.0 * (pv[i] - target[i]);
            }
        }),
        &Op::Conv2d { x, w, b, geom } => {
            let p = geom.pixels();
            let k = 9 * geom.cin;
            let gm = MatRef::new(g, p, geom.cout);
            with_grad(nodes, b, |_, db| {
                for r in 0..p {
                    for c in 0..geom.cout {
                        db[c] += g[r * geom.cout + c];
                    }
                }
            });
            let needs_w = nodes[w.0].requires_grad;
            let needs_x = nodes[x.0].requires_grad;
            if needs_w {
                let cols = geom.im2col(nodes[x.0].value.data());
                with_grad(nodes, w, |_, dw| gemm(MatRef::new(&cols, p, k).t(), gm, dw, 1.0));
            }
            if needs_x {
                let mut dcols = vec![0.0; p * k];
                gemm(gm, MatRef::new(nodes[w.0].value.data(), k, geom.cout).t(), &mut dcols, 0.0);
                with_grad(nodes, x, |_, dx| geom.col2im_add(&dcols, dx));
            }
        }
    }
}
