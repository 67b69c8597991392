//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every variable that requires one.
//! Nodes whose inputs carry no gradient requirement are never differentiated,
//! so frozen networks cost a forward pass only.

use crate::error::Result;
use crate::mixup::mix_rows;
use crate::similarity::{profile_kl_with_grad, ProbVector};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        pad: usize,
        // im2col buffers, kept only when the weight needs a gradient
        cols: Option<Vec<f64>>,
    },
    Upsample2(Var),
    AvgPool2(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Softplus(Var),
    Scale(Var, f64),
    Add(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    MixRows(Var, Vec<f64>),
    ProfileKl {
        x: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// `x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear {xs:?} x {ws:?}");
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; n * out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), out);
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            n,
            inp,
            out,
            self.value(x).data(),
            (inp as isize, 1),
            self.value(w).data(),
            (1, inp as isize),
            &mut y,
            (out as isize, 1),
            b.is_some(),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(vec![n, out], y), Op::Linear { x, w, b }, rg)
    }

    /// Stride-1 "same" convolution, `x: [n, c, h, w]`, `w: [o, c, k, k]`, odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d {xs:?} * {ws:?}");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        assert!(ws[1] == c && ws[3] == k && k % 2 == 1, "conv2d {xs:?} * {ws:?}");
        let pad = k / 2;
        let (kk, p) = (c * k * k, h * wd);
        let keep_cols = self.rg(w) && k > 1;
        let mut cols_all = if keep_cols { Vec::with_capacity(n * kk * p) } else { Vec::new() };
        let mut scratch = vec![0.0; if k > 1 { kk * p } else { 0 }];
        let mut out = vec![0.0; n * o * p];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            for i in 0..n {
                let img = &xd[i * c * p..(i + 1) * c * p];
                let dst = &mut out[i * o * p..(i + 1) * o * p];
                if let Some(b) = b {
                    for (oc, bv) in self.value(b).data().iter().enumerate() {
                        dst[oc * p..(oc + 1) * p].fill(*bv);
                    }
                }
                let cols: &[f64] = if k == 1 {
                    img
                } else {
                    im2col(img, c, h, wd, k, pad, &mut scratch);
                    if keep_cols {
                        cols_all.extend_from_slice(&scratch);
                    }
                    &scratch
                };
                gemm(o, kk, p, wdat, (kk as isize, 1), cols, (p as isize, 1), dst, (p as isize, 1), b.is_some());
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let cols = keep_cols.then_some(cols_all);
        self.push(
            Tensor::new(vec![n, o, h, wd], out),
            Op::Conv2d { x, w, b, k, pad, cols },
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; nc * 4 * h * w];
        for plane in 0..nc {
            let sp = &src[plane * h * w..(plane + 1) * h * w];
            let dp = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                let srow = &sp[(y / 2) * w..(y / 2 + 1) * w];
                let drow = &mut dp[y * 2 * w..(y + 1) * 2 * w];
                for (xo, v) in drow.iter_mut().enumerate() {
                    *v = srow[xo / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out), Op::Upsample2(x), rg)
    }

    /// 2x2 average pooling of `[n, c, h, w]` with even `h`, `w`.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let out = avg_pool2_data(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out), Op::AvgPool2(x), rg)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus(x), softplus)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Rows `idx` of `x` along its leading axis, in the given order.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x);
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * t.row_len());
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data), Op::SelectRows(x, idx.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let inner = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &inner[..], "concat_rows shape mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(inner);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// `sum_i weights[i] * x[i]` as a single leading-axis row.
    pub fn mix_rows(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let rows: Vec<&[f64]> = (0..t.rows()).map(|i| t.row(i)).collect();
        let mixed = mix_rows(&rows, weights)?;
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, mixed), Op::MixRows(x, weights.to_vec()), rg))
    }

    /// `KL(similarity_profile(x[anchor], x[batch]) || target)` over flattened
    /// leading-axis rows of `x`.
    pub fn profile_kl(
        &mut self,
        x: Var,
        anchor: usize,
        batch: &[usize],
        target: &ProbVector,
    ) -> Result<Var> {
        let t = self.value(x);
        let rows: Vec<&[f64]> = batch.iter().map(|&i| t.row(i)).collect();
        let res = profile_kl_with_grad(t.row(anchor), &rows, target)?;
        let rg = self.rg(x);
        let grad = if rg {
            let w = t.row_len();
            let mut g = vec![0.0; t.len()];
            add_into(&mut g[anchor * w..(anchor + 1) * w], &res.grad_anchor);
            for (&i, gb) in batch.iter().zip(&res.grad_batch) {
                add_into(&mut g[i * w..(i + 1) * w], gb);
            }
            g
        } else {
            Vec::new()
        };
        Ok(self.push(Tensor::scalar(res.loss), Op::ProfileKl { x, grad }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients(grads);
        }
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Gradients(grads)
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.rg(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape().to_vec()));
        }
        slot.as_mut().map(Tensor::data_mut)
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, inp) = (xs[0], xs[1]);
                let out = self.value(*w).shape()[0];
                if let Some(dx) = self.buf(grads, *x) {
                    gemm(n, out, inp, gd, (out as isize, 1), self.value(*w).data(), (inp as isize, 1), dx, (inp as isize, 1), true);
                }
                if let Some(dw) = self.buf(grads, *w) {
                    gemm(out, n, inp, gd, (1, out as isize), self.value(*x).data(), (inp as isize, 1), dw, (inp as isize, 1), true);
                }
                if let Some(b) = b {
                    if let Some(db) = self.buf(grads, *b) {
                        for row in gd.chunks(out) {
                            add_into(db, row);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, k, pad, cols } => {
                let xs = self.value(*x).shape();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let o = self.value(*w).shape()[0];
                let (k, pad) = (*k, *pad);
                let (kk, p) = (c * k * k, h * wd);
                if let Some(b) = b {
                    if let Some(db) = self.buf(grads, *b) {
                        for i in 0..n {
                            for (oc, d) in db.iter_mut().enumerate() {
                                let s = (i * o + oc) * p;
                                *d += gd[s..s + p].iter().sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(dw) = self.buf(grads, *w) {
                    for i in 0..n {
                        let dout = &gd[i * o * p..(i + 1) * o * p];
                        let col: &[f64] = if k == 1 {
                            &self.value(*x).data()[i * c * p..(i + 1) * c * p]
                        } else {
                            &cols.as_ref().expect("conv cols kept for weight grad")[i * kk * p..(i + 1) * kk * p]
                        };
                        gemm(o, p, kk, dout, (p as isize, 1), col, (1, p as isize), dw, (kk as isize, 1), true);
                    }
                }
                if let Some(dx) = self.buf(grads, *x) {
                    let wdat = self.value(*w).data();
                    let mut dcols = vec![0.0; if k > 1 { kk * p } else { 0 }];
                    for i in 0..n {
                        let dout = &gd[i * o * p..(i + 1) * o * p];
                        let dimg = &mut dx[i * c * p..(i + 1) * c * p];
                        if k == 1 {
                            gemm(kk, o, p, wdat, (1, kk as isize), dout, (p as isize, 1), dimg, (p as isize, 1), true);
                        } else {
                            gemm(kk, o, p, wdat, (1, kk as isize), dout, (p as isize, 1), &mut dcols, (p as isize, 1), false);
                            col2im_add(&dcols, c, h, wd, k, pad, dimg);
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                let s = self.value(*x).shape().to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(dx) = self.buf(grads, *x) {
                    for plane in 0..nc {
                        let gp = &gd[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for y in 0..2 * h {
                            for xo in 0..2 * w {
                                dp[(y / 2) * w + xo / 2] += gp[y * 2 * w + xo];
                            }
                        }
                    }
                }
            }
            Op::AvgPool2(x) => {
                let s = self.value(*x).shape().to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                if let Some(dx) = self.buf(grads, *x) {
                    for plane in 0..nc {
                        let gp = &gd[plane * oh * ow..(plane + 1) * oh * ow];
                        let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for y in 0..h {
                            for xi in 0..w {
                                dp[y * w + xi] += 0.25 * gp[(y / 2) * ow + xi / 2];
                            }
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.buf(grads, *x) {
                    for ((d, gi), xi) in dx.iter_mut().zip(gd).zip(xv) {
                        *d += if *xi > 0.0 { *gi } else { slope * gi };
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(dx) = self.buf(grads, *x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(gd).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.buf(grads, *x) {
                    for ((d, gi), xi) in dx.iter_mut().zip(gd).zip(xv) {
                        *d += gi * sigmoid(*xi);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.buf(grads, *x) {
                    for (d, gi) in dx.iter_mut().zip(gd) {
                        *d += s * gi;
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.buf(grads, *a) {
                    add_into(da, gd);
                }
                if let Some(db) = self.buf(grads, *b) {
                    add_into(db, gd);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gd[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(dx) = self.buf(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gd[0] / n);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.buf(grads, *x) {
                    add_into(dx, gd);
                }
            }
            Op::SelectRows(x, idx) => {
                let w = self.value(*x).row_len();
                if let Some(dx) = self.buf(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * w..(i + 1) * w], &gd[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.buf(grads, p) {
                        add_into(dp, &gd[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::MixRows(x, weights) => {
                let w = self.value(*x).row_len();
                if let Some(dx) = self.buf(grads, *x) {
                    for (i, c) in weights.iter().enumerate() {
                        for (d, gi) in dx[i * w..(i + 1) * w].iter_mut().zip(gd) {
                            *d += c * gi;
                        }
                    }
                }
            }
            Op::ProfileKl { x, grad } => {
                if let Some(dx) = self.buf(grads, *x) {
                    for (d, gi) in dx.iter_mut().zip(grad) {
                        *d += gd[0] * gi;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn avg_pool2_data(src: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for plane in 0..planes {
        let sp = &src[plane * h * w..(plane + 1) * h * w];
        let dp = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                dp[y * ow + x] = 0.25 * (sp[i] + sp[i + 1] + sp[i + w] + sp[i + w + 1]);
            }
        }
    }
    out
}

/// Row `(ci*k + ky)*k + kx` of `cols` holds input channel `ci` shifted by
/// `(ky - pad, kx - pad)`, zero outside the image.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f64]) {
    let p = h * w;
    for ci in 0..c {
        let plane = &img[ci * p..(ci + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                let (x0, x1) = valid_range(w, kx, pad);
                for oy in 0..h {
                    let dst = &mut row[oy * w..(oy + 1) * w];
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[(iy - pad) * w..(iy - pad + 1) * w];
                    dst[..x0].fill(0.0);
                    dst[x1..].fill(0.0);
                    dst[x0..x1].copy_from_slice(&src[x0 + kx - pad..x1 + kx - pad]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, img: &mut [f64]) {
    let p = h * w;
    for ci in 0..c {
        let plane = &mut img[ci * p..(ci + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                let (x0, x1) = valid_range(w, kx, pad);
                for oy in 0..h {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy - pad) * w..(iy - pad + 1) * w];
                    add_into(&mut dst[x0 + kx - pad..x1 + kx - pad], &row[oy * w + x0..oy * w + x1]);
                }
            }
        }
    }
}

/// Output columns `[x0, x1)` whose input column `ox + kx - pad` is in bounds.
fn valid_range(w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let x0 = pad.saturating_sub(kx).min(w);
    let x1 = (w + pad).saturating_sub(kx).min(w).max(x0);
    (x0, x1)
}
