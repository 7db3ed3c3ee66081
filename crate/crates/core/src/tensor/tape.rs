use std::sync::Arc;

use super::conv::{self, ConvGeom, Padding, TconvGeom};
use super::gemm::{rows_dot_matrix_rows, rows_times_matrix};
use super::pool::maxpool2x2_forward;
use super::{ensure_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    Tconv { input: Var, kernel: Var, bias: Option<Var>, geom: TconvGeom },
    MaxPool { input: Var, argmax: Vec<usize> },
    Tanh { input: Var },
    Softmax { input: Var, outer: usize, classes: usize, inner: usize },
    CenterCrop { input: Var, top: usize, left: usize },
    AddBiasMap { input: Var, bias: Var },
    Reshape { input: Var },
    NegLogFloor { input: Var, floor: f64 },
    ExpNeg { input: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    AddConst { input: Var },
    Sum { input: Var },
    SumSquares { input: Var },
    Dot { input: Var, weights: Arc<Tensor> },
    WeightedSum { inputs: Vec<Var>, weights: Var },
    RowMatmul { input: Var, matrix: Arc<Tensor> },
    Separable { input: Var, gy: Arc<Tensor>, gx: Arc<Tensor> },
    LabelMix { input: Var, mix: Vec<f64> },
    Nll { probs: Var, labels: Arc<[u8]>, floor: f64, outer: usize, classes: usize, inner: usize },
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run record of tensor operations.
///
/// Every operator evaluates eagerly, checks its output for non-finite values
/// and appends a node. [`Tape::backward`] walks the nodes in exact reverse
/// recording order, so repeated uses of a leaf accumulate deterministically.
/// A tape can run backward once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Records a leaf without copying its buffer.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.value(v).shape(), g.clone()).ok()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let shape = self.value(v).shape().to_vec();
        let g = self.grads.get_mut(v.0)?.take()?;
        Tensor::new(&shape, g).ok()
    }

    fn push(&mut self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, parents: &[Var], op: Op, name: &'static str) -> Result<Var> {
        ensure_finite(value.data(), name)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(Arc::new(value), requires_grad, op))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let (x, k) = (self.value(input), self.value(kernel));
        let b = bias.map(|b| self.value(b));
        let geom = ConvGeom::new(x, k, b, padding)?;
        let (out, cols) = conv::conv2d_with_cols(&geom, x, k, b)?;
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        self.record(out, &parents, Op::Conv2d { input, kernel, bias, geom, cols }, "conv2d")
    }

    pub fn transposed_conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (x, k) = (self.value(input), self.value(kernel));
        let b = bias.map(|b| self.value(b));
        let geom = TconvGeom::new(x, k, b, stride)?;
        let out = conv::tconv_forward(&geom, x, k, b)?;
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        self.record(out, &parents, Op::Tconv { input, kernel, bias, geom }, "transposed_conv2d")
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = maxpool2x2_forward(self.value(input))?;
        self.record(out, &[input], Op::MaxPool { input, argmax }, "maxpool2x2")
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v.tanh()).collect())?;
        self.record(out, &[input], Op::Tanh { input }, "tanh")
    }

    /// Softmax over axis 1 of a `[B, C, ...]` tensor, max-subtracted.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape();
        if shape.len() < 2 || shape[1] < 2 {
            return Err(Error::shape(format!("softmax_channels needs [B, C>=2, ...], got {shape:?}")));
        }
        let (outer, classes) = (shape[0], shape[1]);
        let inner = x.len() / (outer * classes);
        let mut out = vec![0.0; x.len()];
        let xd = x.data();
        for o in 0..outer {
            let base = o * classes * inner;
            for i in 0..inner {
                let idx = |c: usize| base + c * inner + i;
                let max = (0..classes).map(|c| xd[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..classes {
                    let e = (xd[idx(c)] - max).exp();
                    out[idx(c)] = e;
                    z += e;
                }
                for c in 0..classes {
                    out[idx(c)] /= z;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.record(out, &[input], Op::Softmax { input, outer, classes, inner }, "softmax_channels")
    }

    /// Crops a `[B, C, H, W]` tensor to `height x width`, offset `floor((H - height) / 2)`.
    pub fn center_crop(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        let x = self.value(input);
        let [b, c, h, w] = x.dims4("center_crop input")?;
        if height > h || width > w {
            return Err(Error::shape(format!("cannot crop {h}x{w} to {height}x{width}")));
        }
        let (top, left) = ((h - height) / 2, (w - width) / 2);
        let mut out = Vec::with_capacity(b * c * height * width);
        for plane in x.data().chunks(h * w) {
            for y in top..top + height {
                out.extend_from_slice(&plane[y * w + left..y * w + left + width]);
            }
        }
        let out = Tensor::new(&[b, c, height, width], out)?;
        self.record(out, &[input], Op::CenterCrop { input, top, left }, "center_crop")
    }

    /// Adds a `[C, H, W]` map to every batch item of a `[B, C, H, W]` tensor.
    pub fn add_bias_map(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (x, bm) = (self.value(input), self.value(bias));
        let [_, c, h, w] = x.dims4("add_bias_map input")?;
        if bm.shape() != [c, h, w] {
            return Err(Error::shape(format!("bias map {:?} does not match [{c}, {h}, {w}]", bm.shape())));
        }
        let data = x.data().chunks(bm.len()).flat_map(|item| item.iter().zip(bm.data()).map(|(a, b)| a + b)).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.record(out, &[input, bias], Op::AddBiasMap { input, bias }, "add_bias_map")
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.nodes[input.0].value).clone().reshape(shape)?;
        self.record(out, &[input], Op::Reshape { input }, "reshape")
    }

    /// `-ln(max(x, floor))` elementwise.
    pub fn neg_log_floor(&mut self, input: Var, floor: f64) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| -v.max(floor).ln()).collect())?;
        self.record(out, &[input], Op::NegLogFloor { input, floor }, "neg_log_floor")
    }

    /// `exp(-x)` elementwise.
    pub fn exp_neg(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| (-v).exp()).collect())?;
        self.record(out, &[input], Op::ExpNeg { input }, "exp_neg")
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!("{what}: {:?} vs {:?}", x.shape(), y.shape())));
        }
        Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |p, q| p + q)?;
        self.record(out, &[a, b], Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |p, q| p - q)?;
        self.record(out, &[a, b], Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |p, q| p * q)?;
        self.record(out, &[a, b], Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v * factor).collect())?;
        self.record(out, &[input], Op::Scale { input, factor }, "scale")
    }

    /// Adds a constant tensor; no gradient flows into `offset`.
    pub fn add_const(&mut self, input: Var, offset: &Tensor) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != offset.shape() {
            return Err(Error::shape(format!("add_const: {:?} vs {:?}", x.shape(), offset.shape())));
        }
        let out = Tensor::new(x.shape(), x.data().iter().zip(offset.data()).map(|(a, b)| a + b).collect())?;
        self.record(out, &[input], Op::AddConst { input }, "add_const")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        self.record(Tensor::scalar(s), &[input], Op::Sum { input }, "sum")
    }

    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().map(|v| v * v).sum();
        self.record(Tensor::scalar(s), &[input], Op::SumSquares { input }, "sum_squares")
    }

    /// `sum(weights * x)` against a constant weight tensor.
    pub fn dot_const(&mut self, input: Var, weights: Arc<Tensor>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(Error::shape(format!("dot_const: {:?} vs {:?}", x.shape(), weights.shape())));
        }
        let s = x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.record(Tensor::scalar(s), &[input], Op::Dot { input, weights }, "dot_const")
    }

    /// `sum_k weights[k] * inputs[k]` with a trainable weight vector.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        let w = self.value(weights);
        if inputs.is_empty() || w.len() != inputs.len() {
            return Err(Error::LengthMismatch(format!("{} inputs but {} weights", inputs.len(), w.len())));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut out = vec![0.0; self.value(inputs[0]).len()];
        for (k, &v) in inputs.iter().enumerate() {
            let x = self.value(v);
            if x.shape() != shape {
                return Err(Error::shape(format!("weighted_sum: {:?} vs {shape:?}", x.shape())));
            }
            let wk = w.data()[k];
            for (o, xv) in out.iter_mut().zip(x.data()) {
                *o += wk * xv;
            }
        }
        let out = Tensor::new(&shape, out)?;
        let mut parents = inputs.to_vec();
        parents.push(weights);
        self.record(out, &parents, Op::WeightedSum { inputs: inputs.to_vec(), weights }, "weighted_sum")
    }

    /// `out[r] = matrix * input[r]` for each row of an `[R, N]` input and a
    /// constant `[P, N]` matrix, giving `[R, P]`.
    pub fn row_matmul_const(&mut self, input: Var, matrix: Arc<Tensor>) -> Result<Var> {
        let x = self.value(input);
        let (rows, n, p) = match (x.shape(), matrix.shape()) {
            ([r, n], [p, m]) if n == m => (*r, *n, *p),
            (xs, ms) => return Err(Error::shape(format!("row_matmul_const: {xs:?} x {ms:?}"))),
        };
        let mut out = vec![0.0; rows * p];
        rows_dot_matrix_rows(x.data(), rows, matrix.data(), n, &mut out);
        let out = Tensor::new(&[rows, p], out)?;
        self.record(out, &[input], Op::RowMatmul { input, matrix }, "row_matmul_const")
    }

    /// Product of each row of an `[R, H*W]` input with the off-diagonal part
    /// of `gy (x) gx`: every `H x W` row plane `X` maps to
    /// `gy X gx^T - diag(gy) diag(gx)^T * X`. Equivalent to
    /// [`Tape::row_matmul_const`] with the dense Kronecker product and its
    /// diagonal zeroed, in `O(N (H + W))` instead of `O(N^2)`.
    pub fn separable_offdiag_matmul(&mut self, input: Var, gy: Arc<Tensor>, gx: Arc<Tensor>) -> Result<Var> {
        let x = self.value(input);
        let (h, w) = match (gy.shape(), gx.shape()) {
            ([h, h2], [w, w2]) if h == h2 && w == w2 => (*h, *w),
            (a, b) => return Err(Error::shape(format!("separable factors must be square, got {a:?} and {b:?}"))),
        };
        let rows = match x.shape() {
            [r, n] if *n == h * w => *r,
            s => return Err(Error::shape(format!("separable_offdiag_matmul: {s:?} with a {h}x{w} grid"))),
        };
        let mut out = vec![0.0; rows * h * w];
        for (src, dst) in x.data().chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
            separable_plane(src, gy.data(), gx.data(), h, w, false, dst);
        }
        let out = Tensor::new(&[rows, h * w], out)?;
        self.record(out, &[input], Op::Separable { input, gy, gx }, "separable_offdiag_matmul")
    }

    /// `out[l] = sum_l' mix[l][l'] * input[l']` over the rows of an `[L, N]` field.
    pub fn label_mix(&mut self, input: Var, mix: &[f64]) -> Result<Var> {
        let x = self.value(input);
        let (l, n) = match x.shape() {
            [l, n] if mix.len() == l * l => (*l, *n),
            s => return Err(Error::shape(format!("label_mix: field {s:?} with {} mixing entries", mix.len()))),
        };
        let mut out = vec![0.0; l * n];
        for a in 0..l {
            for b in 0..l {
                let m = mix[a * l + b];
                if m != 0.0 {
                    for (o, v) in out[a * n..(a + 1) * n].iter_mut().zip(&x.data()[b * n..(b + 1) * n]) {
                        *o += m * v;
                    }
                }
            }
        }
        let out = Tensor::new(&[l, n], out)?;
        self.record(out, &[input], Op::LabelMix { input, mix: mix.to_vec() }, "label_mix")
    }

    /// Mean of `-ln(max(p[b, label, i], floor))` over all batch items and
    /// positions of a `[B, C, ...]` probability tensor.
    pub fn nll(&mut self, probs: Var, labels: Arc<[u8]>, floor: f64) -> Result<Var> {
        let p = self.value(probs);
        let shape = p.shape();
        if shape.len() < 2 {
            return Err(Error::shape(format!("nll needs [B, C, ...], got {shape:?}")));
        }
        let (outer, classes) = (shape[0], shape[1]);
        let inner = p.len() / (outer * classes);
        if labels.len() != outer * inner {
            return Err(Error::shape(format!("nll: {} labels for {} positions", labels.len(), outer * inner)));
        }
        let mut total = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                let y = labels[o * inner + i] as usize;
                if y >= classes {
                    return Err(Error::BadParam(format!("label {y} out of range for {classes} classes")));
                }
                total -= p.data()[(o * classes + y) * inner + i].max(floor).ln();
            }
        }
        let loss = total / (outer * inner) as f64;
        let op = Op::Nll { probs, labels, floor, outer, classes, inner };
        self.record(Tensor::scalar(loss), &[probs], op, "nll")
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of leaves that
    /// require them are available through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(shape));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.backprop_node(idx, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom, cols } => {
                let need = [self.wants(*input), self.wants(*kernel), bias.is_some_and(|b| self.wants(b))];
                let grads = conv::conv2d_backward(geom, cols, self.value(*kernel).data(), g, need);
                out.extend(grads.input.map(|d| (*input, d)));
                out.extend(grads.kernel.map(|d| (*kernel, d)));
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    out.push((*b, d));
                }
            }
            Op::Tconv { input, kernel, bias, geom } => {
                let need = [self.wants(*input), self.wants(*kernel), bias.is_some_and(|b| self.wants(b))];
                let grads = conv::tconv_backward(geom, self.value(*input).data(), self.value(*kernel).data(), g, need);
                out.extend(grads.input.map(|d| (*input, d)));
                out.extend(grads.kernel.map(|d| (*kernel, d)));
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    out.push((*b, d));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (&src, gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                out.push((*input, d));
            }
            Op::Tanh { input } => {
                out.push((*input, g.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t)).collect()));
            }
            Op::Softmax { input, outer, classes, inner } => {
                let mut d = vec![0.0; y.len()];
                for o in 0..*outer {
                    let base = o * classes * inner;
                    for i in 0..*inner {
                        let idx = |c: usize| base + c * inner + i;
                        let dot: f64 = (0..*classes).map(|c| g[idx(c)] * y[idx(c)]).sum();
                        for c in 0..*classes {
                            d[idx(c)] = y[idx(c)] * (g[idx(c)] - dot);
                        }
                    }
                }
                out.push((*input, d));
            }
            Op::CenterCrop { input, top, left } => {
                let x = self.value(*input);
                let [_, _, h, w] = x.dims4("crop").expect("4-d");
                let [_, _, ch, cw] = node.value.dims4("crop").expect("4-d");
                let mut d = vec![0.0; x.len()];
                for (plane, gp) in d.chunks_mut(h * w).zip(g.chunks(ch * cw)) {
                    for r in 0..ch {
                        let dst = (top + r) * w + left;
                        plane[dst..dst + cw].copy_from_slice(&gp[r * cw..(r + 1) * cw]);
                    }
                }
                out.push((*input, d));
            }
            Op::AddBiasMap { input, bias } => {
                if self.wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for item in g.chunks(n) {
                        for (a, b) in db.iter_mut().zip(item) {
                            *a += b;
                        }
                    }
                    out.push((*bias, db));
                }
                out.push((*input, g.to_vec()));
            }
            Op::Reshape { input } => out.push((*input, g.to_vec())),
            Op::NegLogFloor { input, floor } => {
                let x = self.value(*input).data();
                let d = g.iter().zip(x).map(|(gv, &xv)| if xv > *floor { -gv / xv } else { 0.0 }).collect();
                out.push((*input, d));
            }
            Op::ExpNeg { input } => out.push((*input, g.iter().zip(y).map(|(gv, e)| -gv * e).collect())),
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul { a, b } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(xb).map(|(gv, v)| gv * v).collect()));
                out.push((*b, g.iter().zip(xa).map(|(gv, v)| gv * v).collect()));
            }
            Op::Scale { input, factor } => out.push((*input, g.iter().map(|v| v * factor).collect())),
            Op::AddConst { input } => out.push((*input, g.to_vec())),
            Op::Sum { input } => out.push((*input, vec![g[0]; self.value(*input).len()])),
            Op::SumSquares { input } => {
                out.push((*input, self.value(*input).data().iter().map(|v| 2.0 * g[0] * v).collect()))
            }
            Op::Dot { input, weights } => out.push((*input, weights.data().iter().map(|c| g[0] * c).collect())),
            Op::WeightedSum { inputs, weights } => {
                let w = self.value(*weights).data();
                if self.wants(*weights) {
                    let dw = inputs
                        .iter()
                        .map(|&v| self.value(v).data().iter().zip(g).map(|(x, gv)| x * gv).sum())
                        .collect();
                    out.push((*weights, dw));
                }
                for (k, &v) in inputs.iter().enumerate() {
                    if self.wants(v) {
                        out.push((v, g.iter().map(|gv| gv * w[k]).collect()));
                    }
                }
            }
            Op::RowMatmul { input, matrix } => {
                let [rows, n] = self.value(*input).shape() else { unreachable!() };
                let mut d = vec![0.0; rows * n];
                rows_times_matrix(g, *rows, matrix.data(), *n, &mut d);
                out.push((*input, d));
            }
            Op::Separable { input, gy, gx } => {
                let (h, w) = (gy.shape()[0], gx.shape()[0]);
                let mut d = vec![0.0; g.len()];
                for (src, dst) in g.chunks_exact(h * w).zip(d.chunks_exact_mut(h * w)) {
                    separable_plane(src, gy.data(), gx.data(), h, w, true, dst);
                }
                out.push((*input, d));
            }
            Op::LabelMix { input, mix } => {
                let [l, n] = node.value.shape() else { unreachable!() };
                let (l, n) = (*l, *n);
                let mut d = vec![0.0; l * n];
                for a in 0..l {
                    for b in 0..l {
                        let m = mix[a * l + b];
                        if m != 0.0 {
                            for (dv, gv) in d[b * n..(b + 1) * n].iter_mut().zip(&g[a * n..(a + 1) * n]) {
                                *dv += m * gv;
                            }
                        }
                    }
                }
                out.push((*input, d));
            }
            Op::Nll { probs, labels, floor, outer, classes, inner } => {
                let p = self.value(*probs).data();
                let scale = g[0] / (outer * inner) as f64;
                let mut d = vec![0.0; p.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = (o * classes + labels[o * inner + i] as usize) * inner + i;
                        if p[idx] > *floor {
                            d[idx] = -scale / p[idx];
                        }
                    }
                }
                out.push((*probs, d));
            }
        }
        for (v, d) in out {
            self.accumulate(v, d);
        }
    }
}

/// `dst = A X B^T - diag(A) diag(B)^T * X` for `A = gy`, `B = gx`, or the
/// transposed map `A^T X B - ...` when `transpose` is set.
fn separable_plane(x: &[f64], gy: &[f64], gx: &[f64], h: usize, w: usize, transpose: bool, dst: &mut [f64]) {
    let at = |m: &[f64], n: usize, i: usize, j: usize| if transpose { m[j * n + i] } else { m[i * n + j] };
    // t = X B^T (or X B), h x w
    let mut t = vec![0.0; h * w];
    for a in 0..h {
        let xrow = &x[a * w..(a + 1) * w];
        for d in 0..w {
            t[a * w + d] = xrow.iter().enumerate().map(|(b, v)| v * at(gx, w, d, b)).sum();
        }
    }
    for c in 0..h {
        let row = &mut dst[c * w..(c + 1) * w];
        row.fill(0.0);
        for a in 0..h {
            let k = at(gy, h, c, a);
            if k != 0.0 {
                for (o, v) in row.iter_mut().zip(&t[a * w..(a + 1) * w]) {
                    *o += k * v;
                }
            }
        }
        for d in 0..w {
            row[d] -= gy[c * h + c] * gx[d * w + d] * x[c * w + d];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_matches_dense_kronecker() {
        let (h, w) = (3, 4);
        let gy = Tensor::from_fn(&[h, h], |i| 0.3 + (i as f64 * 0.7).sin());
        let gx = Tensor::from_fn(&[w, w], |i| 0.2 + (i as f64 * 1.3).cos());
        let n = h * w;
        let mut dense = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    dense[i * n + j] = gy.data()[(i / w) * h + j / w] * gx.data()[(i % w) * w + j % w];
                }
            }
        }
        let x = Tensor::from_fn(&[2, n], |i| (i as f64 * 0.37).sin());
        let probe = Arc::new(Tensor::from_fn(&[2, n], |i| (i as f64 * 0.91).cos()));
        let run = |separable: bool| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let y = if separable {
                tape.separable_offdiag_matmul(xv, Arc::new(gy.clone()), Arc::new(gx.clone())).unwrap()
            } else {
                tape.row_matmul_const(xv, Arc::new(Tensor::new(&[n, n], dense.clone()).unwrap())).unwrap()
            };
            let loss = tape.dot_const(y, Arc::clone(&probe)).unwrap();
            tape.backward(loss).unwrap();
            (tape.value(y).clone(), tape.grad(xv).unwrap())
        };
        let (ya, ga) = run(true);
        let (yb, gb) = run(false);
        assert!(ya.max_abs_diff(&yb) < 1e-13);
        assert!(ga.max_abs_diff(&gb) < 1e-13);
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 2], |i| i as f64), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]), true);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 5.0);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_cell() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 5.0), true);
        let y = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tanh_saturates_without_nan() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![0.0, 50.0]).unwrap(), true);
        let y = tape.tanh(x).unwrap();
        let v = tape.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!(v[1] > 1.0 - 1e-12 && v[1] <= 1.0);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data()[0], 1.0);
        assert!(g.data()[1].abs() < 1e-12 && g.data()[1].is_finite());
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 2, 1, 1], vec![0.0, 0.0, 1000.0, 0.0]).unwrap());
        let y = tape.softmax_channels(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 1.0).abs() < 1e-15 && v[3] < 1e-300);
    }

    #[test]
    fn softmax_needs_two_channels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(tape.softmax_channels(x).is_err());
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1], vec![-800.0]).unwrap());
        assert!(matches!(tape.exp_neg(x), Err(Error::NonFinite { op: "exp_neg" })));
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, -1.0]).unwrap(), true);
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn center_crop_offsets_floor() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 5, 5], |i| i as f64), true);
        let y = tape.center_crop(x, 2, 3).unwrap();
        // top = floor(3/2) = 1, left = floor(2/2) = 1
        assert_eq!(tape.value(y).data(), &[6.0, 7.0, 8.0, 11.0, 12.0, 13.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data().iter().sum::<f64>(), 6.0);
    }
}
