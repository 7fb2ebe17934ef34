//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node holding its value; `backward` walks the
//! list in reverse and accumulates vector-Jacobian products. Quantizing nodes
//! (`pact` with bits, `fake_quant`) apply their straight-through surrogates.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::quant::{self, PactRegion, WeightQuantConfig};
use crate::tensor::{Real, Tensor};

/// Floor applied to `q` inside the KL logarithm.
pub const KL_Q_FLOOR: f64 = 1e-12;
/// Row-sum tolerance for probability inputs to the KL op.
pub const PROB_SUM_TOL: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var },
    Relu { x: Var },
    AvgPool2d { x: Var, size: usize },
    Reshape { x: Var },
    Softmax { x: Var },
    Log { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    Mean { x: Var },
    Pact { x: Var, alpha: Var, bits: Option<u32> },
    FakeQuant { w: Var, cfg: WeightQuantConfig },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    KlDiv { p: Var, q: Var },
    PickSum { x: Var, labels: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Dense { x, w, b } => vec![x, w, b],
            Op::Conv2d { x, k, .. } => vec![x, k],
            Op::ChannelBias { x, b } => vec![x, b],
            Op::Pact { x, alpha, .. } => vec![x, alpha],
            Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::KlDiv { p, q } => vec![p, q],
            Op::Relu { x }
            | Op::AvgPool2d { x, .. }
            | Op::Reshape { x }
            | Op::Softmax { x }
            | Op::Log { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::PickSum { x, .. } => vec![x],
            Op::FakeQuant { w, .. } => vec![w],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of a one-element variable.
    pub fn scalar(&self, v: Var) -> Option<T> {
        self.get(v).map(|g| g.data()[0])
    }
}

/// Single-writer record of forward operations.
#[derive(Debug, Clone)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `x[batch,in] · w[in,out] + b[out]`
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("dense", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("dense bias", bs, &ws[1..]));
        }
        let (batch, din, dout) = (xs[0], ws[0], ws[1]);
        let mut acc = Vec::with_capacity(batch * dout);
        for _ in 0..batch {
            acc.extend(self.value(b).data().iter().map(|v| v.as_f64()));
        }
        kernels::gemm_acc(self.value(x).data(), self.value(w).data(), batch, din, dout, &mut acc);
        let value = Tensor::new(vec![batch, dout], kernels::round_into(&acc))?;
        Ok(self.push(value, Op::Dense { x, w, b }))
    }

    /// Cross-correlation of `x[batch,c,h,w]` with `k[c_out,c,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::shape("conv2d", xs, ks));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        let (batch, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape("conv2d kernel larger than padded input", xs, ks));
        }
        let geom = ConvGeom {
            channels: ch,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad: padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (r, p) = (geom.patch(), geom.positions());
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let in_stride = ch * h * w;
        let mut out = Vec::with_capacity(batch * c_out * p);
        let mut cols = vec![T::zero(); r * p];
        let mut acc = vec![0.0f64; c_out * p];
        for bi in 0..batch {
            geom.im2col(&xv[bi * in_stride..(bi + 1) * in_stride], &mut cols);
            acc.iter_mut().for_each(|v| *v = 0.0);
            kernels::gemm_acc(kv, &cols, c_out, r, p, &mut acc);
            out.extend(acc.iter().map(|&v| T::from_f64(v)));
        }
        let value = Tensor::new(vec![batch, c_out, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, k, geom }))
    }

    /// Adds `b[c]` to every position of channel `c` in `x[batch,c,h,w]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(Error::shape("channel_bias", xs, bs));
        }
        let plane = xs[2] * xs[3];
        let ch = xs[1];
        let bv = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[(i / plane) % ch])
            .collect();
        let value = Tensor::new(xs.to_vec(), data)?;
        Ok(self.push(value, Op::ChannelBias { x, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so corrupt inputs surface in the loss
        let value = self.value(x).map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        self.push(value, Op::Relu { x })
    }

    /// Non-overlapping `size×size` mean pooling; trailing rows/columns that do
    /// not fill a window are dropped.
    pub fn avg_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || size == 0 || xs[2] < size || xs[3] < size {
            return Err(Error::contract(format!(
                "avg_pool2d({size}) needs a [batch,c,h,w] input of at least that size, got {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / size, w / size);
        let inv = 1.0 / (size * size) as f64;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for i in 0..size {
                        for j in 0..size {
                            acc += src[(oy * size + i) * w + ox * size + j].as_f64();
                        }
                    }
                    out.push(T::from_f64(acc * inv));
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool2d { x, size }))
    }

    /// Collapses all non-leading axes.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let n = xs[0];
        let rest = xs[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, rest])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Row-wise softmax of a `[rows, classes]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::contract(format!("softmax expects [rows, classes], got {xs:?}")));
        }
        let value = softmax_rows(self.value(x));
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Natural logarithm; inputs must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| !(v > T::zero())) {
            return Err(Error::contract("log of a non-positive value"));
        }
        let value = self.value(x).map(|v| v.ln());
        Ok(self.push(value, Op::Log { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y)
            .map(|value| self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y)
            .map(|value| self.push(value, Op::Mul { a, b }))
    }

    fn elementwise(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| T::from_f64(v.as_f64() * factor));
        self.push(value, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(T::from_f64(self.value(x).sum_f64()));
        self.push(value, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(T::from_f64(t.sum_f64() / t.len() as f64));
        self.push(value, Op::Mean { x })
    }

    /// PACT activation with clipping level taken from the one-element `alpha`
    /// variable. `bits = None` clips without rounding.
    pub fn pact(&mut self, x: Var, alpha: Var, bits: Option<u32>) -> Result<Var> {
        let a = self.value(alpha).item()?;
        if let Some(k) = bits {
            quant::check_bits(k)?;
        }
        let value = quant::pact_with(self.value(x), a, bits)?;
        Ok(self.push(value, Op::Pact { x, alpha, bits }))
    }

    /// Per-tensor min/max fake quantization of a weight tensor.
    pub fn fake_quant(&mut self, w: Var, bits: u32) -> Result<Var> {
        let cfg = WeightQuantConfig::from_tensor(self.value(w), bits)?;
        let value = quant::quantize_weights(self.value(w), &cfg)?;
        Ok(self.push(value, Op::FakeQuant { w, cfg }))
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let value = Tensor::scalar(T::from_f64(cross_entropy_value(self.value(logits), labels)?));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean over rows of `Σ p·ln(p / max(q, 1e-12))`, with `0·ln 0 = 0`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let value = Tensor::scalar(T::from_f64(kl_value(self.value(p), self.value(q))?));
        Ok(self.push(value, Op::KlDiv { p, q }))
    }

    /// `Σ_i x[i, labels[i]]`; the gradient of this with respect to the input
    /// gives every sample's label-logit saliency in one pass.
    pub fn pick_sum(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        check_labels(xs, labels)?;
        let classes = xs[1];
        let xv = self.value(x).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| xv[i * classes + l].as_f64())
            .sum();
        let value = Tensor::scalar(T::from_f64(total));
        Ok(self.push(
            value,
            Op::PickSum {
                x,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gradients of the scalar `root` with respect to every node it depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.backward_impl(root, None)
    }

    /// Like [`Tape::backward`], but only propagates along paths that end in one
    /// of `wrt`; work for unrelated parameters is skipped.
    pub fn backward_wrt(&self, root: Var, wrt: &[Var]) -> Result<Gradients<T>> {
        self.backward_impl(root, Some(wrt))
    }

    fn backward_impl(&self, root: Var, wrt: Option<&[Var]>) -> Result<Gradients<T>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::contract("backward root is not on this tape"));
        }
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, root has shape {:?}",
                self.shape(root)
            )));
        }
        let end = root.0 + 1;
        let needed: Vec<bool> = match wrt {
            None => vec![true; end],
            Some(targets) => {
                let mut needed = vec![false; end];
                for t in targets {
                    if t.0 < end {
                        needed[t.0] = true;
                    }
                }
                for i in 0..end {
                    if !needed[i] && self.nodes[i].op.inputs().iter().any(|v| needed[v.0]) {
                        needed[i] = true;
                    }
                }
                needed
            }
        };
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; end];
        if needed[root.0] {
            grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        }
        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &needed, &mut grads)?;
            grads[i] = Some(g);
        }
        if wrt.is_some() {
            for (i, slot) in grads.iter_mut().enumerate() {
                if !needed[i] {
                    *slot = None;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, needed: &[bool], grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let need = |v: Var| needed[v.0];
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, din, dout) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
                if need(*x) {
                    let mut acc = vec![0.0; batch * din];
                    kernels::gemm_nt_acc(g.data(), wv.data(), batch, dout, din, &mut acc);
                    accumulate(grads, *x, xv.shape(), kernels::round_into(&acc))?;
                }
                if need(*w) {
                    let mut acc = vec![0.0; din * dout];
                    kernels::gemm_tn_acc(xv.data(), g.data(), batch, din, dout, &mut acc);
                    accumulate(grads, *w, wv.shape(), kernels::round_into(&acc))?;
                }
                if need(*b) {
                    let mut acc = vec![0.0f64; dout];
                    for row in g.data().chunks_exact(dout) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v.as_f64();
                        }
                    }
                    accumulate(grads, *b, &[dout], kernels::round_into(&acc))?;
                }
            }
            Op::Conv2d { x, k, geom } => self.conv_backward(*x, *k, geom, g, need(*x), need(*k), grads)?,
            Op::ChannelBias { x, b } => {
                if need(*x) {
                    accumulate(grads, *x, g.shape(), g.data().to_vec())?;
                }
                if need(*b) {
                    let s = g.shape();
                    let (ch, plane) = (s[1], s[2] * s[3]);
                    let mut acc = vec![0.0f64; ch];
                    for (idx, chunk) in g.data().chunks_exact(plane).enumerate() {
                        acc[idx % ch] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    accumulate(grads, *b, &[ch], kernels::round_into(&acc))?;
                }
            }
            Op::Relu { x } => {
                if need(*x) {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, g.shape(), data)?;
                }
            }
            Op::AvgPool2d { x, size } => {
                if need(*x) {
                    let xs = self.shape(*x);
                    let (h, w) = (xs[2], xs[3]);
                    let (oh, ow) = (h / size, w / size);
                    let inv = T::from_f64(1.0 / (size * size) as f64);
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (plane, gp) in g.data().chunks_exact(oh * ow).enumerate() {
                        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let v = gp[oy * ow + ox] * inv;
                                for ii in 0..*size {
                                    for jj in 0..*size {
                                        dst[(oy * size + ii) * w + ox * size + jj] = v;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, xs, dx)?;
                }
            }
            Op::Reshape { x } => {
                if need(*x) {
                    accumulate(grads, *x, self.shape(*x), g.data().to_vec())?;
                }
            }
            Op::Softmax { x } => {
                if need(*x) {
                    let y = &node.value;
                    let c = y.shape()[1];
                    let mut dx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| T::from_f64(yv.as_f64() * (gv.as_f64() - dot))));
                    }
                    accumulate(grads, *x, y.shape(), dx)?;
                }
            }
            Op::Log { x } => {
                if need(*x) {
                    let data = g.data().iter().zip(self.value(*x).data()).map(|(&gv, &xv)| gv / xv).collect();
                    accumulate(grads, *x, g.shape(), data)?;
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if need(v) {
                        accumulate(grads, v, g.shape(), g.data().to_vec())?;
                    }
                }
            }
            Op::Mul { a, b } => {
                if need(*a) {
                    let data = g.data().iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, g.shape(), data)?;
                }
                if need(*b) {
                    let data = g.data().iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, g.shape(), data)?;
                }
            }
            Op::Scale { x, factor } => {
                if need(*x) {
                    let data = g.data().iter().map(|&v| T::from_f64(v.as_f64() * factor)).collect();
                    accumulate(grads, *x, g.shape(), data)?;
                }
            }
            Op::Sum { x } | Op::Mean { x } => {
                if need(*x) {
                    let xs = self.shape(*x);
                    let n = self.value(*x).len();
                    let mut v = g.data()[0];
                    if matches!(node.op, Op::Mean { .. }) {
                        v = T::from_f64(v.as_f64() / n as f64);
                    }
                    accumulate(grads, *x, xs, vec![v; n])?;
                }
            }
            Op::Pact { x, alpha, .. } => {
                let a = self.value(*alpha).data()[0];
                let mut dx = Vec::new();
                let da = quant::pact_backward_slices(g.data(), self.value(*x).data(), a, &mut dx);
                if need(*x) {
                    accumulate(grads, *x, g.shape(), dx)?;
                }
                if need(*alpha) {
                    accumulate(grads, *alpha, self.shape(*alpha), vec![da])?;
                }
            }
            Op::FakeQuant { w, cfg } => {
                if need(*w) {
                    let dw = if cfg.is_degenerate() {
                        g.clone()
                    } else {
                        quant::quantize_weights_backward(g, self.value(*w), cfg)?
                    };
                    accumulate(grads, *w, g.shape(), dw.into_data())?;
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if need(*logits) {
                    let lv = self.value(*logits);
                    let probs = softmax_rows(lv);
                    let c = lv.shape()[1];
                    let scale = g.data()[0].as_f64() / labels.len() as f64;
                    let mut dx: Vec<T> = probs.data().iter().map(|&p| T::from_f64(p.as_f64() * scale)).collect();
                    for (row, &l) in labels.iter().enumerate() {
                        let idx = row * c + l;
                        dx[idx] = T::from_f64((probs.data()[idx].as_f64() - 1.0) * scale);
                    }
                    accumulate(grads, *logits, lv.shape(), dx)?;
                }
            }
            Op::KlDiv { p, q } => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                let rows = pv.shape()[0] as f64;
                let scale = g.data()[0].as_f64() / rows;
                if need(*p) {
                    let dp = pv
                        .data()
                        .iter()
                        .zip(qv.data())
                        .map(|(&pi, &qi)| {
                            let pi = pi.as_f64();
                            if pi > 0.0 {
                                T::from_f64((pi.ln() - qi.as_f64().max(KL_Q_FLOOR).ln() + 1.0) * scale)
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    accumulate(grads, *p, pv.shape(), dp)?;
                }
                if need(*q) {
                    let dq = pv
                        .data()
                        .iter()
                        .zip(qv.data())
                        .map(|(&pi, &qi)| {
                            let qi = qi.as_f64();
                            if qi > KL_Q_FLOOR {
                                T::from_f64(-pi.as_f64() / qi * scale)
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    accumulate(grads, *q, qv.shape(), dq)?;
                }
            }
            Op::PickSum { x, labels } => {
                if need(*x) {
                    let xs = self.shape(*x);
                    let c = xs[1];
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (row, &l) in labels.iter().enumerate() {
                        dx[row * c + l] = g.data()[0];
                    }
                    accumulate(grads, *x, xs, dx)?;
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        k: Var,
        geom: &ConvGeom,
        g: &Tensor<T>,
        need_x: bool,
        need_k: bool,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (xv, kv) = (self.value(x), self.value(k));
        let batch = xv.shape()[0];
        let c_out = kv.shape()[0];
        let (r, p) = (geom.patch(), geom.positions());
        let in_stride = geom.channels * geom.height * geom.width;
        let out_stride = c_out * p;
        if need_k {
            let mut cols_t = vec![T::zero(); p * r];
            let mut acc = vec![0.0f64; c_out * r];
            for bi in 0..batch {
                geom.im2col_t(&xv.data()[bi * in_stride..(bi + 1) * in_stride], &mut cols_t);
                let gb = &g.data()[bi * out_stride..(bi + 1) * out_stride];
                kernels::gemm_acc(gb, &cols_t, c_out, p, r, &mut acc);
            }
            accumulate(grads, k, kv.shape(), kernels::round_into(&acc))?;
        }
        if need_x {
            let mut dcols = vec![0.0f64; r * p];
            let mut dx = vec![0.0f64; in_stride];
            let mut out = Vec::with_capacity(batch * in_stride);
            for bi in 0..batch {
                dcols.iter_mut().for_each(|v| *v = 0.0);
                dx.iter_mut().for_each(|v| *v = 0.0);
                let gb = &g.data()[bi * out_stride..(bi + 1) * out_stride];
                kernels::gemm_tn_acc(kv.data(), gb, c_out, r, p, &mut dcols);
                geom.col2im_acc(&dcols, &mut dx);
                out.extend(dx.iter().map(|&v| T::from_f64(v)));
            }
            accumulate(grads, x, xv.shape(), out)?;
        }
        Ok(())
    }

    /// Which side of every non-differentiable point each relu/PACT/weight
    /// quantizer input lies on. Two evaluations with equal patterns are on the
    /// same smooth piece of the graph.
    pub fn kink_pattern(&self) -> Vec<u8> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => pattern.extend(self.value(*x).data().iter().map(|&v| (v > T::zero()) as u8)),
                Op::Pact { x, alpha, bits } => {
                    let a = self.value(*alpha).data()[0];
                    pattern.extend(self.value(*x).data().iter().map(|&v| pact_region(v, a) as u8));
                    if let Some(b) = bits {
                        // rounding buckets are kinks too
                        let s = ((1u32 << b) - 1) as f64 / a.as_f64();
                        for v in node.value.data() {
                            pattern.extend_from_slice(&((v.as_f64() * s).round() as i64).to_le_bytes());
                        }
                    }
                }
                Op::FakeQuant { w, cfg } => {
                    for v in self.value(*w).data() {
                        let v = v.as_f64();
                        let q = if cfg.is_degenerate() { 0 } else { (v / cfg.step).round() as i64 };
                        pattern.extend_from_slice(&q.to_le_bytes());
                        pattern.push(cfg.passes_gradient(v) as u8);
                    }
                }
                Op::KlDiv { q, .. } => {
                    pattern.extend(self.value(*q).data().iter().map(|v| (v.as_f64() > KL_Q_FLOOR) as u8));
                }
                _ => {}
            }
        }
        pattern
    }
}

#[inline]
fn pact_region<T: Real>(x: T, alpha: T) -> PactRegion {
    quant::pact_region(x, alpha)
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(data) {
                *e = *e + d;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), data)?),
    }
    Ok(())
}

fn check_labels(shape: &[usize], labels: &[usize]) -> Result<()> {
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("labels", shape, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::contract(format!("label {bad} out of range for {} classes", shape[1])));
    }
    Ok(())
}

/// Numerically stable row-wise softmax.
pub(crate) fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.shape()[x.rank() - 1];
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::from_f64(e / total)));
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

pub(crate) fn cross_entropy_value<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    check_labels(logits.shape(), labels)?;
    let c = logits.shape()[1];
    let mut total = 0.0f64;
    for (row, &l) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        total += lse - row[l].as_f64();
    }
    Ok(total / labels.len() as f64)
}

pub(crate) fn kl_value<T: Real>(p: &Tensor<T>, q: &Tensor<T>) -> Result<f64> {
    if p.shape() != q.shape() || p.rank() != 2 {
        return Err(Error::shape("kl_divergence", p.shape(), q.shape()));
    }
    let c = p.shape()[1];
    for (name, t) in [("p", p), ("q", q)] {
        for (i, row) in t.data().chunks_exact(c).enumerate() {
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > PROB_SUM_TOL || row.iter().any(|&v| v < T::zero()) {
                return Err(Error::contract(format!(
                    "kl_divergence: row {i} of {name} is not a probability vector (sum {s})"
                )));
            }
        }
    }
    let mut total = 0.0f64;
    for (&pi, &qi) in p.data().iter().zip(q.data()) {
        let pi = pi.as_f64();
        if pi > 0.0 {
            total += pi * (pi.ln() - qi.as_f64().max(KL_Q_FLOOR).ln());
        }
    }
    Ok(total / p.shape()[0] as f64)
}
