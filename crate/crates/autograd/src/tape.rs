//! Recording tape and reverse pass.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! tape in reverse and accumulates exact gradients into the leaves that were
//! registered with [`Tape::param`].

use crate::conv::ConvGeom;
use crate::error::{AutogradError, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { x: usize, row: usize },
    MulRow { x: usize, row: usize },
    ScaleBy { x: usize, s: usize },
    Scale { x: usize, k: f64 },
    Relu { x: usize },
    Tanh { x: usize },
    Clamp01 { x: usize },
    Softmax { x: usize, outer: usize, n: usize, inner: usize },
    MaskedSoftmax { x: usize, mask: Vec<bool> },
    Sum { x: usize },
    Mean { x: usize },
    MeanAxis { x: usize, outer: usize, n: usize, inner: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Reshape { x: usize },
    Mse { a: usize, b: usize },
    CrossEntropy { logits: usize, label: usize, probs: Vec<f64> },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom, cols: Vec<f64> },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A single-threaded computation record.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
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

    /// Trainable leaf: receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s current value as a constant (gradient stops here).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.to_vec())
                .expect("gradient shape matches value")
        })
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite { op: name });
        }
        let requires_grad = self.op_inputs(&op).iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<usize> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Mse { a, b } => vec![a, b],
            Op::AddRow { x, row } | Op::MulRow { x, row } => vec![x, row],
            Op::ScaleBy { x, s } => vec![x, s],
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Tanh { x }
            | Op::Clamp01 { x }
            | Op::Softmax { x, .. }
            | Op::MaskedSoftmax { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::MeanAxis { x, .. }
            | Op::Transpose { x, .. }
            | Op::Reshape { x } => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Conv2d { x, w, b, .. } => vec![x, w, b],
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutogradError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    // ----- ops -------------------------------------------------------------

    /// `[m, k] · [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul { a: a.0, b: b.0 }, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push(value, Op::Add { a: a.0, b: b.0 }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push(value, Op::Sub { a: a.0, b: b.0 }, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push(value, Op::Mul { a: a.0, b: b.0 }, "mul")
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let sx = self.shape(x);
        let sr = self.shape(row);
        let n = *sx.last().unwrap_or(&0);
        if sr.len() != 1 || sr[0] != n || n == 0 {
            return Err(AutogradError::ShapeMismatch {
                op,
                left: sx.to_vec(),
                right: sr.to_vec(),
            });
        }
        Ok(n)
    }

    /// Adds a `[n]` vector to every row of `x` (last axis length `n`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.check_row("add_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let t = self.value(x);
        let data = t.data().iter().enumerate().map(|(i, v)| v + r[i % n]).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::AddRow { x: x.0, row: row.0 }, "add_row")
    }

    /// Multiplies every row of `x` elementwise by a `[n]` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.check_row("mul_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let t = self.value(x);
        let data = t.data().iter().enumerate().map(|(i, v)| v * r[i % n]).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::MulRow { x: x.0, row: row.0 }, "mul_row")
    }

    /// `x · s` for a single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(AutogradError::ShapeMismatch {
                op: "scale_by",
                left: self.shape(x).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let k = self.value(s).item();
        let value = self.map(x, |v| v * k);
        self.push(value, Op::ScaleBy { x: x.0, s: s.0 }, "scale_by")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let value = self.map(x, |v| v * k);
        self.push(value, Op::Scale { x: x.0, k }, "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v.max(0.0));
        self.push(value, Op::Relu { x: x.0 }, "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, f64::tanh);
        self.push(value, Op::Tanh { x: x.0 }, "tanh")
    }

    /// `min(max(0, x), 1)`; the backward pass lets gradient through on the
    /// closed interval `[0, 1]`.
    pub fn clamp01(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v.clamp(0.0, 1.0));
        self.push(value, Op::Clamp01 { x: x.0 }, "clamp01")
    }

    fn axis_split(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(AutogradError::Invalid {
                op,
                reason: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        Ok((outer, s[axis], inner))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.axis_split("softmax", x, axis)?;
        let t = self.value(x);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::Softmax { x: x.0, outer, n, inner }, "softmax")
    }

    /// Softmax over a rank-1 tensor restricted to entries where `mask` is
    /// true; masked entries get probability zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || t.len() != mask.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "masked_softmax",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(AutogradError::Invalid {
                op: "masked_softmax",
                reason: "no unmasked entries".into(),
            });
        }
        let src = t.data();
        let mx = src
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = src
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { (v - mx).exp() } else { 0.0 })
            .collect();
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= z);
        let value = Tensor::vector(out);
        self.push(
            value,
            Op::MaskedSoftmax {
                x: x.0,
                mask: mask.to_vec(),
            },
            "masked_softmax",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x: x.0 }, "mean")
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.axis_split("mean_axis", x, axis)?;
        let t = self.value(x);
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::MeanAxis { x: x.0, outer, n, inner }, "mean_axis")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(AutogradError::Invalid {
                op: "transpose",
                reason: format!("rank-2 input required, got {:?}", t.shape()),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        self.push(value, Op::Transpose { x: x.0, rows, cols }, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape { x: x.0 }, "reshape")
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.len() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(s), Op::Mse { a: a.0, b: b.0 }, "mse")
    }

    /// `-log softmax(logits)[label]` for a single example.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        let c = t.len();
        if label >= c {
            return Err(AutogradError::Invalid {
                op: "cross_entropy",
                reason: format!("label {label} out of range for {c} classes"),
            });
        }
        let mx = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let loss = -(t.data()[label] - mx - z.ln());
        let probs = exps.iter().map(|e| e / z).collect();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                label,
                probs,
            },
            "cross_entropy",
        )
    }

    /// Same-padded convolution. `x: [Cin, H, W]`, `w: [Cout, Cin, k, k]`,
    /// `b: [Cout]`; output `[Cout, ceil(H/s), ceil(W/s)]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let h = match self.shape(x) {
            [_, h, _] => *h,
            s => {
                return Err(AutogradError::Invalid {
                    op: "conv2d",
                    reason: format!("input must be [C, H, W], got {s:?}"),
                })
            }
        };
        if stride == 0 {
            return Err(AutogradError::Invalid {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        self.conv2d_rows(x, w, b, stride, crate::conv::same_out(h, stride))
    }

    /// As [`Tape::conv2d`] with an explicit output row count.
    pub fn conv2d_rows(&mut self, x: Var, w: Var, b: Var, stride: usize, out_h: usize) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        let bad = |reason: String| AutogradError::Invalid { op: "conv2d", reason };
        if sx.len() != 3 || sw.len() != 4 {
            return Err(bad(format!("input {sx:?}, weight {sw:?}")));
        }
        if sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0 || sb != [sw[0]] {
            return Err(AutogradError::ShapeMismatch {
                op: "conv2d",
                left: sx,
                right: sw,
            });
        }
        if stride == 0 || out_h == 0 {
            return Err(bad("stride and output rows must be positive".into()));
        }
        let geom = ConvGeom {
            in_channels: sx[0],
            in_h: sx[1],
            in_w: sx[2],
            out_channels: sw[0],
            kernel: sw[2],
            stride,
            out_h,
            out_w: crate::conv::same_out(sx[2], stride),
        };
        let cols = geom.im2col(self.value(x).data());
        let npix = geom.out_pixels();
        let mut out = vec![0.0; geom.out_channels * npix];
        for (c, &bias) in self.value(b).data().iter().enumerate() {
            out[c * npix..(c + 1) * npix].fill(bias);
        }
        gemm(
            geom.out_channels,
            geom.patch_len(),
            npix,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out,
            1.0,
        );
        let value = Tensor::new(vec![geom.out_channels, geom.out_h, geom.out_w], out)?;
        // only keep the lowered input if someone needs the weight gradient
        let cols = if self.nodes[w.0].requires_grad { cols } else { Vec::new() };
        self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
                cols,
            },
            "conv2d",
        )
    }

    /// Fingerprint of the piecewise-linear regime (sign pattern of every
    /// relu/clamp input). Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn regime_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match node.op {
                Op::Relu { x } => {
                    for &v in self.nodes[x].value.data() {
                        feed((v > 0.0) as u64);
                    }
                }
                Op::Clamp01 { x } => {
                    for &v in self.nodes[x].value.data() {
                        feed(if v < 0.0 { 0 } else if v <= 1.0 { 1 } else { 2 });
                    }
                }
                _ => {}
            }
        }
        h
    }

    // ----- reverse pass -----------------------------------------------------

    /// Accumulate `d loss / d leaf` into every trainable leaf. Repeated calls
    /// add to existing leaf gradients until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(AutogradError::NonScalarLoss { shape });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let mut slot = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[j].requires_grad {
                let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
                f(buf);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                let n = nodes[b].value.shape()[1];
                slot(a, &mut |da| gemm(m, n, k, g, false, val(b), true, da, 1.0));
                slot(b, &mut |db| gemm(k, m, n, val(a), true, g, false, db, 1.0));
            }
            &Op::Add { a, b } => {
                slot(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                slot(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            &Op::Sub { a, b } => {
                slot(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                slot(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            &Op::Mul { a, b } => {
                slot(a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(val(b)) {
                        *d += g * y;
                    }
                });
                slot(b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(val(a)) {
                        *d += g * x;
                    }
                });
            }
            &Op::AddRow { x, row } => {
                let n = nodes[row].value.len();
                slot(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                slot(row, &mut |d| {
                    for (k, gv) in g.iter().enumerate() {
                        d[k % n] += gv;
                    }
                });
            }
            &Op::MulRow { x, row } => {
                let n = nodes[row].value.len();
                let (xv, rv) = (val(x), val(row));
                slot(x, &mut |d| {
                    for (k, (d, gv)) in d.iter_mut().zip(g).enumerate() {
                        *d += gv * rv[k % n];
                    }
                });
                slot(row, &mut |d| {
                    for (k, gv) in g.iter().enumerate() {
                        d[k % n] += gv * xv[k];
                    }
                });
            }
            &Op::ScaleBy { x, s } => {
                let k = val(s)[0];
                slot(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * k));
                let dot: f64 = g.iter().zip(val(x)).map(|(g, v)| g * v).sum();
                slot(s, &mut |d| d[0] += dot);
            }
            &Op::Scale { x, k } => {
                slot(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * k));
            }
            &Op::Relu { x } => slot(x, &mut |d| {
                for ((d, g), v) in d.iter_mut().zip(g).zip(val(x)) {
                    if *v > 0.0 {
                        *d += g;
                    }
                }
            }),
            &Op::Tanh { x: xi } => {
                let y = nodes[i].value.data();
                slot(xi, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                })
            }
            &Op::Clamp01 { x } => slot(x, &mut |d| {
                for ((d, g), v) in d.iter_mut().zip(g).zip(val(x)) {
                    if (0.0..=1.0).contains(v) {
                        *d += g;
                    }
                }
            }),
            &Op::Softmax { x, outer, n, inner } => {
                let y = nodes[i].value.data();
                slot(x, &mut |d| {
                    for o in 0..outer {
                        for c in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + c;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                d[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                })
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = nodes[i].value.data();
                let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                slot(*x, &mut |d| {
                    for (j, d) in d.iter_mut().enumerate() {
                        if mask[j] {
                            *d += y[j] * (g[j] - dot);
                        }
                    }
                })
            }
            &Op::Sum { x } => slot(x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean { x } => {
                let k = g[0] / nodes[x].value.len() as f64;
                slot(x, &mut |d| d.iter_mut().for_each(|d| *d += k))
            }
            &Op::MeanAxis { x, outer, n, inner } => {
                let inv = 1.0 / n as f64;
                slot(x, &mut |d| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut d[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s * inv;
                            }
                        }
                    }
                })
            }
            &Op::Transpose { x, rows, cols } => slot(x, &mut |d| {
                for r in 0..rows {
                    for c in 0..cols {
                        d[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            &Op::Reshape { x } => slot(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            &Op::Mse { a, b } => {
                let n = nodes[a].value.len() as f64;
                let k = 2.0 * g[0] / n;
                let (av, bv) = (val(a), val(b));
                slot(a, &mut |d| {
                    for ((d, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *d += k * (x - y);
                    }
                });
                slot(b, &mut |d| {
                    for ((d, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *d -= k * (x - y);
                    }
                });
            }
            Op::CrossEntropy { logits, label, probs } => slot(*logits, &mut |d| {
                for (j, (d, p)) in d.iter_mut().zip(probs).enumerate() {
                    let t = if j == *label { 1.0 } else { 0.0 };
                    *d += g[0] * (p - t);
                }
            }),
            Op::Conv2d { x, w, b, geom, cols } => {
                let (x, w, b) = (*x, *w, *b);
                let npix = geom.out_pixels();
                let p = geom.patch_len();
                let cout = geom.out_channels;
                slot(w, &mut |dw| gemm(cout, npix, p, g, false, cols, true, dw, 1.0));
                slot(b, &mut |db| {
                    for (c, d) in db.iter_mut().enumerate() {
                        *d += g[c * npix..(c + 1) * npix].iter().sum::<f64>();
                    }
                });
                slot(x, &mut |dx| {
                    let mut dcols = vec![0.0; p * npix];
                    gemm(p, cout, npix, val(w), true, g, false, &mut dcols, 0.0);
                    geom.col2im(&dcols, dx);
                });
            }
        }
    }
}
