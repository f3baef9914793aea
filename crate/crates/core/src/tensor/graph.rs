//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding
//! its output value and the op that produced it (with whatever extra state
//! the backward rule needs: pooling argmaxes, dropout masks, saved batch
//! moments, softmax probabilities). Node indices are assigned in creation
//! order, which is already a topological order, so [`Graph::backward`]
//! simply walks the tape once in reverse, pushing gradient contributions
//! to each node's parents and finally flushing leaf gradients into the
//! bound [`Param`]s.
//!
//! Gradients accumulate: a parameter bound several times (or reachable via
//! several paths) receives the sum of all contributions. All reductions
//! run in fixed order, so backward passes are bit-reproducible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{BnState, Param, Scalar, Tensor};
use crate::error::{Error, Result};

/// Forward-pass mode. Controls dropout and which batch-norm statistics are
/// used; `Eval` consumes no randomness.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op<T: Scalar> {
    /// Constant input; never receives gradient.
    Input,
    /// Bound parameter leaf; gradient flushes into the [`Param`].
    Leaf(Param<T>),
    Matmul { a: NodeId, b: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, k: usize, pad: usize },
    MaxPool2 { x: NodeId, argmax: Vec<u32> },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Dropout { x: NodeId, scale: T, mask: Vec<bool> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Multiply a tensor by a scalar node (a learned fusion coefficient).
    ScaleBy { alpha: NodeId, x: NodeId },
    /// `mul * x + add` with constants; only the slope matters going backward.
    Affine { x: NodeId, mul: T },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    Reshape { x: NodeId },
    ConcatCols { xs: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize },
    PadCols { x: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, probs: Vec<T>, labels: Vec<u32> },
    WeightedBce { logits: NodeId, targets: Vec<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    /// True when some parameter is reachable below this node.
    needs: bool,
}

/// Operation tape for one forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    mode: Mode,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Graph { nodes: Vec::with_capacity(64), mode }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of a node after [`Graph::backward`], if one was produced.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Invariant(format!("node id {} out of range ({} nodes)", id.0, self.nodes.len())))
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op, needs });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs
    }

    /// Bind a constant input tensor.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input, false)
    }

    pub fn scalar_input(&mut self, v: T) -> NodeId {
        self.push(Tensor::scalar(v), Op::Input, false)
    }

    /// Bind a trainable parameter as a leaf. The node holds a snapshot of
    /// the parameter's current data; backward flushes gradient into the
    /// parameter's accumulator.
    pub fn param(&mut self, p: &Param<T>) -> NodeId {
        let snapshot = {
            let t = p.borrow();
            Tensor::new(t.shape(), t.data().to_vec()).expect("param tensor is self-consistent")
        };
        self.push(snapshot, Op::Leaf(p.clone()), true)
    }

    /// `[m,k] x [k,n] -> [m,n]` matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul on {:?} and {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::gemm(m, k, n, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), out.data_mut());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul { a, b }, needs))
    }

    /// Fully connected layer: `x[n,din] . w[din,dout] + b[dout]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (sx, sw, sb) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(Error::Shape(format!("dense on x{:?} w{:?} b{:?}", sx, sw, sb)));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[1]);
        let mut out = Tensor::zeros(&[n, dout]);
        kernels::gemm(n, din, dout, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), out.data_mut());
        {
            let bias = self.value(b).data().to_vec();
            let o = out.data_mut();
            for r in 0..n {
                for (c, bv) in bias.iter().enumerate() {
                    o[r * dout + c] += *bv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Dense { x, w, b }, needs))
    }

    /// 2-D convolution with odd kernel `k`, stride 1, zero padding `k/2`
    /// (spatial size is preserved). `x: [n,c,h,w]`, `w: [f,c,k,k]`, `b: [f]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (sx, sw, sb) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sb != [sw[0]] {
            return Err(Error::Shape(format!("conv2d on x{:?} w{:?} b{:?}", sx, sw, sb)));
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(Error::Input(format!("conv2d kernel size {k} must be odd")));
        }
        let pad = k / 2;
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let f = sw[0];
        let (hw, ckk) = (h * wd, c * k * k);
        let mut out = Tensor::zeros(&[n, f, h, wd]);
        let mut cols = vec![T::zero(); ckk * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            // Work sample by sample to keep the column buffer small.
            let o = out.data_mut();
            for ni in 0..n {
                kernels::im2col(&xv[ni * c * hw..(ni + 1) * c * hw], c, h, wd, k, pad, &mut cols);
                let dst = &mut o[ni * f * hw..(ni + 1) * f * hw];
                kernels::gemm(f, ckk, hw, T::one(), wv, &cols, T::zero(), dst);
                for fi in 0..f {
                    let bias = bv[fi];
                    for v in &mut dst[fi * hw..(fi + 1) * hw] {
                        *v += bias;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, k, pad }, needs))
    }

    /// 2x2/stride-2 max pooling over `[n,c,h,w]`; `h` and `w` must be even.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 || sx[2] % 2 != 0 || sx[3] % 2 != 0 {
            return Err(Error::Shape(format!("maxpool2 needs [n,c,even,even], got {:?}", sx)));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]);
        let mut argmax = vec![0u32; out.numel()];
        kernels::maxpool2(self.value(x).data(), n, c, h, w, out.data_mut(), &mut argmax);
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, needs))
    }

    fn unary<F: Fn(T) -> T>(&mut self, x: NodeId, f: F) -> Tensor<T> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        Tensor::new(src.shape(), data).expect("unary preserves shape")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = self.unary(x, |v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        Ok(self.push(out, Op::Relu { x }, needs))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = self.unary(x, sigmoid_stable);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Sigmoid { x }, needs))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = self.unary(x, |v| v.tanh());
        let needs = self.needs(x);
        Ok(self.push(out, Op::Tanh { x }, needs))
    }

    /// Softmax along `axis`; every lane sums to 1.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check(x)?;
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {:?}", shape)));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = self.value(x).clone();
        out.zero_grad();
        softmax_lanes(out.data_mut(), outer, lane, inner);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax { x, axis }, needs))
    }

    /// Batch normalization over the channel axis (axis 1). Works on
    /// `[n, c]` and `[n, c, h, w]`. In `Train` mode, normalizes with batch
    /// moments and folds them into `state`; in `Eval` mode, uses the
    /// running statistics and leaves `state` untouched.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState,
    ) -> Result<NodeId> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(Error::Shape(format!("batchnorm needs rank 2 or 4, got {:?}", shape)));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!(
                "batchnorm scale/shift must be [{c}], got {:?}/{:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        if state.running_mean.len() != c {
            return Err(Error::Shape(format!(
                "batchnorm state has {} channels, input has {c}",
                state.running_mean.len()
            )));
        }
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            if n == 0 {
                return Err(Error::Input("batchnorm on an empty batch".into()));
            }
            let (m, v) = kernels::bn_moments(self.value(x).data(), n, c, s);
            let mom = state.momentum;
            for ci in 0..c {
                state.running_mean[ci] = mom * state.running_mean[ci] + (1.0 - mom) * m[ci];
                state.running_var[ci] = mom * state.running_var[ci] + (1.0 - mom) * v[ci];
            }
            state.batches_seen += 1;
            (m, v)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let mut out = Tensor::zeros(&shape);
        {
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            let o = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * s;
                    let (mu, istd) = (mean[ci], inv_std[ci]);
                    let (g, b) = (gv[ci], bv[ci]);
                    for si in 0..s {
                        let xh = T::from_f64((xv[base + si].as_f64() - mu) * istd);
                        o[base + si] = g * xh + b;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats }, needs))
    }

    /// Inverted dropout. In `Train` mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`, so the
    /// expected activation is unchanged and evaluation needs no rescaling.
    /// `p = 0` (or `Eval` mode) is the identity and consumes no randomness.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        self.check(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Input(format!("dropout probability {p} must be in [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let scale = T::from_f64(1.0 / keep);
        let src = self.value(x);
        let mask: Vec<bool> = (0..src.numel()).map(|_| rng.gen::<f64>() < keep).collect();
        let data: Vec<T> = src
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v * scale } else { T::zero() })
            .collect();
        let out = Tensor::new(src.shape(), data).expect("dropout preserves shape");
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, scale, mask }, needs))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<(Tensor<T>, bool)> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{name} on mismatched shapes {:?} and {:?}", sa, sb)));
        }
        Ok((Tensor::zeros(sa), self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (mut out, needs) = self.binary(a, b, "add")?;
        for ((o, &x), &y) in out.data_mut().iter_mut().zip(self.nodes[a.0].value.data()).zip(self.nodes[b.0].value.data()) {
            *o = x + y;
        }
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (mut out, needs) = self.binary(a, b, "sub")?;
        for ((o, &x), &y) in out.data_mut().iter_mut().zip(self.nodes[a.0].value.data()).zip(self.nodes[b.0].value.data()) {
            *o = x - y;
        }
        Ok(self.push(out, Op::Sub { a, b }, needs))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (mut out, needs) = self.binary(a, b, "mul")?;
        for ((o, &x), &y) in out.data_mut().iter_mut().zip(self.nodes[a.0].value.data()).zip(self.nodes[b.0].value.data()) {
            *o = x * y;
        }
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    /// Multiply every element of `x` by the scalar node `alpha`.
    pub fn scale(&mut self, alpha: NodeId, x: NodeId) -> Result<NodeId> {
        self.check(alpha)?;
        self.check(x)?;
        if self.value(alpha).numel() != 1 {
            return Err(Error::Shape(format!(
                "scale coefficient must be a scalar, got {:?}",
                self.value(alpha).shape()
            )));
        }
        let av = self.value(alpha).data()[0];
        let src = self.value(x);
        let data = src.data().iter().map(|&v| av * v).collect();
        let out = Tensor::new(src.shape(), data).expect("scale preserves shape");
        let needs = self.needs(alpha) || self.needs(x);
        Ok(self.push(out, Op::ScaleBy { alpha, x }, needs))
    }

    /// `mul * x + add` with constants (no gradient to the constants).
    pub fn affine(&mut self, x: NodeId, mul: T, add: T) -> Result<NodeId> {
        self.check(x)?;
        let out = self.unary(x, |v| mul * v + add);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Affine { x, mul }, needs))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let mut acc = 0.0f64;
        for v in self.value(x).data() {
            acc += v.as_f64();
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(T::from_f64(acc)), Op::SumAll { x }, needs))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Shape("mean_all on an empty tensor".into()));
        }
        let mut acc = 0.0f64;
        for v in self.value(x).data() {
            acc += v.as_f64();
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(T::from_f64(acc / n as f64)), Op::MeanAll { x }, needs))
    }

    /// View the same elements under a new shape.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, needs))
    }

    /// Concatenate `[n, d_i]` matrices along the feature axis.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Input("concat_cols needs at least one input".into()));
        }
        for &x in xs {
            self.check(x)?;
        }
        let n = {
            let s = self.value(xs[0]).shape();
            if s.len() != 2 {
                return Err(Error::Shape(format!("concat_cols needs rank-2 inputs, got {:?}", s)));
            }
            s[0]
        };
        let mut total = 0usize;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != 2 || s[0] != n {
                return Err(Error::Shape(format!("concat_cols row mismatch: {:?} vs {n} rows", s)));
            }
            total += s[1];
        }
        let mut out = Tensor::zeros(&[n, total]);
        {
            let o = out.data_mut();
            let mut col = 0usize;
            for &x in xs {
                let src = &self.nodes[x.0].value;
                let d = src.shape()[1];
                for r in 0..n {
                    o[r * total + col..r * total + col + d]
                        .copy_from_slice(&src.data()[r * d..(r + 1) * d]);
                }
                col += d;
            }
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(out, Op::ConcatCols { xs: xs.to_vec() }, needs))
    }

    /// Take columns `start..start+len` of a `[n, d]` matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(x)?;
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Shape(format!("slice_cols {start}..{} on {:?}", start + len, s)));
        }
        let (n, d) = (s[0], s[1]);
        let mut out = Tensor::zeros(&[n, len]);
        {
            let src = self.value(x).data();
            let o = out.data_mut();
            for r in 0..n {
                o[r * len..(r + 1) * len].copy_from_slice(&src[r * d + start..r * d + start + len]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, needs))
    }

    /// Zero-pad a `[n, d]` matrix on the right up to `[n, to]`.
    pub fn pad_cols(&mut self, x: NodeId, to: usize) -> Result<NodeId> {
        self.check(x)?;
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || s[1] > to {
            return Err(Error::Shape(format!("pad_cols to {to} on {:?}", s)));
        }
        let (n, d) = (s[0], s[1]);
        if d == to {
            return Ok(x);
        }
        let mut out = Tensor::zeros(&[n, to]);
        {
            let src = self.value(x).data();
            let o = out.data_mut();
            for r in 0..n {
                o[r * to..r * to + d].copy_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::PadCols { x }, needs))
    }

    /// Mean cross-entropy between `logits [n, k]` and integer class labels,
    /// with the softmax folded in (stable log-sum-exp form).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[u32]) -> Result<NodeId> {
        self.check(logits)?;
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("softmax_cross_entropy needs [n,k] logits, got {:?}", s)));
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
        }
        if n == 0 {
            return Err(Error::Input("softmax_cross_entropy on an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = 0.0f64;
        {
            let z = self.value(logits).data();
            for r in 0..n {
                let row = &z[r * k..(r + 1) * k];
                let mut m = row[0];
                for &v in &row[1..] {
                    if v > m {
                        m = v;
                    }
                }
                let mut denom = 0.0f64;
                for &v in row {
                    denom += (v - m).as_f64().exp();
                }
                let lse = m.as_f64() + denom.ln();
                loss += lse - row[labels[r] as usize].as_f64();
                for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                    *p = T::from_f64(((v - m).as_f64().exp()) / denom);
                }
            }
        }
        loss /= n as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() },
            needs,
        ))
    }

    /// Mean binary cross-entropy over all elements of `logits [n, k]`, with
    /// positive targets up-weighted by factor 2 inside the log:
    /// `loss = mean( -y*ln(2*sigmoid(z)) - (1-y)*ln(1-sigmoid(z)) )`.
    ///
    /// Targets must be exactly 0 or 1. The per-element minimum for a
    /// positive target is `-ln 2`, reached at `sigmoid(z) = 1`; the gradient
    /// is `(sigmoid(z) - y) / numel`, identical to unweighted BCE.
    pub fn weighted_bce(&mut self, logits: NodeId, targets: &[T]) -> Result<NodeId> {
        self.check(logits)?;
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("weighted_bce needs [n,k] logits, got {:?}", s)));
        }
        let numel = s[0] * s[1];
        if targets.len() != numel {
            return Err(Error::Shape(format!("{} targets for {numel} logits", targets.len())));
        }
        if numel == 0 {
            return Err(Error::Input("weighted_bce on an empty batch".into()));
        }
        if targets.iter().any(|&t| !(t == T::zero() || t == T::one())) {
            return Err(Error::Input("weighted_bce targets must be exactly 0 or 1".into()));
        }
        let ln2 = std::f64::consts::LN_2;
        let mut loss = 0.0f64;
        {
            let z = self.value(logits).data();
            for (zi, ti) in z.iter().zip(targets) {
                let zf = zi.as_f64();
                let y = ti.as_f64();
                // softplus(t) = max(t,0) + ln(1 + exp(-|t|)) is stable for all t.
                let sp_pos = zf.max(0.0) + (-zf.abs()).exp().ln_1p();
                let sp_neg = (-zf).max(0.0) + (-zf.abs()).exp().ln_1p();
                loss += y * (sp_neg - ln2) + (1.0 - y) * sp_pos;
            }
        }
        loss /= numel as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::WeightedBce { logits, targets: targets.to_vec() },
            needs,
        ))
    }

    /// Run the backward pass from a scalar loss node, accumulating
    /// gradients into every bound parameter. Each node is visited exactly
    /// once, in reverse creation order.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs || self.nodes[i].grad.is_none() {
                continue;
            }
            let deltas = self.node_backward(i)?;
            for (pid, delta) in deltas {
                let parent = &mut self.nodes[pid.0];
                if !parent.needs {
                    continue;
                }
                match parent.grad.as_mut() {
                    Some(g) => {
                        for (gi, di) in g.iter_mut().zip(&delta) {
                            *gi += *di;
                        }
                    }
                    None => parent.grad = Some(delta),
                }
            }
        }
        // Flush leaf gradients into their parameters.
        for node in &self.nodes {
            if let (Op::Leaf(p), Some(g)) = (&node.op, node.grad.as_ref()) {
                p.borrow_mut().accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its parents.
    fn node_backward(&self, i: usize) -> Result<Vec<(NodeId, Vec<T>)>> {
        let node = &self.nodes[i];
        let g = node.grad.as_ref().expect("caller checked");
        let out = match &node.op {
            Op::Input | Op::Leaf(_) => Vec::new(),
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut res = Vec::new();
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, T::one(), g, self.value(*b).data(), T::zero(), &mut da);
                    res.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, T::one(), self.value(*a).data(), g, T::zero(), &mut db);
                    res.push((*b, db));
                }
                res
            }
            Op::Dense { x, w, b } => {
                let (sx, sw) = (self.value(*x).shape(), self.value(*w).shape());
                let (n, din, dout) = (sx[0], sx[1], sw[1]);
                let mut res = Vec::new();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    kernels::gemm_nt(n, dout, din, T::one(), g, self.value(*w).data(), T::zero(), &mut dx);
                    res.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    kernels::gemm_tn(din, n, dout, T::one(), self.value(*x).data(), g, T::zero(), &mut dw);
                    res.push((*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); dout];
                    for r in 0..n {
                        for c in 0..dout {
                            db[c] += g[r * dout + c];
                        }
                    }
                    res.push((*b, db));
                }
                res
            }
            Op::Conv2d { x, w, b, k, pad } => {
                let (sx, sw) = (self.value(*x).shape(), self.value(*w).shape());
                let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let f = sw[0];
                let (hw, ckk) = (h * wd, c * k * k);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut res = Vec::new();
                let (need_x, need_w, need_b) = (self.needs(*x), self.needs(*w), self.needs(*b));
                let mut dw = if need_w { vec![T::zero(); f * ckk] } else { Vec::new() };
                let mut dx = if need_x { vec![T::zero(); n * c * hw] } else { Vec::new() };
                let mut db = if need_b { vec![T::zero(); f] } else { Vec::new() };
                let mut cols = vec![T::zero(); ckk * hw];
                for ni in 0..n {
                    let gn = &g[ni * f * hw..(ni + 1) * f * hw];
                    if need_w {
                        // dW += g_n . cols^T  (cols recomputed to save memory)
                        kernels::im2col(&xv[ni * c * hw..(ni + 1) * c * hw], c, h, wd, *k, *pad, &mut cols);
                        kernels::gemm_nt(f, hw, ckk, T::one(), gn, &cols, T::one(), &mut dw);
                    }
                    if need_x {
                        // cols_g = W^T . g_n, then fold back onto the image.
                        kernels::gemm_tn(ckk, f, hw, T::one(), wv, gn, T::zero(), &mut cols);
                        kernels::col2im_add(&cols, c, h, wd, *k, *pad, &mut dx[ni * c * hw..(ni + 1) * c * hw]);
                    }
                    if need_b {
                        for fi in 0..f {
                            let mut acc = T::zero();
                            for v in &gn[fi * hw..(fi + 1) * hw] {
                                acc += *v;
                            }
                            db[fi] += acc;
                        }
                    }
                }
                if need_x {
                    res.push((*x, dx));
                }
                if need_w {
                    res.push((*w, dw));
                }
                if need_b {
                    res.push((*b, db));
                }
                res
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += g[o];
                }
                vec![(*x, dx)]
            }
            Op::Relu { x } => {
                let y = node.value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| if yi > T::zero() { gi } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect();
                vec![(*x, dx)]
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(&gi, &yi)| gi * (T::one() - yi * yi)).collect();
                vec![(*x, dx)]
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let lane = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lane * inner + i;
                        let mut dot = 0.0f64;
                        for l in 0..lane {
                            let idx = base + l * inner;
                            dot += (g[idx] * y[idx]).as_f64();
                        }
                        let dot = T::from_f64(dot);
                        for l in 0..lane {
                            let idx = base + l * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let m = (n * s) as f64;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut res = Vec::new();
                // Per-channel reductions, accumulated in f64.
                let mut s1 = vec![0.0f64; c];
                let mut s2 = vec![0.0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        for si in 0..s {
                            let gi = g[base + si].as_f64();
                            let xh = (xv[base + si].as_f64() - mean[ci]) * inv_std[ci];
                            s1[ci] += gi;
                            s2[ci] += gi * xh;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * s;
                            let gscale = gv[ci].as_f64() * inv_std[ci];
                            for si in 0..s {
                                let gi = g[base + si].as_f64();
                                let v = if *batch_stats {
                                    let xh = (xv[base + si].as_f64() - mean[ci]) * inv_std[ci];
                                    gscale * (gi - (s1[ci] + xh * s2[ci]) / m)
                                } else {
                                    gscale * gi
                                };
                                dx[base + si] = T::from_f64(v);
                            }
                        }
                    }
                    res.push((*x, dx));
                }
                if self.needs(*gamma) {
                    res.push((*gamma, s2.iter().map(|&v| T::from_f64(v)).collect()));
                }
                if self.needs(*beta) {
                    res.push((*beta, s1.iter().map(|&v| T::from_f64(v)).collect()));
                }
                res
            }
            Op::Dropout { x, scale, mask } => {
                let dx = g
                    .iter()
                    .zip(mask)
                    .map(|(&gi, &m)| if m { gi * *scale } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Add { a, b } => {
                let mut res = Vec::new();
                if self.needs(*a) {
                    res.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    res.push((*b, g.clone()));
                }
                res
            }
            Op::Sub { a, b } => {
                let mut res = Vec::new();
                if self.needs(*a) {
                    res.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    res.push((*b, g.iter().map(|&v| -v).collect()));
                }
                res
            }
            Op::Mul { a, b } => {
                let mut res = Vec::new();
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    res.push((*a, g.iter().zip(bv).map(|(&gi, &v)| gi * v).collect()));
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    res.push((*b, g.iter().zip(av).map(|(&gi, &v)| gi * v).collect()));
                }
                res
            }
            Op::ScaleBy { alpha, x } => {
                let av = self.value(*alpha).data()[0];
                let mut res = Vec::new();
                if self.needs(*alpha) {
                    let xv = self.value(*x).data();
                    let mut acc = 0.0f64;
                    for (gi, xi) in g.iter().zip(xv) {
                        acc += (*gi * *xi).as_f64();
                    }
                    res.push((*alpha, vec![T::from_f64(acc)]));
                }
                if self.needs(*x) {
                    res.push((*x, g.iter().map(|&gi| gi * av).collect()));
                }
                res
            }
            Op::Affine { x, mul } => {
                vec![(*x, g.iter().map(|&gi| gi * *mul).collect())]
            }
            Op::SumAll { x } => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0]; n])]
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).numel();
                let s = g[0] / T::from_usize(n);
                vec![(*x, vec![s; n])]
            }
            Op::Reshape { x } => vec![(*x, g.clone())],
            Op::ConcatCols { xs } => {
                let total = node.value.shape()[1];
                let n = node.value.shape()[0];
                let mut res = Vec::new();
                let mut col = 0usize;
                for &x in xs {
                    let d = self.value(x).shape()[1];
                    if self.needs(x) {
                        let mut dx = vec![T::zero(); n * d];
                        for r in 0..n {
                            dx[r * d..(r + 1) * d]
                                .copy_from_slice(&g[r * total + col..r * total + col + d]);
                        }
                        res.push((x, dx));
                    }
                    col += d;
                }
                res
            }
            Op::SliceCols { x, start } => {
                let d = self.value(*x).shape()[1];
                let len = node.value.shape()[1];
                let n = node.value.shape()[0];
                let mut dx = vec![T::zero(); n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![(*x, dx)]
            }
            Op::PadCols { x } => {
                let d = self.value(*x).shape()[1];
                let to = node.value.shape()[1];
                let n = node.value.shape()[0];
                let mut dx = vec![T::zero(); n * d];
                for r in 0..n {
                    dx[r * d..(r + 1) * d].copy_from_slice(&g[r * to..r * to + d]);
                }
                vec![(*x, dx)]
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let k = self.value(*logits).shape()[1];
                let n = labels.len();
                let scale = g[0] / T::from_usize(n);
                let mut dz = vec![T::zero(); probs.len()];
                for r in 0..n {
                    let lbl = labels[r] as usize;
                    for c in 0..k {
                        let p = probs[r * k + c];
                        let y = if c == lbl { T::one() } else { T::zero() };
                        dz[r * k + c] = (p - y) * scale;
                    }
                }
                vec![(*logits, dz)]
            }
            Op::WeightedBce { logits, targets } => {
                let z = self.value(*logits).data();
                let scale = g[0] / T::from_usize(z.len());
                let dz = z
                    .iter()
                    .zip(targets)
                    .map(|(&zi, &ti)| (sigmoid_stable(zi) - ti) * scale)
                    .collect();
                vec![(*logits, dz)]
            }
        };
        Ok(out)
    }
}

fn sigmoid_stable<T: Scalar>(v: T) -> T {
    // Compute via exp of a non-positive argument to avoid overflow.
    if v >= T::zero() {
        let e = (-v).exp();
        T::one() / (T::one() + e)
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softmax_lanes<T: Scalar>(data: &mut [T], outer: usize, lane: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut m = data[base];
            for l in 1..lane {
                let v = data[base + l * inner];
                if v > m {
                    m = v;
                }
            }
            let mut denom = 0.0f64;
            for l in 0..lane {
                denom += (data[base + l * inner] - m).as_f64().exp();
            }
            for l in 0..lane {
                let idx = base + l * inner;
                data[idx] = T::from_f64((data[idx] - m).as_f64().exp() / denom);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn param(shape: &[usize], data: Vec<f64>) -> Param<f64> {
        Param::new(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn matmul_forward_matches_hand_case() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let a = g.input(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.input(Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::<f32>::new(Mode::Eval);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        let c = g.input(Tensor::zeros(&[2, 4]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn diamond_reuse_accumulates_gradient() {
        // loss = sum(x * x) => dloss/dx = 2x via two paths into Mul.
        let mut g = Graph::<f64>::new(Mode::Train);
        let p = param(&[3], vec![1.0, -2.0, 3.0]);
        let x = g.param(&p);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(p.borrow().grad().unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn same_param_bound_twice_accumulates() {
        // loss = sum(x) + sum(x) built from two separate leaf bindings.
        let p = param(&[2], vec![1.0, 1.0]);
        let mut g = Graph::<f64>::new(Mode::Train);
        let x1 = g.param(&p);
        let x2 = g.param(&p);
        let s1 = g.sum_all(x1).unwrap();
        let s2 = g.sum_all(x2).unwrap();
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(p.borrow().grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn grads_survive_across_graphs_until_zeroed() {
        let p = param(&[1], vec![5.0]);
        for _ in 0..3 {
            let mut g = Graph::<f64>::new(Mode::Train);
            let x = g.param(&p);
            let loss = g.sum_all(x).unwrap();
            g.backward(loss).unwrap();
        }
        assert_eq!(p.borrow().grad().unwrap(), &[3.0]);
        p.zero_grad();
        assert_eq!(p.borrow().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new(Mode::Train);
        let p = param(&[2], vec![1.0, 2.0]);
        let x = g.param(&p);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreachable_param_keeps_zero_grad() {
        let p = param(&[2], vec![1.0, 2.0]);
        let q = param(&[2], vec![3.0, 4.0]);
        let mut g = Graph::<f64>::new(Mode::Train);
        let x = g.param(&p);
        let _unused = g.param(&q);
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(p.borrow().grad().unwrap(), &[1.0, 1.0]);
        assert_eq!(q.borrow().grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_lanes_sum_to_one() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.input(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let d = g.value(y).data();
        for r in 0..2 {
            let s: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Softmax is monotone in the logits.
        assert!(d[0] < d[1] && d[1] < d[2]);
    }

    #[test]
    fn softmax_is_shift_invariant_and_overflow_safe() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.input(Tensor::new(&[1, 3], vec![1000.0, 1001.0, 1002.0]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let a = g.value(y).data().to_vec();
        let x2 = g.input(Tensor::new(&[1, 3], vec![0.0, 1.0, 2.0]).unwrap());
        let y2 = g.softmax(x2, 1).unwrap();
        let b = g.value(y2).data();
        for (u, v) in a.iter().zip(b) {
            assert!((u - v).abs() < 1e-12);
            assert!(u.is_finite());
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_k() {
        for k in [2usize, 4, 10] {
            let mut g = Graph::<f64>::new(Mode::Eval);
            let z = g.input(Tensor::zeros(&[3, k]));
            let loss = g.softmax_cross_entropy(z, &[0, (k - 1) as u32, 1]).unwrap();
            let want = (k as f64).ln();
            assert!((g.value(loss).item().unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let z = g.input(Tensor::zeros(&[2, 3]));
        assert!(g.softmax_cross_entropy(z, &[0, 3]).is_err());
        assert!(g.softmax_cross_entropy(z, &[0]).is_err());
    }

    #[test]
    fn weighted_bce_analytic_points() {
        // z = 0, y = 1: -ln(2 * 0.5) = 0.   z = 0, y = 0: -ln(0.5) = ln 2.
        let mut g = Graph::<f64>::new(Mode::Eval);
        let z = g.input(Tensor::zeros(&[1, 1]));
        let l1 = g.weighted_bce(z, &[1.0]).unwrap();
        assert!(g.value(l1).item().unwrap().abs() < 1e-12);
        let z2 = g.input(Tensor::zeros(&[1, 1]));
        let l0 = g.weighted_bce(z2, &[0.0]).unwrap();
        assert!((g.value(l0).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn weighted_bce_is_stable_and_min_is_minus_ln2() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let z = g.input(Tensor::new(&[1, 2], vec![500.0, -500.0]).unwrap());
        let l = g.weighted_bce(z, &[1.0, 0.0]).unwrap();
        // Both elements are at their optimum: positive hits -ln2, negative hits 0.
        let want = -std::f64::consts::LN_2 / 2.0;
        let got = g.value(l).item().unwrap();
        assert!(got.is_finite());
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn weighted_bce_rejects_soft_targets() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let z = g.input(Tensor::zeros(&[1, 2]));
        assert!(g.weighted_bce(z, &[0.5, 1.0]).is_err());
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f32>::new(Mode::Train);
        let x = g.input(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y); // literally the same node
        // And no randomness was consumed: a fresh rng stays in sync.
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(rng.gen::<u64>(), rng2.gen::<u64>());
    }

    #[test]
    fn dropout_eval_mode_is_identity_and_train_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f32>::new(Mode::Eval);
        let x = g.input(Tensor::filled(&[4, 4], 1.0));
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        assert_eq!(x, y);

        let mut gt = Graph::<f32>::new(Mode::Train);
        let x = gt.input(Tensor::filled(&[100, 10], 1.0));
        let y = gt.dropout(x, 0.5, &mut rng).unwrap();
        let d = gt.value(y).data();
        // Survivors are exactly 1/(1-p) = 2, the rest are 0.
        assert!(d.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = d.iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 350 && kept < 650, "kept {kept} of 1000");
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f32>::new(Mode::Train);
        let x = g.input(Tensor::zeros(&[2]));
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
        assert!(g.dropout(x, -0.1, &mut rng).is_err());
    }

    #[test]
    fn batchnorm_normalizes_batch_in_train_mode() {
        let mut state = BnState::new(2, 0.9, 1e-5);
        let gamma = param(&[2], vec![1.0, 1.0]);
        let beta = param(&[2], vec![0.0, 0.0]);
        let mut g = Graph::<f64>::new(Mode::Train);
        let x = g.input(Tensor::new(&[4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap());
        let gm = g.param(&gamma);
        let bt = g.param(&beta);
        let y = g.batchnorm(x, gm, bt, &mut state).unwrap();
        let d = g.value(y).data();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).map(|r| d[r * 2 + c]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
        // Running stats moved toward the batch moments.
        assert!((state.running_mean[0] - 0.1 * 2.5).abs() < 1e-12);
        assert_eq!(state.batches_seen, 1);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats_and_preserves_state() {
        let mut state = BnState::new(1, 0.9, 1e-5);
        state.running_mean[0] = 1.0;
        state.running_var[0] = 4.0;
        let gamma = param(&[1], vec![1.0]);
        let beta = param(&[1], vec![0.0]);
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.input(Tensor::new(&[2, 1], vec![3.0, 5.0]).unwrap());
        let gm = g.param(&gamma);
        let bt = g.param(&beta);
        let y = g.batchnorm(x, gm, bt, &mut state).unwrap();
        let d = g.value(y).data();
        let istd = 1.0 / (4.0f64 + 1e-5).sqrt();
        assert!((d[0] - 2.0 * istd).abs() < 1e-12);
        assert!((d[1] - 4.0 * istd).abs() < 1e-12);
        assert_eq!(state.batches_seen, 0);
        assert_eq!(state.running_mean[0], 1.0);
    }

    #[test]
    fn concat_slice_pad_round_trip() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let a = g.input(Tensor::new(&[2, 2], vec![1.0, 2.0, 5.0, 6.0]).unwrap());
        let b = g.input(Tensor::new(&[2, 1], vec![3.0, 7.0]).unwrap());
        let cat = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(cat).shape(), &[2, 3]);
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        let sl = g.slice_cols(cat, 2, 1).unwrap();
        assert_eq!(g.value(sl).data(), &[3.0, 7.0]);
        let pad = g.pad_cols(sl, 3).unwrap();
        assert_eq!(g.value(pad).data(), &[3.0, 0.0, 0.0, 7.0, 0.0, 0.0]);
        // Padding to the current width is the identity.
        let same = g.pad_cols(sl, 1).unwrap();
        assert_eq!(same, sl);
    }

    #[test]
    fn scale_by_scalar_node() {
        let mut g = Graph::<f64>::new(Mode::Train);
        let alpha = param(&[], vec![0.5]);
        let a = g.param(&alpha);
        let x = g.input(Tensor::new(&[2], vec![4.0, 8.0]).unwrap());
        let y = g.scale(a, x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        // d loss / d alpha = sum(x) = 12
        assert_eq!(alpha.borrow().grad().unwrap(), &[12.0]);
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let p = param(&[4, 3], (0..12).map(|i| (i as f64) * 0.37 - 1.7).collect());
        let b = param(&[3], vec![0.1, -0.2, 0.3]);
        let run = || {
            let mut g = Graph::<f64>::new(Mode::Eval);
            let x = g.input(Tensor::new(&[2, 4], (0..8).map(|i| (i as f64).sin()).collect()).unwrap());
            let w = g.param(&p);
            let bias = g.param(&b);
            let h = g.dense(x, w, bias).unwrap();
            let h = g.tanh(h).unwrap();
            let s = g.softmax(h, 1).unwrap();
            g.value(s).data().to_vec()
        };
        let a = run();
        let c = run();
        assert!(a.iter().zip(&c).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
