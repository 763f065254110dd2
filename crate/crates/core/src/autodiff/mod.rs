//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order: inputs always exist before the node that consumes them.
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! gradients into the leaf tensors' gradient slots.

mod kernels;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub(crate) use kernels::{axpy, dot};
use kernels::ConvGeom;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation with a hand-written backward pass, e.g. the circuit layer.
///
/// The forward value is computed by the caller and handed to [`Graph::custom`].
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` where the input needs none).
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_output: &[T]) -> Vec<Option<Vec<T>>>;
}

/// Batch statistics observed by a batch-statistics normalization node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    /// Number of values per channel (N·H·W).
    pub count: usize,
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNormBatch {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormRunning {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Relu6(Var),
    Tanh(Var),
    Scale(Var, T),
    Add(Var, Var),
    Grl(Var, T),
    GlobalAvgPool(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    MeanSquaredNorm(Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape of tensor operations.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients (evaluation and adaptation).
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf; it tracks gradients iff the tensor asks for it and the
    /// graph has gradients enabled.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = self.grad_enabled && tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(false),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_op(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        let value = Tensor::new(shape, data).expect("op output shape is consistent");
        self.push(value, op, rg)
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [a, b, c, d] => Ok([a, b, c, d]),
            ref s => Err(Error::dim(op, "rank", format!("expected NCHW rank 4, got {s:?}"))),
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<[usize; 2]> {
        match *self.shape(v) {
            [a, b] => Ok([a, b]),
            ref s => Err(Error::dim(op, "rank", format!("expected rank 2, got {s:?}"))),
        }
    }

    /// Grouped 2-d cross-correlation. Kernel layout `[K, C/groups, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = self.dims4(input, OP)?;
        let [k, kc, kh, kw] = self.dims4(kernel, OP)?;
        if stride == 0 {
            return Err(Error::dim(OP, "stride", "stride must be positive"));
        }
        if groups == 0 || c % groups != 0 || k % groups != 0 {
            return Err(Error::dim(OP, "channel", format!("groups {groups} must divide C={c} and K={k}")));
        }
        if kc != c / groups {
            return Err(Error::dim(
                OP,
                "channel",
                format!("kernel expects {kc} input channels per group, input provides {}", c / groups),
            ));
        }
        if kh > h + 2 * padding {
            return Err(Error::dim(OP, "height", format!("kernel height {kh} exceeds padded input {}", h + 2 * padding)));
        }
        if kw > w + 2 * padding {
            return Err(Error::dim(OP, "width", format!("kernel width {kw} exceeds padded input {}", w + 2 * padding)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::dim(OP, "bias", format!("expected [{k}], got {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            padding,
            groups,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let mut out = kernels::conv_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        if let Some(b) = bias {
            let plane = geom.oh * geom.ow;
            let bd = self.value(b).data();
            for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
                let bv = bd[i % k];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push_op(
            &[n, k, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// Per-channel convolution; kernel layout `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let [_, c, _, _] = self.dims4(input, "depthwise_conv2d")?;
        let [kc, one, _, _] = self.dims4(kernel, "depthwise_conv2d")?;
        if kc != c || one != 1 {
            return Err(Error::dim(
                "depthwise_conv2d",
                "channel",
                format!("kernel [{kc}, {one}, ..] does not match {c} input channels"),
            ));
        }
        self.conv2d(input, kernel, None, stride, padding, c)
    }

    fn check_bn_affine(&self, input: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
        let dims = self.dims4(input, "batchnorm2d")?;
        let c = dims[1];
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(p) != [c] {
                return Err(Error::dim("batchnorm2d", "channel", format!("{name} expects [{c}], got {:?}", self.shape(p))));
            }
        }
        Ok(dims)
    }

    /// Normalizes each channel by the statistics of the current batch.
    ///
    /// Returns the observed statistics so the caller can blend them into its
    /// running estimates.
    pub fn batch_norm_batch(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let [n, c, h, w] = self.check_bn_affine(input, gamma, beta)?;
        let hw = h * w;
        let count = n * hw;
        if count < 2 {
            return Err(Error::dim("batchnorm2d", "batch", "batch statistics need at least two values per channel"));
        }
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let inv_count = T::one() / T::from_usize(count).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for ni in 0..n {
                s += x[(ni * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
            let m = s * inv_count;
            let mut sq = T::zero();
            for ni in 0..n {
                sq += x[(ni * c + ch) * hw..][..hw].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
            mean[ch] = m;
            var[ch] = sq * inv_count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let rg = self.any_grad(&[input, gamma, beta]);
        let op = Op::BatchNormBatch {
            input,
            gamma,
            beta,
            xhat: if rg { xhat } else { Vec::new() },
            inv_std,
        };
        let v = self.push_op(&[n, c, h, w], out, op, &[input, gamma, beta]);
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Normalizes each channel with fixed (running) statistics.
    pub fn batch_norm_running(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let [n, c, h, w] = self.check_bn_affine(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batchnorm2d", "channel", "running statistics length differs from channel count"));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * hw;
                let (m, s) = (running_mean[ch], inv_std[ch]);
                for i in base..base + hw {
                    out[i] = g[ch] * ((x[i] - m) * s) + b[ch];
                }
            }
        }
        let op = Op::BatchNormRunning {
            input,
            gamma,
            beta,
            mean: running_mean.to_vec(),
            inv_std,
        };
        Ok(self.push_op(&[n, c, h, w], out, op, &[input, gamma, beta]))
    }

    /// `input · weightᵀ + bias` with weight `[G, F]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [n, f] = self.dims2(input, "linear")?;
        let [g, wf] = self.dims2(weight, "linear")?;
        if wf != f {
            return Err(Error::dim("linear", "features", format!("input has {f} features, weight expects {wf}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [g] {
                return Err(Error::dim("linear", "bias", format!("expected [{g}], got {:?}", self.shape(b))));
            }
        }
        let x = self.value(input).data();
        let wd = self.value(weight).data();
        let bd = bias.map(|b| self.value(b).data());
        let mut out = Vec::with_capacity(n * g);
        for row in x.chunks_exact(f) {
            for (gi, wrow) in wd.chunks_exact(f).enumerate() {
                let mut v = dot(row, wrow);
                if let Some(bd) = bd {
                    v += bd[gi];
                }
                out.push(v);
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push_op(&[n, g], out, Op::Linear { input, weight, bias }, &inputs))
    }

    fn unary(&mut self, input: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(input);
        let shape = value.shape().to_vec();
        let data = value.data().iter().map(|&v| f(v)).collect();
        self.push_op(&shape, data, op, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, |v| v.max(T::zero()), Op::Relu(input))
    }

    /// `min(max(x, 0), 6)`.
    pub fn relu6(&mut self, input: Var) -> Var {
        let six = T::lit(6.0);
        self.unary(input, |v| v.max(T::zero()).min(six), Op::Relu6(input))
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.unary(input, |v| v.tanh(), Op::Tanh(input))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        self.unary(input, |v| v * factor, Op::Scale(input, factor))
    }

    /// Gradient reversal: identity forward, `-λ·g` backward.
    pub fn grl(&mut self, input: Var, lambda: T) -> Var {
        self.unary(input, |v| v, Op::Grl(input, lambda))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", "shape", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let shape = self.shape(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push_op(&shape, data, Op::Add(a, b), &[a, b]))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let data = self
            .value(input)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push_op(&[n, c], data, Op::GlobalAvgPool(input), &[input]))
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "max_pool2d")?;
        if h < 2 || w < 2 {
            return Err(Error::dim("max_pool2d", "spatial", format!("{h}x{w} too small for 2x2 pooling")));
        }
        let (out, argmax) = kernels::max_pool2x2(self.value(input).data(), n, c, h, w);
        Ok(self.push_op(&[n, c, h / 2, w / 2], out, Op::MaxPool2d { input, argmax }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        Ok(self.push_op(shape, value.into_data(), Op::Reshape(input), &[input]))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [n, k] = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", "batch", format!("{n} rows but {} targets", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::dim("cross_entropy", "class", format!("target {t} outside 0..{k}")));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let mut loss = T::zero();
        for (row, &t) in self.value(logits).data().chunks_exact(k).zip(targets) {
            loss += log_sum_exp(row) - row[t];
        }
        loss /= T::from_usize(n).unwrap();
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push_op(&[1], vec![loss], op, &[logits]))
    }

    /// Batch mean of squared row norms of a `[N, F]` tensor.
    pub fn mean_squared_norm(&mut self, input: Var) -> Result<Var> {
        let [n, _] = self.dims2(input, "mean_squared_norm")?;
        let s: T = self.value(input).data().iter().map(|&v| v * v).sum();
        Ok(self.push_op(&[1], vec![s / T::from_usize(n).unwrap()], Op::MeanSquaredNorm(input), &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum();
        self.push_op(&[1], vec![s], Op::Sum(input), &[input])
    }

    /// Records a node whose forward value was computed externally.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Back-propagates from a scalar node, adding `d loss / d leaf` into the
    /// gradient slot of every gradient-tracking leaf.
    ///
    /// Calling it twice without clearing accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaf_grads.push((i, g));
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Clears every leaf gradient slot.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                if self.needs(*input) {
                    let gi = kernels::conv_backward_input(g, self.value(*kernel).data(), geom);
                    self.accumulate(grads, *input, gi);
                }
                if self.needs(*kernel) {
                    let gk = kernels::conv_backward_kernel(g, self.value(*input).data(), geom);
                    self.accumulate(grads, *kernel, gk);
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    let plane = geom.oh * geom.ow;
                    let mut gb = vec![T::zero(); geom.k];
                    for (idx, chunk) in g.chunks_exact(plane).enumerate() {
                        gb[idx % geom.k] += chunk.iter().copied().sum::<T>();
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            Op::BatchNormBatch {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = self.dims4(*input, "batchnorm2d").expect("validated at forward");
                let hw = h * w;
                let m = T::from_usize(n * hw).unwrap();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * hw;
                        for j in base..base + hw {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if self.needs(*input) {
                    let mut gi = vec![T::zero(); g.len()];
                    for ni in 0..n {
                        for ch in 0..c {
                            let base = (ni * c + ch) * hw;
                            let k = gam[ch] * inv_std[ch] / m;
                            for j in base..base + hw {
                                gi[j] = k * (m * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *input, gi);
                }
                self.accumulate(grads, *gamma, sum_gx);
                self.accumulate(grads, *beta, sum_g);
            }
            Op::BatchNormRunning {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let [n, c, h, w] = self.dims4(*input, "batchnorm2d").expect("validated at forward");
                let hw = h * w;
                let x = self.value(*input).data();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                let mut gi = vec![T::zero(); g.len()];
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * hw;
                        for j in base..base + hw {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * (x[j] - mean[ch]) * inv_std[ch];
                            gi[j] = g[j] * gam[ch] * inv_std[ch];
                        }
                    }
                }
                self.accumulate(grads, *input, gi);
                self.accumulate(grads, *gamma, sum_gx);
                self.accumulate(grads, *beta, sum_g);
            }
            Op::Linear { input, weight, bias } => {
                let [_, f] = self.dims2(*input, "linear").expect("validated at forward");
                let gdim = self.shape(*weight)[0];
                let x = self.value(*input).data();
                let wd = self.value(*weight).data();
                if self.needs(*input) {
                    let mut gi = vec![T::zero(); x.len()];
                    for (gi_row, g_row) in gi.chunks_exact_mut(f).zip(g.chunks_exact(gdim)) {
                        for (&gv, wrow) in g_row.iter().zip(wd.chunks_exact(f)) {
                            axpy(gi_row, wrow, gv);
                        }
                    }
                    self.accumulate(grads, *input, gi);
                }
                if self.needs(*weight) {
                    let mut gw = vec![T::zero(); wd.len()];
                    for (x_row, g_row) in x.chunks_exact(f).zip(g.chunks_exact(gdim)) {
                        for (gw_row, &gv) in gw.chunks_exact_mut(f).zip(g_row) {
                            axpy(gw_row, x_row, gv);
                        }
                    }
                    self.accumulate(grads, *weight, gw);
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    let mut gb = vec![T::zero(); gdim];
                    for g_row in g.chunks_exact(gdim) {
                        gb.iter_mut().zip(g_row).for_each(|(a, &v)| *a += v);
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gi = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, gi);
            }
            Op::Relu6(x) => {
                let xv = self.value(*x).data();
                let six = T::lit(6.0);
                let gi = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() && v < six { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, gi);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let gi = g.iter().zip(y).map(|(&gv, &t)| gv * (T::one() - t * t)).collect();
                self.accumulate(grads, *x, gi);
            }
            Op::Scale(x, factor) => {
                let gi = g.iter().map(|&gv| gv * *factor).collect();
                self.accumulate(grads, *x, gi);
            }
            Op::Grl(x, lambda) => {
                let gi = g.iter().map(|&gv| -(*lambda) * gv).collect();
                self.accumulate(grads, *x, gi);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.dims4(*x, "global_avg_pool").expect("validated at forward");
                let hw = h * w;
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut gi = Vec::with_capacity(g.len() * hw);
                for &gv in g {
                    gi.extend(std::iter::repeat_n(gv * inv, hw));
                }
                self.accumulate(grads, *x, gi);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![T::zero(); self.value(*input).numel()];
                for (&gv, &idx) in g.iter().zip(argmax) {
                    gi[idx] += gv;
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let n = T::from_usize(targets.len()).unwrap();
                let scale = g[0] / n;
                let mut gi = probs.clone();
                for (row, &t) in gi.chunks_exact_mut(k).zip(targets) {
                    row[t] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, gi);
            }
            Op::MeanSquaredNorm(x) => {
                let n = T::from_usize(self.shape(*x)[0]).unwrap();
                let k = T::lit(2.0) * g[0] / n;
                let gi = self.value(*x).data().iter().map(|&v| k * v).collect();
                self.accumulate(grads, *x, gi);
            }
            Op::Sum(x) => {
                let gi = vec![g[0]; self.value(*x).numel()];
                self.accumulate(grads, *x, gi);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let input_grads = op.backward(&values, &node.value, g);
                for (v, gi) in inputs.iter().zip(input_grads) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, *v, gi);
                    }
                }
            }
        }
    }
}

/// Numerically stable `log Σ exp(row)`.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Row-wise softmax of a flat `[N, K]` buffer.
pub fn softmax_rows<T: Real>(data: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut s = T::zero();
        for &v in row {
            let e = (v - m).exp();
            s += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    out
}

#[cfg(test)]
mod tests;
