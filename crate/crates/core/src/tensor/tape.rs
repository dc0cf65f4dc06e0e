//! Wengert-list reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value and whatever it needs for
//! the backward rule. Nodes only reference earlier nodes, so replaying the
//! list in reverse visits each node after all of its consumers.

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which axes a per-channel statistic reduces over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatScope {
    /// Reduce over N, H and W: one value per channel.
    #[default]
    Minibatch,
    /// Reduce over H and W: one value per sample and channel.
    PerInstance,
}

/// Running mean/variance buffers of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics and fold them into `running`.
    Train {
        running: &'a mut RunningStats,
        momentum: f64,
    },
    /// Normalize with the stored running statistics.
    Eval { running: &'a RunningStats },
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sqrt(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    AddChannelBias {
        input: Var,
        bias: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    ChannelMean {
        input: Var,
        scope: StatScope,
    },
    BroadcastChannels {
        input: Var,
        scope: StatScope,
    },
    MeanAll(Var),
    Mse {
        pred: Var,
        diff: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<f64>,
        mask: Option<Vec<bool>>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it is a leaf that
    /// requires grad and the loss depends on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Records a computation for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `tensor` as an input. Gradients are tracked iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records a copy of `tensor` as a trainable input.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let t = Tensor::from_parts(tensor.shape().to_vec(), tensor.data().to_vec());
        self.push(t, Op::Leaf, true)
    }

    /// Records `tensor` as a constant; no gradient ever flows into it.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// A constant copy of `v`'s current value, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone().with_requires_grad(false);
        self.constant(t)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Elementwise square root; the input must be strictly positive.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || !x.is_finite()) {
            return Err(Error::invalid("sqrt", format!("argument {bad} is not positive")));
        }
        let out = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sqrt(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = *shape
            .first()
            .ok_or_else(|| Error::invalid("flatten", "scalar tensor"))?;
        let rest = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// 2-D cross-correlation of an NCHW input with an OIKK kernel, zero padded.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (o, i, kh, kw) = self.value(kernel).dims4().map_err(|_| {
            Error::shape("conv2d", self.shape(input), self.shape(kernel))
        })?;
        if i != c || kh != kw {
            return Err(Error::shape("conv2d", self.shape(input), self.shape(kernel)));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "kernel {:?} larger than padded input {:?}",
                    self.shape(kernel),
                    self.shape(input)
                ),
            ));
        }
        let geom = ConvGeom {
            n,
            in_c: c,
            in_h: h,
            in_w: w,
            out_c: o,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
            k: kh,
            stride,
            pad: padding,
        };
        let data = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let out = Tensor::from_parts(vec![n, o, geom.out_h, geom.out_w], data);
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(out, Op::Conv2d { input, kernel, geom }, rg))
    }

    /// Transposed convolution (the adjoint of [`Tape::conv2d`]) with an IOKK kernel.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (i, o, kh, kw) = self.value(kernel).dims4().map_err(|_| {
            Error::shape("conv_transpose2d", self.shape(input), self.shape(kernel))
        })?;
        if i != c || kh != kw {
            return Err(Error::shape("conv_transpose2d", self.shape(input), self.shape(kernel)));
        }
        if stride == 0 {
            return Err(Error::invalid("conv_transpose2d", "stride must be at least 1"));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::invalid("conv_transpose2d", "padding removes the whole output"));
        }
        let geom = ConvGeom {
            n,
            in_c: c,
            in_h: h,
            in_w: w,
            out_c: o,
            out_h: full_h - 2 * padding,
            out_w: full_w - 2 * padding,
            k: kh,
            stride,
            pad: padding,
        };
        let data = kernels::conv_transpose2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let out = Tensor::from_parts(vec![n, o, geom.out_h, geom.out_w], data);
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(out, Op::ConvTranspose2d { input, kernel, geom }, rg))
    }

    /// Adds `bias[c]` to every element of channel `c` of an NCHW tensor.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(input).dims4()?;
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_channel_bias", self.shape(input), self.shape(bias)));
        }
        let plane = h * w;
        let b = self.value(bias).data();
        let data = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| x + b[(idx / plane) % c])
            .collect();
        let out = Tensor::from_parts(self.shape(input).to_vec(), data);
        let rg = self.rg(&[input, bias]);
        Ok(self.push(out, Op::AddChannelBias { input, bias }, rg))
    }

    /// `x W^T + b` with `x: [rows, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (rows, inp) = self.value(input).dims2()?;
        let (out, win) = self
            .value(weight)
            .dims2()
            .map_err(|_| Error::shape("linear", self.shape(input), self.shape(weight)))?;
        if win != inp {
            return Err(Error::shape("linear", self.shape(input), self.shape(weight)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out] {
                return Err(Error::shape("linear", self.shape(weight), self.shape(b)));
            }
        }
        let data = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            rows,
            inp,
            out,
        );
        let value = Tensor::from_parts(vec![rows, out], data);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Per-channel batch normalization of an NCHW tensor followed by the
    /// affine `gamma * xhat + beta`.
    pub fn batch_norm2d(&mut self, input: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm2d", self.shape(input), self.shape(gamma)));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::invalid("batch_norm2d", format!("eps must be positive, got {eps}")));
        }
        let plane = h * w;
        let count = n * plane;
        let x = self.value(input).data();
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        let train = matches!(mode, BatchNormMode::Train { .. });
        match &mode {
            BatchNormMode::Train { running, .. } => {
                if count < 2 {
                    return Err(Error::invalid(
                        "batch_norm2d",
                        "train mode needs more than one value per channel",
                    ));
                }
                if running.mean.len() != c || running.var.len() != c {
                    return Err(Error::shape("batch_norm2d", &[c], &[running.mean.len()]));
                }
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += x[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut v = 0.0;
                    for b in 0..n {
                        v += x[(b * c + ch) * plane..][..plane].iter().map(|&e| (e - m) * (e - m)).sum::<f64>();
                    }
                    means[ch] = m;
                    vars[ch] = v / count as f64;
                }
            }
            BatchNormMode::Eval { running } => {
                if running.mean.len() != c || running.var.len() != c {
                    return Err(Error::shape("batch_norm2d", &[c], &[running.mean.len()]));
                }
                means.copy_from_slice(&running.mean);
                vars.copy_from_slice(&running.var);
            }
        }
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for (idx, (&xi, (xh, yi))) in x.iter().zip(xhat.iter_mut().zip(y.iter_mut())).enumerate() {
            let ch = (idx / plane) % c;
            *xh = (xi - means[ch]) * inv_std[ch];
            *yi = g[ch] * *xh + bt[ch];
        }
        if let BatchNormMode::Train { running, momentum } = mode {
            let unbias = count as f64 / (count - 1) as f64;
            for ch in 0..c {
                running.mean[ch] = (1.0 - momentum) * running.mean[ch] + momentum * means[ch];
                running.var[ch] = (1.0 - momentum) * running.var[ch] + momentum * vars[ch] * unbias;
            }
        }
        let out = Tensor::from_parts(vec![n, c, h, w], y);
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let last = *v
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("softmax", "tensor has no axis to normalize over"))?;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(last) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Max pooling with a square window and stride equal to the window.
    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        if window == 0 || dims.2 < window || dims.3 < window {
            return Err(Error::invalid(
                "max_pool2d",
                format!("window {window} does not fit input {:?}", self.shape(input)),
            ));
        }
        let (data, argmax) = kernels::max_pool2d_forward(self.value(input).data(), dims, window);
        let out = Tensor::from_parts(vec![dims.0, dims.1, dims.2 / window, dims.3 / window], data);
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, rg))
    }

    /// Per-channel mean of an NCHW tensor: shape `[C]` for the minibatch
    /// scope, `[N, C]` per instance.
    pub fn channel_mean(&mut self, input: Var, scope: StatScope) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let plane = h * w;
        let x = self.value(input).data();
        let out = match scope {
            StatScope::Minibatch => {
                let count = (n * plane) as f64;
                let data = (0..c)
                    .map(|ch| {
                        let mut s = 0.0;
                        for b in 0..n {
                            s += x[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
                        }
                        s / count
                    })
                    .collect();
                Tensor::from_parts(vec![c], data)
            }
            StatScope::PerInstance => {
                let data = x.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
                Tensor::from_parts(vec![n, c], data)
            }
        };
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::ChannelMean { input, scope }, rg))
    }

    /// Expands `[C]` (minibatch) or `[N, C]` (per instance) statistics to the
    /// NCHW shape `like`.
    pub fn broadcast_channels(&mut self, input: Var, scope: StatScope, like: &[usize]) -> Result<Var> {
        let &[n, c, h, w] = like else {
            return Err(Error::invalid("broadcast_channels", format!("target {like:?} is not NCHW")));
        };
        let expect: Vec<usize> = match scope {
            StatScope::Minibatch => vec![c],
            StatScope::PerInstance => vec![n, c],
        };
        if self.shape(input) != expect.as_slice() {
            return Err(Error::shape("broadcast_channels", self.shape(input), like));
        }
        let plane = h * w;
        let v = self.value(input).data();
        let mut data = Vec::with_capacity(n * c * plane);
        for b in 0..n {
            for ch in 0..c {
                let val = match scope {
                    StatScope::Minibatch => v[ch],
                    StatScope::PerInstance => v[b * c + ch],
                };
                data.extend(std::iter::repeat_n(val, plane));
            }
        }
        let out = Tensor::from_parts(like.to_vec(), data);
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::BroadcastChannels { input, scope }, rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanAll(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let m = self.mean_all(a);
        self.scale(m, n)
    }

    /// Mean squared error against a fixed target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.mse_impl(pred, target, None)
    }

    /// Mean squared error over the elements where `keep` is true; 0 when
    /// none are kept. Masked elements are never read.
    pub fn masked_mse_loss(&mut self, pred: Var, target: &Tensor, keep: &[bool]) -> Result<Var> {
        if keep.len() != target.numel() {
            return Err(Error::shape("masked_mse_loss", target.shape(), &[keep.len()]));
        }
        self.mse_impl(pred, target, Some(keep))
    }

    fn mse_impl(&mut self, pred: Var, target: &Tensor, mask: Option<&[bool]>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("mse_loss", self.shape(pred), target.shape()));
        }
        let p = self.value(pred).data();
        let mut diff = vec![0.0; p.len()];
        let mut sum = 0.0;
        let mut count = 0;
        for (i, (&pi, &ti)) in p.iter().zip(target.data()).enumerate() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let d = pi - ti;
            diff[i] = d;
            sum += d * d;
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { sum / count as f64 };
        let rg = self.rg(&[pred]) && count > 0;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse { pred, diff, count },
            rg,
        ))
    }

    /// Sigmoid binary cross-entropy on logits, averaged over all elements.
    /// Targets must lie in [0, 1].
    pub fn bce_with_logits_loss(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        self.bce_impl(logits, target, None)
    }

    /// BCE averaged over the elements where `keep` is true; 0 when none are.
    pub fn masked_bce_with_logits_loss(&mut self, logits: Var, target: &Tensor, keep: &[bool]) -> Result<Var> {
        if keep.len() != target.numel() {
            return Err(Error::shape("masked_bce_with_logits_loss", target.shape(), &[keep.len()]));
        }
        self.bce_impl(logits, target, Some(keep.to_vec()))
    }

    fn bce_impl(&mut self, logits: Var, target: &Tensor, mask: Option<Vec<bool>>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::shape("bce_with_logits_loss", self.shape(logits), target.shape()));
        }
        let x = self.value(logits).data();
        let mut sum = 0.0;
        let mut count = 0;
        for (i, (&xi, &ti)) in x.iter().zip(target.data()).enumerate() {
            if mask.as_ref().is_some_and(|m| !m[i]) {
                continue;
            }
            if !(0.0..=1.0).contains(&ti) {
                return Err(Error::invalid(
                    "bce_with_logits_loss",
                    format!("target {ti} at index {i} outside [0, 1]"),
                ));
            }
            sum += xi.max(0.0) - xi * ti + (-xi.abs()).exp().ln_1p();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { sum / count as f64 };
        let rg = self.rg(&[logits]) && count > 0;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
                mask,
                count,
            },
            rg,
        ))
    }

    /// Back-propagates from the scalar `loss` and returns the gradient of
    /// every reachable leaf that requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: &dyn Fn() -> Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let c = contrib();
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(c) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(c),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|| g.to_vec());
                acc(*b, &|| g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, &|| g.to_vec());
                acc(*b, &|| g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|| g.iter().zip(vb).map(|(x, y)| x * y).collect());
                acc(*b, &|| g.iter().zip(va).map(|(x, y)| x * y).collect());
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                let out = node.value.data();
                acc(*a, &|| g.iter().zip(vb).map(|(x, y)| x / y).collect());
                acc(*b, &|| {
                    g.iter()
                        .zip(out.iter().zip(vb))
                        .map(|(x, (q, y))| -x * q / y)
                        .collect()
                });
            }
            Op::Scale(a, c) => acc(*a, &|| g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &|| g.to_vec()),
            Op::Sqrt(a) => {
                let out = node.value.data();
                acc(*a, &|| g.iter().zip(out).map(|(x, s)| x * 0.5 / s).collect());
            }
            Op::Conv2d { input, kernel, geom } => {
                let (vi, vk) = (self.value(*input).data(), self.value(*kernel).data());
                acc(*input, &|| kernels::conv2d_backward_input(g, vk, geom));
                acc(*kernel, &|| kernels::conv2d_backward_kernel(g, vi, geom));
            }
            Op::ConvTranspose2d { input, kernel, geom } => {
                let (vi, vk) = (self.value(*input).data(), self.value(*kernel).data());
                acc(*input, &|| kernels::conv_transpose2d_backward_input(g, vk, geom));
                acc(*kernel, &|| kernels::conv_transpose2d_backward_kernel(g, vi, geom));
            }
            Op::AddChannelBias { input, bias } => {
                acc(*input, &|| g.to_vec());
                let (_, c, h, w) = node.value.dims4().expect("checked in forward");
                acc(*bias, &|| {
                    let mut gb = vec![0.0; c];
                    for (p, plane) in g.chunks(h * w).enumerate() {
                        gb[p % c] += plane.iter().sum::<f64>();
                    }
                    gb
                });
            }
            Op::Linear { input, weight, bias } => {
                let (rows, inp) = self.value(*input).dims2().expect("checked in forward");
                let out = node.value.shape()[1];
                let (vx, vw) = (self.value(*input).data(), self.value(*weight).data());
                acc(*input, &|| {
                    let mut gx = vec![0.0; rows * inp];
                    for r in 0..rows {
                        let gxr = &mut gx[r * inp..][..inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            for (e, wv) in gxr.iter_mut().zip(&vw[o * inp..][..inp]) {
                                *e += go * wv;
                            }
                        }
                    }
                    gx
                });
                acc(*weight, &|| {
                    let mut gw = vec![0.0; out * inp];
                    for r in 0..rows {
                        let xr = &vx[r * inp..][..inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            for (e, xv) in gw[o * inp..][..inp].iter_mut().zip(xr) {
                                *e += go * xv;
                            }
                        }
                    }
                    gw
                });
                if let Some(b) = bias {
                    acc(*b, &|| {
                        let mut gb = vec![0.0; out];
                        for row in g.chunks(out) {
                            for (e, x) in gb.iter_mut().zip(row) {
                                *e += x;
                            }
                        }
                        gb
                    });
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = node.value.dims4().expect("checked in forward");
                let plane = h * w;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                let gam = self.value(*gamma).data();
                let m = (n * plane) as f64;
                acc(*input, &|| {
                    let mut gi = vec![0.0; g.len()];
                    for (idx, e) in gi.iter_mut().enumerate() {
                        let ch = (idx / plane) % c;
                        *e = if *train {
                            gam[ch] * inv_std[ch] / m * (m * g[idx] - sum_g[ch] - xhat[idx] * sum_gx[ch])
                        } else {
                            g[idx] * gam[ch] * inv_std[ch]
                        };
                    }
                    gi
                });
                acc(*gamma, &|| sum_gx.clone());
                acc(*beta, &|| sum_g.clone());
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(*a, &|| {
                    g.iter()
                        .zip(va)
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect()
                });
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                acc(*a, &|| g.iter().zip(out).map(|(x, s)| x * s * (1.0 - s)).collect());
            }
            Op::Softmax(a) => {
                let out = node.value.data();
                let last = *node.value.shape().last().expect("checked in forward");
                acc(*a, &|| {
                    let mut gi = vec![0.0; g.len()];
                    for ((gr, sr), dst) in g.chunks(last).zip(out.chunks(last)).zip(gi.chunks_mut(last)) {
                        let dot: f64 = gr.iter().zip(sr).map(|(x, s)| x * s).sum();
                        for ((d, x), s) in dst.iter_mut().zip(gr).zip(sr) {
                            *d = s * (x - dot);
                        }
                    }
                    gi
                });
            }
            Op::MaxPool2d { input, argmax } => {
                let len = self.value(*input).numel();
                acc(*input, &|| {
                    let mut gi = vec![0.0; len];
                    for (x, &src) in g.iter().zip(argmax) {
                        gi[src] += x;
                    }
                    gi
                });
            }
            Op::ChannelMean { input, scope } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("checked in forward");
                let plane = h * w;
                acc(*input, &|| {
                    let mut gi = Vec::with_capacity(n * c * plane);
                    for b in 0..n {
                        for ch in 0..c {
                            let v = match scope {
                                StatScope::Minibatch => g[ch] / (n * plane) as f64,
                                StatScope::PerInstance => g[b * c + ch] / plane as f64,
                            };
                            gi.extend(std::iter::repeat_n(v, plane));
                        }
                    }
                    gi
                });
            }
            Op::BroadcastChannels { input, scope } => {
                let (n, c, h, w) = node.value.dims4().expect("checked in forward");
                let plane = h * w;
                acc(*input, &|| {
                    let mut gi = vec![0.0; self.value(*input).numel()];
                    for b in 0..n {
                        for ch in 0..c {
                            let s: f64 = g[(b * c + ch) * plane..][..plane].iter().sum();
                            match scope {
                                StatScope::Minibatch => gi[ch] += s,
                                StatScope::PerInstance => gi[b * c + ch] += s,
                            }
                        }
                    }
                    gi
                });
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                acc(*a, &|| vec![g[0] / n as f64; n]);
            }
            Op::Mse { pred, diff, count } => {
                let k = 2.0 * g[0] / *count as f64;
                acc(*pred, &|| diff.iter().map(|d| k * d).collect());
            }
            Op::BceWithLogits {
                logits,
                target,
                mask,
                count,
            } => {
                let x = self.value(*logits).data();
                let k = g[0] / *count as f64;
                acc(*logits, &|| {
                    x.iter()
                        .zip(target)
                        .enumerate()
                        .map(|(i, (&xi, &ti))| {
                            if mask.as_ref().is_some_and(|m| !m[i]) {
                                0.0
                            } else {
                                k * (sigmoid(xi) - ti)
                            }
                        })
                        .collect()
                });
            }
        }
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
