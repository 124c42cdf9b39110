use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use super::kernels::{self, ConvGeom, Window};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::loss_metrics::{self, JaccardVariant};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
/// `var` is the unbiased estimate used for the running average.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormState<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn update(&mut self, stats: &ChannelStats) {
        let m = self.momentum;
        for (c, (mean, var)) in stats.mean.iter().zip(&stats.var).enumerate() {
            let rm = self.running_mean[c].as_f64();
            let rv = self.running_var[c].as_f64();
            self.running_mean[c] = T::from_f64_lossy((1.0 - m) * rm + m * mean);
            self.running_var[c] = T::from_f64_lossy((1.0 - m) * rv + m * var);
        }
    }

    pub fn cast<U: Real>(&self) -> BatchNormState<U> {
        BatchNormState {
            running_mean: self.running_mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            running_var: self.running_var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

enum Op<T> {
    Input,
    Param,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Relu(usize),
    Sigmoid(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Concat(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Sum(usize),
    Mean(usize),
    Log(usize),
    SoftmaxChannels(usize),
    Bce {
        probs: usize,
        labels: Tensor<T>,
    },
    SoftJaccard {
        probs: usize,
        labels: Tensor<T>,
        variant: JaccardVariant,
        eps: f64,
    },
    CategoricalCe {
        probs: usize,
        labels: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    graph: u64,
    params: Vec<(usize, Tensor<T>)>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the parameter registered under `key`. Every registered
    /// parameter has a slot; unreachable ones hold zeros.
    pub fn param(&self, key: usize) -> Option<&Tensor<T>> {
        self.params.iter().find(|(k, _)| *k == key).map(|(_, t)| t)
    }

    /// Parameter gradients in registration order.
    pub fn params(&self) -> &[(usize, Tensor<T>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(usize, Tensor<T>)> {
        self.params
    }

    /// Gradient of any node that required one (parameters and `leaf` inputs).
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        if var.graph != self.graph {
            return None;
        }
        self.nodes.get(var.index).and_then(|g| g.as_ref())
    }
}

/// Tape of eagerly evaluated operations.
///
/// Each builder method computes its value immediately and records how to
/// propagate gradients; [`Graph::backward`] walks the tape in reverse.
pub struct Graph<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: Vec<(usize, usize)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<R>(msg: String) -> Result<R> {
    Err(Error::Shape(msg))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    /// Drops every node. Handles issued before the call become invalid.
    pub fn clear(&mut self) {
        self.id = NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed);
        self.nodes.clear();
        self.params.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, var: Var) -> Result<usize> {
        if var.graph != self.id || var.index >= self.nodes.len() {
            return Err(Error::State(
                "variable does not belong to this graph's executed forward pass".into(),
            ));
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(var)?].value)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Non-parameter leaf whose gradient is reported by `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Trainable parameter identified by `key` in the returned gradients.
    pub fn param(&mut self, key: usize, value: Tensor<T>) -> Var {
        let var = self.push(value, Op::Param, true);
        self.params.push((key, var.index));
        var
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.index(x)?, self.index(w)?);
        let bi = b.map(|b| self.index(b)).transpose()?;
        let (n, c, h, wd) = self.nodes[xi].value.dims4()?;
        let (f, wc, kh, kw) = self.nodes[wi].value.dims4()?;
        if wc != c {
            return shape_err(format!("conv2d: input has {c} channels, kernel expects {wc}"));
        }
        if kh != kw {
            return shape_err(format!("conv2d: non-square kernel {kh}x{kw}"));
        }
        if stride == 0 {
            return shape_err("conv2d: stride must be >= 1".into());
        }
        if kh > h + 2 * pad || kh > wd + 2 * pad {
            return shape_err(format!("conv2d: kernel {kh} larger than padded input {h}x{wd}+{pad}"));
        }
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [f] {
                return shape_err(format!("conv2d: bias shape {:?}, expected [{f}]", self.nodes[bi].value.shape()));
            }
        }
        let win = Window { k: kh, stride, pad };
        let geom = ConvGeom {
            in_c: c,
            out_c: f,
            h,
            w: wd,
            oh: win.conv_out(h),
            ow: win.conv_out(wd),
            win,
        };
        let x_data = self.nodes[xi].value.data();
        let weight = self.nodes[wi].value.data();
        let bias = bi.map(|bi| self.nodes[bi].value.data());
        let (in_len, out_len) = (c * h * wd, f * geom.oh * geom.ow);
        let mut out = vec![T::zero(); n * out_len];
        out.par_chunks_mut(out_len)
            .zip(x_data.par_chunks(in_len))
            .for_each(|(o, xs)| kernels::conv_forward(&geom, xs, weight, bias, o));
        let value = Tensor::new(vec![n, f, geom.oh, geom.ow], out)?;
        let rg = self.needs(xi) || self.needs(wi) || bi.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { x: xi, w: wi, b: bi, geom }, rg))
    }

    /// Transposed convolution; `w` is `C_in x C_out x k x k`. Output extent
    /// is `(H - 1) * stride + k - 2 * pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xi, wi) = (self.index(x)?, self.index(w)?);
        let bi = b.map(|b| self.index(b)).transpose()?;
        let (n, c, h, wd) = self.nodes[xi].value.dims4()?;
        let (wc, f, kh, kw) = self.nodes[wi].value.dims4()?;
        if wc != c {
            return shape_err(format!("conv_transpose2d: input has {c} channels, kernel expects {wc}"));
        }
        if kh != kw {
            return shape_err(format!("conv_transpose2d: non-square kernel {kh}x{kw}"));
        }
        if stride == 0 {
            return shape_err("conv_transpose2d: stride must be >= 1".into());
        }
        if (h - 1) * stride + kh <= 2 * pad {
            return shape_err("conv_transpose2d: padding consumes the whole output".into());
        }
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [f] {
                return shape_err(format!("conv_transpose2d: bias shape {:?}, expected [{f}]", self.nodes[bi].value.shape()));
            }
        }
        let win = Window { k: kh, stride, pad };
        let geom = ConvGeom {
            in_c: c,
            out_c: f,
            h,
            w: wd,
            oh: win.transposed_out(h),
            ow: win.transposed_out(wd),
            win,
        };
        let x_data = self.nodes[xi].value.data();
        let weight = self.nodes[wi].value.data();
        let bias = bi.map(|bi| self.nodes[bi].value.data());
        let (in_len, out_len) = (c * h * wd, f * geom.oh * geom.ow);
        let mut out = vec![T::zero(); n * out_len];
        out.par_chunks_mut(out_len)
            .zip(x_data.par_chunks(in_len))
            .for_each(|(o, xs)| kernels::conv_transpose_forward(&geom, xs, weight, bias, o));
        let value = Tensor::new(vec![n, f, geom.oh, geom.ow], out)?;
        let rg = self.needs(xi) || self.needs(wi) || bi.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::ConvTranspose2d { x: xi, w: wi, b: bi, geom }, rg))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xi = self.index(x)?;
        let (n, c, h, w) = self.nodes[xi].value.dims4()?;
        if k == 0 || stride == 0 || k > h || k > w {
            return shape_err(format!("max_pool2d: window {k}/{stride} invalid for {h}x{w}"));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let planes = n * c;
        let mut out = vec![T::zero(); planes * oh * ow];
        let mut argmax = vec![0usize; planes * oh * ow];
        let data = self.nodes[xi].value.data();
        out.par_chunks_mut(oh * ow)
            .zip(argmax.par_chunks_mut(oh * ow))
            .enumerate()
            .for_each(|(p, (o, a))| {
                kernels::maxpool_plane(&data[p * h * w..(p + 1) * h * w], h, w, k, stride, o, a);
                a.iter_mut().for_each(|i| *i += p * h * w);
            });
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.needs(xi);
        Ok(self.push(value, Op::MaxPool { x: xi, argmax }, rg))
    }

    /// Routing indices recorded by a max-pool node (flat input indices).
    pub fn pool_argmax(&self, var: Var) -> Result<&[usize]> {
        match &self.nodes[self.index(var)?].op {
            Op::MaxPool { argmax, .. } => Ok(argmax),
            _ => Err(Error::State("node is not a max-pool".into())),
        }
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(T) -> T + Sync, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let xi = self.index(x)?;
        let src = &self.nodes[xi].value;
        let data: Vec<T> = src.data().par_iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.needs(xi);
        Ok(self.push(value, op(xi), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| v.ln(), Op::Log)
    }

    /// Batch normalization over `N, H, W` per channel.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// fold them into `state`; evaluation mode normalizes with `state`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState<T>,
        mode: Mode,
    ) -> Result<(Var, Option<ChannelStats>)> {
        let (xi, gi, bi) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let (n, c, h, w) = self.nodes[xi].value.dims4()?;
        if self.nodes[gi].value.shape() != [c]
            || self.nodes[bi].value.shape() != [c]
            || state.channels() != c
        {
            return shape_err(format!("batch_norm: parameters do not match {c} channels"));
        }
        let plane = h * w;
        let count = n * plane;
        let xd = self.nodes[xi].value.data();
        let gd = self.nodes[gi].value.data();
        let bd = self.nodes[bi].value.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut stats = None;
        let train = mode == Mode::Train;
        if train {
            let mut means = vec![0.0; c];
            let mut vars = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    sum += xd[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    sq += xd[base..base + plane]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                means[ch] = mean;
                vars[ch] = if count > 1 { sq / (count - 1) as f64 } else { var };
                let istd = 1.0 / (var + state.eps).sqrt();
                inv_std[ch] = T::from_f64_lossy(istd);
                let (mean_t, istd_t) = (T::from_f64_lossy(mean), inv_std[ch]);
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for i in base..base + plane {
                        xhat[i] = (xd[i] - mean_t) * istd_t;
                    }
                }
            }
            stats = Some(ChannelStats { mean: means, var: vars });
        } else {
            for ch in 0..c {
                let istd = T::from_f64_lossy(1.0 / (state.running_var[ch].as_f64() + state.eps).sqrt());
                inv_std[ch] = istd;
                let mean = state.running_mean[ch];
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for i in base..base + plane {
                        xhat[i] = (xd[i] - mean) * istd;
                    }
                }
            }
        }
        let mut out = vec![T::zero(); xd.len()];
        for (i, (o, xh)) in out.iter_mut().zip(&xhat).enumerate() {
            let ch = (i / plane) % c;
            *o = gd[ch] * *xh + bd[ch];
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.needs(xi) || self.needs(gi) || self.needs(bi);
        let op = Op::BatchNorm {
            x: xi,
            gamma: gi,
            beta: bi,
            xhat,
            inv_std,
            train,
        };
        Ok((self.push(value, op, rg), stats))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (na, ca, ha, wa) = self.nodes[ai].value.dims4()?;
        let (nb, cb, hb, wb) = self.nodes[bi].value.dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return shape_err(format!(
                "concat: {:?} and {:?} differ outside the channel axis",
                self.nodes[ai].value.shape(),
                self.nodes[bi].value.shape()
            ));
        }
        let plane = ha * wa;
        let (ad, bd) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for s in 0..na {
            out.extend_from_slice(&ad[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&bd[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let rg = self.needs(ai) || self.needs(bi);
        Ok(self.push(value, Op::Concat(ai, bi), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: fn(usize, usize) -> Op<T>) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (at, bt) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if at.shape() != bt.shape() {
            return shape_err(format!("{name}: shapes {:?} and {:?} differ", at.shape(), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        let rg = self.needs(ai) || self.needs(bi);
        Ok(self.push(value, op(ai, bi), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let total = self.nodes[xi].value.data().iter().map(|v| v.as_f64()).sum::<f64>();
        let rg = self.needs(xi);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(total)), Op::Sum(xi), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let t = &self.nodes[xi].value;
        let total = t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.len() as f64;
        let rg = self.needs(xi);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(total)), Op::Mean(xi), rg))
    }

    /// Softmax across the channel axis of an `N x C x H x W` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let (n, c, h, w) = self.nodes[xi].value.dims4()?;
        let plane = h * w;
        let xd = self.nodes[xi].value.data();
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for p in 0..plane {
                let at = |ch: usize| (s * c + ch) * plane + p;
                let max = (0..c).map(|ch| xd[at(ch)]).fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for ch in 0..c {
                    let e = (xd[at(ch)] - max).exp();
                    out[at(ch)] = e;
                    denom = denom + e;
                }
                for ch in 0..c {
                    out[at(ch)] = out[at(ch)] / denom;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.needs(xi);
        Ok(self.push(value, Op::SoftmaxChannels(xi), rg))
    }

    fn check_labels(&self, pi: usize, labels: &Tensor<T>, name: &str) -> Result<()> {
        if self.nodes[pi].value.shape() != labels.shape() {
            return shape_err(format!(
                "{name}: prediction shape {:?} vs label shape {:?}",
                self.nodes[pi].value.shape(),
                labels.shape()
            ));
        }
        Ok(())
    }

    /// Mean binary cross-entropy with probabilities clamped to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, probs: Var, labels: Tensor<T>) -> Result<Var> {
        let pi = self.index(probs)?;
        self.check_labels(pi, &labels, "bce")?;
        let v = loss_metrics::bce_value(self.nodes[pi].value.data(), labels.data());
        let rg = self.needs(pi);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(v)), Op::Bce { probs: pi, labels }, rg))
    }

    /// Soft Jaccard index of probabilities against binary labels.
    pub fn soft_jaccard(&mut self, probs: Var, labels: Tensor<T>, variant: JaccardVariant, eps: f64) -> Result<Var> {
        let pi = self.index(probs)?;
        self.check_labels(pi, &labels, "soft_jaccard")?;
        let v = loss_metrics::soft_jaccard_value(self.nodes[pi].value.data(), labels.data(), variant, eps);
        let rg = self.needs(pi);
        let op = Op::SoftJaccard {
            probs: pi,
            labels,
            variant,
            eps,
        };
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(v)), op, rg))
    }

    /// Categorical cross-entropy of channel-softmax probabilities against
    /// one-hot labels, averaged over pixels.
    pub fn categorical_cross_entropy(&mut self, probs: Var, labels: Tensor<T>) -> Result<Var> {
        let pi = self.index(probs)?;
        self.check_labels(pi, &labels, "categorical_cross_entropy")?;
        let (n, c, h, w) = labels.dims4()?;
        let _ = c;
        let v = loss_metrics::categorical_ce_value(self.nodes[pi].value.data(), labels.data(), n * h * w);
        let rg = self.needs(pi);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(v)), Op::CategoricalCe { probs: pi, labels }, rg))
    }

    /// Branch decisions of every non-smooth operation on the tape: ReLU
    /// signs, max-pool winners and probability clamps. Two evaluations with
    /// equal patterns lie on the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    out.extend(self.nodes[*x].value.data().iter().map(|&v| u64::from(v > T::zero())));
                }
                Op::MaxPool { argmax, .. } => out.extend(argmax.iter().map(|&i| i as u64)),
                Op::Bce { probs, .. } | Op::CategoricalCe { probs, .. } => {
                    let (lo, hi) = (loss_metrics::PROB_CLAMP, 1.0 - loss_metrics::PROB_CLAMP);
                    out.extend(self.nodes[*probs].value.data().iter().map(|v| {
                        let v = v.as_f64();
                        u64::from(v < lo) + 2 * u64::from(v > hi)
                    }));
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse-mode pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.index(loss)?;
        if self.nodes[li].value.len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::scalar(T::one()));
        for idx in (0..=li).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|&(key, node)| {
                let g = grads[node]
                    .clone()
                    .unwrap_or_else(|| self.nodes[node].value.zeros_like());
                (key, g)
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            params,
            nodes: grads,
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b) = (*x, *w, *b);
                let (n, ..) = self.nodes[x].value.dims4()?;
                let xd = self.nodes[x].value.data();
                let wd = self.nodes[w].value.data();
                let want_dx = self.needs(x);
                let (in_len, out_len) = (geom.in_c * geom.h * geom.w, geom.out_c * geom.oh * geom.ow);
                let parts: Vec<_> = (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let mut dw = vec![T::zero(); wd.len()];
                        let mut db = vec![T::zero(); geom.out_c];
                        let mut dx = if want_dx { vec![T::zero(); in_len] } else { Vec::new() };
                        kernels::conv_backward(
                            geom,
                            &xd[s * in_len..(s + 1) * in_len],
                            wd,
                            &gd[s * out_len..(s + 1) * out_len],
                            want_dx.then_some(dx.as_mut_slice()),
                            &mut dw,
                            Some(&mut db),
                        );
                        (dx, dw, db)
                    })
                    .collect();
                self.reduce_conv_parts(parts, x, w, b, want_dx, grads)?;
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (x, w, b) = (*x, *w, *b);
                let (n, ..) = self.nodes[x].value.dims4()?;
                let xd = self.nodes[x].value.data();
                let wd = self.nodes[w].value.data();
                let want_dx = self.needs(x);
                let (in_len, out_len) = (geom.in_c * geom.h * geom.w, geom.out_c * geom.oh * geom.ow);
                let parts: Vec<_> = (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let mut dw = vec![T::zero(); wd.len()];
                        let mut db = vec![T::zero(); geom.out_c];
                        let mut dx = if want_dx { vec![T::zero(); in_len] } else { Vec::new() };
                        kernels::conv_transpose_backward(
                            geom,
                            &xd[s * in_len..(s + 1) * in_len],
                            wd,
                            &gd[s * out_len..(s + 1) * out_len],
                            want_dx.then_some(dx.as_mut_slice()),
                            &mut dw,
                            Some(&mut db),
                        );
                        (dx, dw, db)
                    })
                    .collect();
                self.reduce_conv_parts(parts, x, w, b, want_dx, grads)?;
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = self.nodes[*x].value.zeros_like();
                let d = dx.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] = d[src] + gd[o];
                }
                accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                let data = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Sigmoid(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &d)| d * y * (T::one() - y))
                    .collect();
                accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), data)?);
            }
            Op::Log(x) => {
                let xv = &self.nodes[*x].value;
                let data = xv.data().iter().zip(gd).map(|(&v, &d)| d / v).collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = node.value.dims4()?;
                let plane = h * w;
                let count = (n * plane) as f64;
                let gam = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for (i, (&d, &xh)) in gd.iter().zip(xhat).enumerate() {
                    let ch = (i / plane) % c;
                    dgamma[ch] += (d * xh).as_f64();
                    dbeta[ch] += d.as_f64();
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for (i, v) in dx.iter_mut().enumerate() {
                        let ch = (i / plane) % c;
                        let scale = gam[ch] * inv_std[ch];
                        *v = if *train {
                            let k = T::from_f64_lossy(1.0 / count);
                            let sd = T::from_f64_lossy(dbeta[ch]);
                            let sdx = T::from_f64_lossy(dgamma[ch]);
                            scale * (gd[i] - k * sd - xhat[i] * k * sdx)
                        } else {
                            scale * gd[i]
                        };
                    }
                    accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
                }
                let to_t = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<_>>();
                accumulate(grads, *gamma, Tensor::new(vec![c], to_t(dgamma))?);
                accumulate(grads, *beta, Tensor::new(vec![c], to_t(dbeta))?);
            }
            Op::Concat(a, b) => {
                let ca = self.nodes[*a].value.dims4()?.1;
                let (_, c, ..) = node.value.dims4()?;
                accumulate(grads, *a, g.slice_channels(0, ca)?);
                accumulate(grads, *b, g.slice_channels(ca, c)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                let neg = gd.iter().map(|&v| -v).collect();
                accumulate(grads, *b, Tensor::new(g.shape().to_vec(), neg)?);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = bv.data().iter().zip(gd).map(|(&y, &d)| y * d).collect();
                let db = av.data().iter().zip(gd).map(|(&x, &d)| x * d).collect();
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::Sum(x) => {
                let shape = self.nodes[*x].value.shape().to_vec();
                accumulate(grads, *x, Tensor::full(shape, gd[0])?);
            }
            Op::Mean(x) => {
                let xv = &self.nodes[*x].value;
                let d = gd[0] / T::from_usize(xv.len()).expect("length fits");
                accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), d)?);
            }
            Op::SoftmaxChannels(x) => {
                let (n, c, h, w) = node.value.dims4()?;
                let plane = h * w;
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for s in 0..n {
                    for p in 0..plane {
                        let at = |ch: usize| (s * c + ch) * plane + p;
                        let dot = (0..c).fold(T::zero(), |acc, ch| acc + gd[at(ch)] * y[at(ch)]);
                        for ch in 0..c {
                            dx[at(ch)] = y[at(ch)] * (gd[at(ch)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::Bce { probs, labels } => {
                let pv = &self.nodes[*probs].value;
                let d = loss_metrics::bce_grad(pv.data(), labels.data(), gd[0]);
                accumulate(grads, *probs, Tensor::new(pv.shape().to_vec(), d)?);
            }
            Op::SoftJaccard {
                probs,
                labels,
                variant,
                eps,
            } => {
                let pv = &self.nodes[*probs].value;
                let d = loss_metrics::soft_jaccard_grad(pv.data(), labels.data(), *variant, *eps, gd[0]);
                accumulate(grads, *probs, Tensor::new(pv.shape().to_vec(), d)?);
            }
            Op::CategoricalCe { probs, labels } => {
                let pv = &self.nodes[*probs].value;
                let (n, _, h, w) = pv.dims4()?;
                let d = loss_metrics::categorical_ce_grad(pv.data(), labels.data(), n * h * w, gd[0]);
                accumulate(grads, *probs, Tensor::new(pv.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn reduce_conv_parts(
        &self,
        parts: Vec<(Vec<T>, Vec<T>, Vec<T>)>,
        x: usize,
        w: usize,
        b: Option<usize>,
        want_dx: bool,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut dw = self.nodes[w].value.zeros_like();
        let mut db = vec![T::zero(); parts.first().map_or(0, |p| p.2.len())];
        let mut dx = Vec::with_capacity(if want_dx { self.nodes[x].value.len() } else { 0 });
        for (pdx, pdw, pdb) in parts {
            for (a, v) in dw.data_mut().iter_mut().zip(pdw) {
                *a = *a + v;
            }
            for (a, v) in db.iter_mut().zip(pdb) {
                *a = *a + v;
            }
            dx.extend(pdx);
        }
        if want_dx {
            accumulate(grads, x, Tensor::new(self.nodes[x].value.shape().to_vec(), dx)?);
        }
        if self.needs(w) {
            accumulate(grads, w, dw);
        }
        if let Some(b) = b {
            if self.needs(b) {
                let len = db.len();
                accumulate(grads, b, Tensor::new(vec![len], db)?);
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    // Split by sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
