//! The forward op catalog.
//!
//! Shape rules:
//! - elementwise binary ops broadcast numpy-style;
//! - `matmul` takes rank-2 operands;
//! - image ops (`conv2d`, `pad2d`, pooling, `grid_sample_bilinear`,
//!   `instance_norm`) take `N × C × H × W`;
//! - `concat`, `narrow`, `index_select` act on axis 0.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::sample::SamplePlan;
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    MulScalar(T),
    AddScalar(T),
    MatMul { ta: bool, tb: bool },
    Conv2d { pad: usize },
    /// parents `(gy, w)`; adjoint of `Conv2d` in its input
    Conv2dInputGrad { pad: usize },
    /// parents `(x, gy)`; adjoint of `Conv2d` in its weight
    Conv2dWeightGrad { pad: usize },
    Relu,
    LeakyRelu(T),
    Tanh,
    Exp,
    Log,
    Powf(T),
    Sum,
    BroadcastTo,
    SumTo,
    Reshape,
    Pad2d([isize; 4]),
    SumPool(usize),
    Upsample(usize),
    GridSample(Arc<SamplePlan<T>>),
    GridScatter(Arc<SamplePlan<T>>),
    Concat0(Vec<usize>),
    Narrow0 { start: usize },
    Embed0 { start: usize },
    IndexSelect0(Arc<Vec<usize>>),
    IndexAdd0(Arc<Vec<usize>>),
    FlipW,
    GroupNorm { groups: usize, eps: T },
}

fn shapes(ts: &[&Tensor<impl Scalar>]) -> String {
    ts.iter()
        .map(|t| format!("{:?}", t.shape()))
        .collect::<Vec<_>>()
        .join(" vs ")
}

fn dims4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(Error::shape(op, format!("{s:?} (expected N×C×H×W)"))),
    }
}

impl<T: Scalar> Tensor<T> {
    fn unary(&self, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Self> {
        let data = self.values().iter().map(|&v| f(v)).collect();
        Tensor::from_op(name, self.shape().to_vec(), data, op, vec![self.clone()])
    }

    fn binary(
        &self,
        other: &Tensor<T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        if self.shape() != other.shape() {
            let Some(s) = kernels::broadcast_shape(self.shape(), other.shape()) else {
                return Err(Error::shape(name, shapes(&[self, other])));
            };
            let mut data = vec![T::zero(); numel(&s)];
            if s == self.shape() {
                let a = self.values();
                let b = other.values();
                kernels::for_each_broadcast(other.shape(), &s, |o, i| data[o] = f(a[o], b[i]));
            } else if s == other.shape() {
                let a = self.values();
                let b = other.values();
                kernels::for_each_broadcast(self.shape(), &s, |o, i| data[o] = f(a[i], b[o]));
            } else {
                let a = self.broadcast_to(&s)?;
                let b = other.broadcast_to(&s)?;
                return a.binary(&b, name, op, f);
            }
            return Tensor::from_op(name, s, data, op, vec![self.clone(), other.clone()]);
        }
        let data = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            op,
            vec![self.clone(), other.clone()],
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Self> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Self> {
        self.unary("neg", Op::Neg, |v| -v)
    }

    pub fn mul_scalar(&self, c: T) -> Result<Self> {
        self.unary("mul_scalar", Op::MulScalar(c), |v| v * c)
    }

    pub fn add_scalar(&self, c: T) -> Result<Self> {
        self.unary("add_scalar", Op::AddScalar(c), |v| v + c)
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary("relu", Op::Relu, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&self, slope: T) -> Result<Self> {
        self.unary("leaky_relu", Op::LeakyRelu(slope), |v| {
            if v > T::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn tanh(&self) -> Result<Self> {
        self.unary("tanh", Op::Tanh, T::tanh)
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary("exp", Op::Exp, T::exp)
    }

    pub fn log(&self) -> Result<Self> {
        self.unary("log", Op::Log, T::ln)
    }

    pub fn powf(&self, p: T) -> Result<Self> {
        self.unary("powf", Op::Powf(p), |v| v.powf(p))
    }

    pub fn square(&self) -> Result<Self> {
        self.mul(self)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Self> {
        let s = self.values().iter().copied().sum();
        Tensor::from_op("sum", vec![], vec![s], Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Result<Self> {
        let n = T::from_usize(self.numel()).unwrap_or_else(T::one);
        self.sum()?.mul_scalar(T::one() / n)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        if !kernels::can_broadcast(self.shape(), shape) {
            return Err(Error::shape(
                "broadcast_to",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        let data = kernels::broadcast_to(self.values(), self.shape(), shape);
        Tensor::from_op("broadcast_to", shape.to_vec(), data, Op::BroadcastTo, vec![self.clone()])
    }

    /// Sums over broadcast dimensions down to `shape` (adjoint of `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        if !kernels::can_broadcast(shape, self.shape()) {
            return Err(Error::shape("sum_to", format!("{:?} -> {shape:?}", self.shape())));
        }
        let data = kernels::sum_to(self.values(), self.shape(), shape);
        Tensor::from_op("sum_to", shape.to_vec(), data, Op::SumTo, vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let node = if self.is_tracked() {
            Some(super::Node {
                op: Op::Reshape,
                parents: vec![self.clone()],
                _live: super::LiveToken::new(),
            })
        } else {
            None
        };
        Ok(Tensor::raw(shape.to_vec(), Arc::clone(self.data_arc()), node))
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&self, other: &Tensor<T>, ta: bool, tb: bool) -> Result<Self> {
        let bad = || Error::shape("matmul", shapes(&[self, other]));
        let (&[r0, c0], &[r1, c1]) = (self.shape(), other.shape()) else {
            return Err(bad());
        };
        let (m, k) = if ta { (c0, r0) } else { (r0, c0) };
        let (k2, n) = if tb { (c1, r1) } else { (r1, c1) };
        if k != k2 {
            return Err(bad());
        }
        let data = kernels::matmul(self.values(), other.values(), m, k, n, ta, tb);
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            Op::MatMul { ta, tb },
            vec![self.clone(), other.clone()],
        )
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape("dot", shapes(&[self, other])));
        }
        self.mul(other)?.sum()
    }

    pub fn norm_sq(&self) -> Result<Self> {
        self.square()?.sum()
    }

    /// Stride-1 convolution of `N×C×H×W` by `O×C×kh×kw` with `pad` zeros on
    /// every side. No bias.
    pub fn conv2d(&self, weight: &Tensor<T>, pad: usize) -> Result<Self> {
        let [n, c, h, w] = dims4("conv2d", self)?;
        let [o, c2, kh, kw] = dims4("conv2d", weight)?;
        if c != c2 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", shapes(&[self, weight])));
        }
        let g = ConvGeom { n, c, h, w, o, kh, kw, pad };
        let data = kernels::conv2d(self.values(), weight.values(), &g);
        Tensor::from_op(
            "conv2d",
            vec![n, o, g.oh(), g.ow()],
            data,
            Op::Conv2d { pad },
            vec![self.clone(), weight.clone()],
        )
    }

    /// Transposed convolution: the input-gradient of `conv2d`. `self` is the
    /// output-side tensor `N×O×Ho×Wo`.
    pub(crate) fn conv2d_input_grad(&self, weight: &Tensor<T>, pad: usize) -> Result<Self> {
        let [n, o, oh, ow] = dims4("conv2d_input_grad", self)?;
        let [o2, c, kh, kw] = dims4("conv2d_input_grad", weight)?;
        if o != o2 || oh + kh < 1 + 2 * pad || ow + kw < 1 + 2 * pad {
            return Err(Error::shape("conv2d_input_grad", shapes(&[self, weight])));
        }
        let (h, w) = (oh + kh - 1 - 2 * pad, ow + kw - 1 - 2 * pad);
        let g = ConvGeom { n, c, h, w, o, kh, kw, pad };
        let data = kernels::conv2d_input_grad(self.values(), weight.values(), &g);
        Tensor::from_op(
            "conv2d_input_grad",
            vec![n, c, h, w],
            data,
            Op::Conv2dInputGrad { pad },
            vec![self.clone(), weight.clone()],
        )
    }

    /// Weight-gradient of `conv2d` for input `self` and output cotangent `gy`.
    pub(crate) fn conv2d_weight_grad(&self, gy: &Tensor<T>, pad: usize) -> Result<Self> {
        let [n, c, h, w] = dims4("conv2d_weight_grad", self)?;
        let [n2, o, oh, ow] = dims4("conv2d_weight_grad", gy)?;
        if n != n2 || h + 2 * pad + 1 < oh + 1 || w + 2 * pad + 1 < ow + 1 {
            return Err(Error::shape("conv2d_weight_grad", shapes(&[self, gy])));
        }
        let (kh, kw) = (h + 2 * pad + 1 - oh, w + 2 * pad + 1 - ow);
        let g = ConvGeom { n, c, h, w, o, kh, kw, pad };
        let data = kernels::conv2d_weight_grad(self.values(), gy.values(), &g);
        Tensor::from_op(
            "conv2d_weight_grad",
            vec![o, c, kh, kw],
            data,
            Op::Conv2dWeightGrad { pad },
            vec![self.clone(), gy.clone()],
        )
    }

    /// Zero padding `[top, bottom, left, right]` of the last two axes of an
    /// `N×C×H×W` tensor. Negative amounts crop.
    pub fn pad2d(&self, pads: [isize; 4]) -> Result<Self> {
        let [n, c, h, w] = dims4("pad2d", self)?;
        if h as isize + pads[0] + pads[1] < 0 || w as isize + pads[2] + pads[3] < 0 {
            return Err(Error::shape("pad2d", format!("{:?} with {pads:?}", self.shape())));
        }
        if pads == [0; 4] {
            return Ok(self.clone());
        }
        let (oh, ow, data) = kernels::pad2d(self.values(), n * c, h, w, pads);
        Tensor::from_op("pad2d", vec![n, c, oh, ow], data, Op::Pad2d(pads), vec![self.clone()])
    }

    pub(crate) fn sum_pool2d(&self, k: usize) -> Result<Self> {
        let [n, c, h, w] = dims4("avgpool2d", self)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape("avgpool2d", format!("{:?} window {k}", self.shape())));
        }
        let data = kernels::sum_pool(self.values(), n * c, h, w, k);
        Tensor::from_op("sum_pool2d", vec![n, c, h / k, w / k], data, Op::SumPool(k), vec![self.clone()])
    }

    /// Non-overlapping `k×k` average pooling with stride `k`.
    pub fn avgpool2d(&self, k: usize) -> Result<Self> {
        let inv = T::one() / T::from_usize(k * k).unwrap_or_else(T::one);
        self.sum_pool2d(k)?.mul_scalar(inv)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, k: usize) -> Result<Self> {
        let [n, c, h, w] = dims4("upsample_nearest", self)?;
        if k == 0 {
            return Err(Error::shape("upsample_nearest", "factor 0"));
        }
        let data = kernels::upsample(self.values(), n * c, h, w, k);
        Tensor::from_op("upsample_nearest", vec![n, c, h * k, w * k], data, Op::Upsample(k), vec![self.clone()])
    }

    /// Per-sample, per-group normalization to zero mean and unit variance (no
    /// affine). `groups == C` is instance normalization.
    pub fn group_norm(&self, groups: usize, eps: T) -> Result<Self> {
        let [n, c, h, w] = dims4("group_norm", self)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", format!("{:?} groups {groups}", self.shape())));
        }
        let cols = (c / groups) * h * w;
        let data = kernels::group_norm(self.values(), cols, eps);
        Tensor::from_op(
            "group_norm",
            vec![n, c, h, w],
            data,
            Op::GroupNorm { groups, eps },
            vec![self.clone()],
        )
    }

    pub fn instance_norm(&self, eps: T) -> Result<Self> {
        let c = dims4("instance_norm", self)?[1];
        self.group_norm(c, eps)
    }

    /// Bilinear resampling of `N×C×H×W` at normalized grid positions
    /// (`N×Ho×Wo×2`, `(x, y)` in `[-1, 1]`, zero padding outside).
    /// Differentiable in the image only.
    pub fn grid_sample_bilinear(&self, grid: &Tensor<T>) -> Result<Self> {
        let [n, _, h, w] = dims4("grid_sample_bilinear", self)?;
        if grid.shape().first() != Some(&n) {
            return Err(Error::shape("grid_sample_bilinear", shapes(&[self, grid])));
        }
        let plan = SamplePlan::new(grid.values(), grid.shape(), h, w)?;
        self.grid_sample_plan(&Arc::new(plan))
    }

    pub fn grid_sample_plan(&self, plan: &Arc<SamplePlan<T>>) -> Result<Self> {
        let [n, c, h, w] = dims4("grid_sample_bilinear", self)?;
        if n != plan.n || h != plan.in_h || w != plan.in_w {
            return Err(Error::shape(
                "grid_sample_bilinear",
                format!("{:?} vs plan for {}×{}×{}", self.shape(), plan.n, plan.in_h, plan.in_w),
            ));
        }
        let data = plan.gather(self.values(), c);
        Tensor::from_op(
            "grid_sample_bilinear",
            vec![n, c, plan.out_h, plan.out_w],
            data,
            Op::GridSample(Arc::clone(plan)),
            vec![self.clone()],
        )
    }

    pub(crate) fn grid_scatter_plan(&self, plan: &Arc<SamplePlan<T>>) -> Result<Self> {
        let [n, c, h, w] = dims4("grid_scatter", self)?;
        if n != plan.n || h != plan.out_h || w != plan.out_w {
            return Err(Error::shape("grid_scatter", format!("{:?}", self.shape())));
        }
        let data = plan.scatter(self.values(), c);
        Tensor::from_op(
            "grid_scatter",
            vec![n, c, plan.in_h, plan.in_w],
            data,
            Op::GridScatter(Arc::clone(plan)),
            vec![self.clone()],
        )
    }

    /// Concatenation along axis 0.
    pub fn concat(parts: &[Tensor<T>]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let tail = &first.shape()[1.min(first.rank())..];
        if first.rank() == 0 || parts.iter().any(|p| p.rank() == 0 || &p.shape()[1..] != tail) {
            return Err(Error::shape("concat", shapes(&parts.iter().collect::<Vec<_>>())));
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
        for p in parts {
            data.extend_from_slice(p.values());
        }
        let mut shape = vec![sizes.iter().sum()];
        shape.extend_from_slice(tail);
        Tensor::from_op("concat", shape, data, Op::Concat0(sizes), parts.to_vec())
    }

    /// Rows `start..start+len` along axis 0.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        if self.rank() == 0 || start + len > self.shape()[0] {
            return Err(Error::shape("narrow", format!("{:?} [{start}, +{len})", self.shape())));
        }
        let row: usize = self.shape()[1..].iter().product();
        let data = self.values()[start * row..(start + len) * row].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        Tensor::from_op("narrow", shape, data, Op::Narrow0 { start }, vec![self.clone()])
    }

    /// Places `self` at rows `start..` of a zero tensor with `total` rows.
    pub(crate) fn embed(&self, start: usize, total: usize) -> Result<Self> {
        if self.rank() == 0 || start + self.shape()[0] > total {
            return Err(Error::shape("embed", format!("{:?} at {start} in {total}", self.shape())));
        }
        let row: usize = self.shape()[1..].iter().product();
        let mut data = vec![T::zero(); total * row];
        data[start * row..start * row + self.numel()].copy_from_slice(self.values());
        let mut shape = self.shape().to_vec();
        shape[0] = total;
        Tensor::from_op("embed", shape, data, Op::Embed0 { start }, vec![self.clone()])
    }

    pub fn index_select(&self, idx: &[usize]) -> Result<Self> {
        let rows = self.shape().first().copied().unwrap_or(0);
        if self.rank() == 0 || idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape("index_select", format!("{:?} with {idx:?}", self.shape())));
        }
        let row: usize = self.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.values()[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        Tensor::from_op(
            "index_select",
            shape,
            data,
            Op::IndexSelect0(Arc::new(idx.to_vec())),
            vec![self.clone()],
        )
    }

    pub(crate) fn index_add(&self, idx: &Arc<Vec<usize>>, rows: usize) -> Result<Self> {
        if self.rank() == 0 || self.shape()[0] != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape("index_add", format!("{:?}", self.shape())));
        }
        let row: usize = self.shape()[1..].iter().product();
        let mut data = vec![T::zero(); rows * row];
        for (k, &i) in idx.iter().enumerate() {
            for (d, s) in data[i * row..(i + 1) * row]
                .iter_mut()
                .zip(&self.values()[k * row..(k + 1) * row])
            {
                *d += *s;
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows;
        Tensor::from_op("index_add", shape, data, Op::IndexAdd0(Arc::clone(idx)), vec![self.clone()])
    }

    /// Reverses the last axis (horizontal flip for images).
    pub fn flip_w(&self) -> Result<Self> {
        let Some(&w) = self.shape().last() else {
            return Err(Error::shape("flip_w", "rank 0"));
        };
        let mut data = Vec::with_capacity(self.numel());
        for row in self.values().chunks_exact(w.max(1)) {
            data.extend(row.iter().rev());
        }
        Tensor::from_op("flip_w", self.shape().to_vec(), data, Op::FlipW, vec![self.clone()])
    }

    /// Mean cross-entropy of `N×K` logits against integer labels.
    ///
    /// Built from primitive ops (log-sum-exp with a constant max shift), so it
    /// is differentiable to any order.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Self> {
        let &[n, k] = self.shape() else {
            return Err(Error::shape("softmax_cross_entropy", format!("{:?}", self.shape())));
        };
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{:?} vs {} labels", self.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
        }
        let maxes: Vec<T> = self
            .values()
            .chunks_exact(k)
            .map(|r| r.iter().copied().fold(T::neg_infinity(), T::max))
            .collect();
        let shift = Tensor::new(&[n, 1], maxes)?;
        let mut onehot = vec![T::zero(); n * k];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * k + l] = T::one();
        }
        let onehot = Tensor::new(&[n, k], onehot)?;
        let lse = self
            .sub(&shift)?
            .exp()?
            .sum_to(&[n, 1])?
            .log()?
            .add(&shift)?;
        let picked = self.mul(&onehot)?.sum_to(&[n, 1])?;
        lse.sub(&picked)?.mean()
    }
}
