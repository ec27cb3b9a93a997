use std::collections::{HashMap, HashSet};

use super::kernels;
use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradients keyed by the tensors they were requested for.
///
/// Every requested tensor has an entry; tensors the output does not depend on
/// get explicit zeros.
pub struct GradientSet<T: Scalar> {
    entries: Vec<(u64, Tensor<T>)>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(id, _)| *id == t.id()).map(|(_, g)| g)
    }

    /// Gradients in request order.
    pub fn into_vec(self) -> Vec<Tensor<T>> {
        self.entries.into_iter().map(|(_, g)| g).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, g)| g)
    }
}

/// `∂loss/∂wrt` for a scalar, tracked `loss`.
///
/// With `retain_higher` the gradients are tracked expressions of the inputs
/// and can be differentiated again; otherwise they are plain values and no
/// graph is built.
pub fn backward<T: Scalar>(
    loss: &Tensor<T>,
    wrt: &[&Tensor<T>],
    retain_higher: bool,
) -> Result<GradientSet<T>> {
    if loss.numel() != 1 {
        return Err(Error::Backward(format!(
            "loss must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    let seed = Tensor::full(loss.shape(), T::one());
    vjp(loss, &seed, wrt, retain_higher)
}

/// Vector-Jacobian product `cotangentᵀ · ∂output/∂wrt`.
pub fn vjp<T: Scalar>(
    output: &Tensor<T>,
    cotangent: &Tensor<T>,
    wrt: &[&Tensor<T>],
    retain_higher: bool,
) -> Result<GradientSet<T>> {
    if cotangent.shape() != output.shape() {
        return Err(Error::shape(
            "vjp",
            format!("cotangent {:?} vs output {:?}", cotangent.shape(), output.shape()),
        ));
    }
    if !output.is_tracked() {
        return Err(Error::Backward("output is not tracked".into()));
    }
    if let Some(t) = wrt.iter().find(|t| !t.is_tracked()) {
        return Err(Error::Backward(format!(
            "requested gradient for an untracked tensor of shape {:?}",
            t.shape()
        )));
    }
    let wrt_ids: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let min_id = wrt_ids.iter().copied().min().unwrap_or(u64::MAX);

    // Parents are always created before children, so ids order the graph
    // topologically. Nothing with a smaller id than every `wrt` can lead to one.
    let mut nodes: Vec<Tensor<T>> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(t) = stack.pop() {
        if t.id() < min_id || !seen.insert(t.id()) {
            continue;
        }
        if let Some(node) = t.node() {
            for p in &node.parents {
                if p.is_tracked() {
                    stack.push(p.clone());
                }
            }
        }
        nodes.push(t);
    }
    nodes.sort_by_key(Tensor::id);

    let mut needed: HashSet<u64> = HashSet::new();
    for t in &nodes {
        let hit = wrt_ids.contains(&t.id())
            || t.node()
                .is_some_and(|n| n.parents.iter().any(|p| needed.contains(&p.id())));
        if hit {
            needed.insert(t.id());
        }
    }

    let cot = if retain_higher {
        cotangent.clone()
    } else {
        cotangent.detach()
    };
    let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
    grads.insert(output.id(), cot);

    for t in nodes.iter().rev() {
        if !needed.contains(&t.id()) {
            continue;
        }
        let node = t.node().expect("collected nodes are tracked");
        if matches!(node.op, Op::Leaf) {
            continue;
        }
        let gy = if wrt_ids.contains(&t.id()) {
            grads.get(&t.id()).cloned()
        } else {
            grads.remove(&t.id())
        };
        let Some(gy) = gy else { continue };
        let need: Vec<bool> = node
            .parents
            .iter()
            .map(|p| p.is_tracked() && needed.contains(&p.id()))
            .collect();
        let parent_grads = if retain_higher {
            rule(&node.op, &node.parents, t, &gy, &need)?
        } else {
            let parents: Vec<Tensor<T>> = node.parents.iter().map(Tensor::detach).collect();
            rule(&node.op, &parents, &t.detach(), &gy, &need)?
        };
        for (p, g) in node.parents.iter().zip(parent_grads) {
            let Some(g) = g else { continue };
            if !needed.contains(&p.id()) {
                continue;
            }
            let acc = match grads.remove(&p.id()) {
                Some(prev) => prev.add(&g)?,
                None => g,
            };
            grads.insert(p.id(), acc);
        }
    }

    let entries = wrt
        .iter()
        .map(|t| {
            let g = grads
                .get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            (t.id(), g)
        })
        .collect();
    Ok(GradientSet { entries })
}

fn mask<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
    Tensor::new(x.shape(), x.values().iter().map(|&v| f(v)).collect())
}

/// Sums a broadcast gradient back down to the shape of the operand it belongs to.
fn reduce<T: Scalar>(g: Tensor<T>, like: &Tensor<T>) -> Result<Tensor<T>> {
    if g.shape() == like.shape() {
        Ok(g)
    } else {
        g.sum_to(like.shape())
    }
}

/// Per-op vector-Jacobian rules, written with differentiable ops so that
/// they can be differentiated again.
fn rule<T: Scalar>(
    op: &Op<T>,
    parents: &[Tensor<T>],
    out: &Tensor<T>,
    gy: &Tensor<T>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    let p = parents;
    let one = |g: Result<Tensor<T>>| -> Result<Vec<Option<Tensor<T>>>> { Ok(vec![Some(g?)]) };
    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add => Ok(vec![
            if want(0) { Some(reduce(gy.clone(), &p[0])?) } else { None },
            if want(1) { Some(reduce(gy.clone(), &p[1])?) } else { None },
        ]),
        Op::Sub => Ok(vec![
            if want(0) { Some(reduce(gy.clone(), &p[0])?) } else { None },
            if want(1) { Some(reduce(gy.neg()?, &p[1])?) } else { None },
        ]),
        Op::Mul => Ok(vec![
            if want(0) { Some(reduce(gy.mul(&p[1])?, &p[0])?) } else { None },
            if want(1) { Some(reduce(gy.mul(&p[0])?, &p[1])?) } else { None },
        ]),
        Op::Div => Ok(vec![
            if want(0) { Some(reduce(gy.div(&p[1])?, &p[0])?) } else { None },
            if want(1) {
                Some(reduce(gy.mul(out)?.div(&p[1])?.neg()?, &p[1])?)
            } else {
                None
            },
        ]),
        Op::Neg => one(gy.neg()),
        Op::MulScalar(c) => one(gy.mul_scalar(*c)),
        Op::AddScalar(_) => Ok(vec![Some(gy.clone())]),
        Op::MatMul { ta, tb } => {
            let (ta, tb) = (*ta, *tb);
            let ga = if !want(0) {
                None
            } else if !ta {
                Some(gy.matmul_t(&p[1], false, !tb)?)
            } else {
                Some(p[1].matmul_t(gy, tb, true)?)
            };
            let gb = if !want(1) {
                None
            } else if !tb {
                Some(p[0].matmul_t(gy, !ta, false)?)
            } else {
                Some(gy.matmul_t(&p[0], true, ta)?)
            };
            Ok(vec![ga, gb])
        }
        Op::Conv2d { pad } => Ok(vec![
            if want(0) { Some(gy.conv2d_input_grad(&p[1], *pad)?) } else { None },
            if want(1) { Some(p[0].conv2d_weight_grad(gy, *pad)?) } else { None },
        ]),
        Op::Conv2dInputGrad { pad } => Ok(vec![
            if want(0) { Some(gy.conv2d(&p[1], *pad)?) } else { None },
            if want(1) { Some(gy.conv2d_weight_grad(&p[0], *pad)?) } else { None },
        ]),
        Op::Conv2dWeightGrad { pad } => Ok(vec![
            if want(0) { Some(p[1].conv2d_input_grad(gy, *pad)?) } else { None },
            if want(1) { Some(p[0].conv2d(gy, *pad)?) } else { None },
        ]),
        Op::Relu => one(gy.mul(&mask(&p[0], |v| if v > T::zero() { T::one() } else { T::zero() })?)),
        Op::LeakyRelu(s) => {
            let s = *s;
            one(gy.mul(&mask(&p[0], |v| if v > T::zero() { T::one() } else { s })?))
        }
        Op::Tanh => one(gy.mul(&out.square()?.neg()?.add_scalar(T::one())?)),
        Op::Exp => one(gy.mul(out)),
        Op::Log => one(gy.div(&p[0])),
        Op::Powf(e) => one(gy.mul(&p[0].powf(*e - T::one())?.mul_scalar(*e)?)),
        Op::Sum | Op::SumTo => one(gy.broadcast_to(p[0].shape())),
        Op::BroadcastTo => one(gy.sum_to(p[0].shape())),
        Op::Reshape => one(gy.reshape(p[0].shape())),
        Op::Pad2d(pads) => one(gy.pad2d(pads.map(|v| -v))),
        Op::SumPool(k) => one(gy.upsample_nearest(*k)),
        Op::Upsample(k) => one(gy.sum_pool2d(*k)),
        Op::GridSample(plan) => one(gy.grid_scatter_plan(plan)),
        Op::GridScatter(plan) => one(gy.grid_sample_plan(plan)),
        Op::Concat0(sizes) => {
            let mut out = Vec::with_capacity(sizes.len());
            let mut start = 0;
            for (i, &n) in sizes.iter().enumerate() {
                out.push(if want(i) { Some(gy.narrow(start, n)?) } else { None });
                start += n;
            }
            Ok(out)
        }
        Op::Narrow0 { start } => one(gy.embed(*start, p[0].shape()[0])),
        Op::Embed0 { start } => one(gy.narrow(*start, p[0].shape()[0])),
        Op::IndexSelect0(idx) => one(gy.index_add(idx, p[0].shape()[0])),
        Op::IndexAdd0(idx) => one(gy.index_select(idx.as_slice())),
        Op::FlipW => one(gy.flip_w()),
        Op::GroupNorm { groups, eps } => one(group_norm_rule(&p[0], out, gy, *groups, *eps)),
    }
}

/// `gx = rstd · (g − mean(g) − ŷ · mean(g ⊙ ŷ))` per normalization row. With
/// tracked operands the same expression is assembled from differentiable ops.
fn group_norm_rule<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    gy: &Tensor<T>,
    groups: usize,
    eps: T,
) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    let rows = shape[0] * groups;
    let cols = x.numel() / rows;
    if !(x.is_tracked() || y.is_tracked() || gy.is_tracked()) {
        let data = kernels::group_norm_grad(x.values(), y.values(), gy.values(), cols, eps);
        return Tensor::new(&shape, data);
    }
    let inv = T::one() / T::of(cols as f64);
    let xr = x.reshape(&[rows, cols])?;
    let xc = xr.sub(&xr.sum_to(&[rows, 1])?.mul_scalar(inv)?)?;
    let var = xc.square()?.sum_to(&[rows, 1])?.mul_scalar(inv)?;
    let rstd = var.add_scalar(eps)?.powf(T::of(-0.5))?;
    let yr = y.reshape(&[rows, cols])?;
    let g = gy.reshape(&[rows, cols])?;
    let gm = g.sum_to(&[rows, 1])?.mul_scalar(inv)?;
    let gym = g.mul(&yr)?.sum_to(&[rows, 1])?.mul_scalar(inv)?;
    g.sub(&gm)?.sub(&yr.mul(&gym)?)?.mul(&rstd)?.reshape(&shape)
}
