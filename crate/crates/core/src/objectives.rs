//! Distillation objectives: gradient matching, distribution matching and
//! trajectory matching, the latter with both an unrolled and a
//! constant-memory reverse-replay backward pass.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsa::{AugSettings, Siamese};
use crate::error::{Error, Result};
use crate::experts::TrajBuffer;
use crate::nets::{cross_entropy_loss, feature_extract, forward_logits, NetSpec, ParamEntry, ParamVector};
use crate::scalar::Scalar;
use crate::seeds::mix;
use crate::tensor::{backward, vjp, Tensor};

/// A classifier evaluated from a flat parameter vector.
pub trait Model<T: Scalar>: Sync {
    fn logits(&self, params: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>>;
    /// The embedding used by distribution matching.
    fn features(&self, params: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn layout(&self) -> Vec<ParamEntry>;
}

impl<T: Scalar> Model<T> for NetSpec {
    fn logits(&self, params: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        forward_logits(self, params, x)
    }

    fn features(&self, params: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        feature_extract(self, params, x)
    }

    fn layout(&self) -> Vec<ParamEntry> {
        NetSpec::layout(self)
    }
}

fn classification_grad<T: Scalar>(
    model: &dyn Model<T>,
    theta: &Tensor<T>,
    x: &Tensor<T>,
    labels: &[usize],
    retain: bool,
) -> Result<Tensor<T>> {
    let loss = cross_entropy_loss(&model.logits(theta, x)?, labels)?;
    Ok(backward(&loss, &[theta], retain)?.into_vec().remove(0))
}

/// `1 - cos(a, b)` with `b` constant; errors if either side is zero.
fn cosine_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let nb = b.values().iter().map(|v| *v * *v).sum::<T>();
    let na = a.values().iter().map(|v| *v * *v).sum::<T>();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::DegenerateGradient);
    }
    let denom = a.norm_sq()?.powf(T::of(0.5))?.mul_scalar(nb.sqrt())?;
    a.dot(b)?.div(&denom)?.neg()?.add_scalar(T::one())
}

/// Gradient-matching loss `1 - cos(∇θ ℓ(syn), ∇θ ℓ(real))` at parameters
/// `params`. With `per_layer`, sums the distance over weight tensors (biases
/// are skipped). Differentiable with respect to `syn`.
pub fn dc_loss<T: Scalar>(
    model: &dyn Model<T>,
    params: &[T],
    syn: &Tensor<T>,
    syn_labels: &[usize],
    real: &Tensor<T>,
    real_labels: &[usize],
    per_layer: bool,
) -> Result<Tensor<T>> {
    let theta = Tensor::from_vec(params.to_vec()).leaf();
    let g_real = classification_grad(model, &theta, &real.detach(), real_labels, false)?;
    let g_syn = classification_grad(model, &theta, syn, syn_labels, true)?;
    if !per_layer {
        return cosine_distance(&g_syn, &g_real);
    }
    let mut total: Option<Tensor<T>> = None;
    for e in model.layout().iter().filter(|e| e.shape.len() > 1) {
        let d = cosine_distance(&g_syn.narrow(e.offset, e.len())?, &g_real.narrow(e.offset, e.len())?)?;
        total = Some(match total {
            Some(t) => t.add(&d)?,
            None => d,
        });
    }
    total.ok_or_else(|| Error::Invalid("model has no weight tensors".into()))
}

fn mean_rows<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let n = f.shape()[0];
    f.sum_to(&[1, f.shape()[1]])?.mul_scalar(T::of(1.0 / n as f64))
}

/// Distribution-matching loss `Σ_c ‖mean ψ(real_c) − mean ψ(syn_c)‖²`.
pub fn dm_loss<T: Scalar>(
    model: &dyn Model<T>,
    psi_params: &[T],
    syn_per_class: &[Tensor<T>],
    real_per_class: &[Tensor<T>],
) -> Result<Tensor<T>> {
    if syn_per_class.len() != real_per_class.len() || syn_per_class.is_empty() {
        return Err(Error::Invalid("distribution matching needs one batch per class on both sides".into()));
    }
    let psi = Tensor::from_vec(psi_params.to_vec());
    let mut total: Option<Tensor<T>> = None;
    for (s, r) in syn_per_class.iter().zip(real_per_class) {
        if s.shape().first() == Some(&0) || r.shape().first() == Some(&0) {
            return Err(Error::Invalid("empty class batch".into()));
        }
        let mr = mean_rows(&model.features(&psi, &r.detach())?)?;
        let ms = mean_rows(&model.features(&psi, s)?)?;
        let d = mr.sub(&ms)?.norm_sq()?;
        total = Some(match total {
            Some(t) => t.add(&d)?,
            None => d,
        });
    }
    Ok(total.expect("at least one class"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MttConfig {
    /// Student steps on synthetic data.
    pub n: usize,
    /// Expert epochs ahead of the start.
    pub m: usize,
    /// Latest allowed start epoch.
    pub t_plus: usize,
    /// Images per student step; 0 uses the whole synthetic set.
    pub syn_batch: usize,
}

impl Default for MttConfig {
    fn default() -> Self {
        MttConfig {
            n: 10,
            m: 2,
            t_plus: 2,
            syn_batch: 0,
        }
    }
}

impl MttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Config("trajectory matching needs N >= 1 and M >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSegment<T: Scalar> {
    pub trajectory: usize,
    pub t: usize,
    pub m: usize,
    pub theta_start: ParamVector<T>,
    pub theta_target: ParamVector<T>,
}

impl ExpertSegment<f64> {
    pub fn cast<T: Scalar>(&self) -> ExpertSegment<T> {
        let c = |p: &ParamVector<f64>| ParamVector {
            values: p.values.iter().map(|v| T::of(*v)).collect(),
            layout: p.layout.clone(),
        };
        ExpertSegment {
            trajectory: self.trajectory,
            t: self.t,
            m: self.m,
            theta_start: c(&self.theta_start),
            theta_target: c(&self.theta_target),
        }
    }
}

/// Uniform trajectory, uniform start epoch in `0..=T⁺`, target `M` epochs on.
pub fn sample_expert_segment(buffer: &TrajBuffer, cfg: &MttConfig, rng: &mut ChaCha8Rng) -> Result<ExpertSegment<f64>> {
    cfg.validate()?;
    let need = cfg.t_plus + cfg.m + 1;
    if buffer.trajectories.is_empty() {
        return Err(Error::Invalid("expert buffer holds no trajectories".into()));
    }
    if let Some(short) = buffer.trajectories.iter().find(|t| t.len() < need) {
        return Err(Error::Invalid(format!(
            "expert trajectory has {} snapshots, T⁺ + M needs {need}",
            short.len()
        )));
    }
    let trajectory = rng.gen_range(0..buffer.trajectories.len());
    let t = rng.gen_range(0..=cfg.t_plus);
    let traj = &buffer.trajectories[trajectory];
    Ok(ExpertSegment {
        trajectory,
        t,
        m: cfg.m,
        theta_start: traj[t].clone(),
        theta_target: traj[t + cfg.m].clone(),
    })
}

/// Index lists for `n` student steps over `total` synthetic images, taken
/// in order from seeded permutations.
pub fn batch_schedule(total: usize, batch: usize, n: usize, seed: u64) -> Vec<Vec<usize>> {
    let b = if batch == 0 { total } else { batch.min(total) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = Vec::new();
    (0..n)
        .map(|_| {
            if pool.len() < b {
                let mut perm: Vec<usize> = (0..total).collect();
                perm.shuffle(&mut rng);
                pool.extend(perm);
            }
            pool.drain(..b).collect()
        })
        .collect()
}

/// Everything a student unroll needs besides the synthetic images and α.
pub struct MttProblem<'a, T: Scalar> {
    pub model: &'a dyn Model<T>,
    pub segment: &'a ExpertSegment<T>,
    pub cfg: MttConfig,
    pub labels: &'a [usize],
    pub student_seed: u64,
    pub aug: Option<(&'a AugSettings, u64)>,
}

impl<T: Scalar> MttProblem<'_, T> {
    fn schedule(&self) -> Vec<Vec<usize>> {
        batch_schedule(self.labels.len(), self.cfg.syn_batch, self.cfg.n, self.student_seed)
    }

    fn denominator(&self) -> Result<T> {
        let d = self.segment.theta_start.dist_sq(&self.segment.theta_target);
        if d == T::zero() {
            return Err(Error::DegenerateSegment);
        }
        Ok(d)
    }

    fn batch(&self, images: &Tensor<T>, idx: &[usize], step: usize) -> Result<Tensor<T>> {
        let x = images.index_select(idx)?;
        match self.aug {
            Some((settings, iteration)) => {
                let size = x.shape()[2];
                Siamese::new(settings, size, mix(iteration, step as u64), None).apply("syn", &x)
            }
            None => Ok(x),
        }
    }

    fn step(&self, theta: &Tensor<T>, images: &Tensor<T>, idx: &[usize], step: usize, alpha: &Tensor<T>, retain: bool) -> Result<Tensor<T>> {
        let x = self.batch(images, idx, step)?;
        let y: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        let g = classification_grad(self.model, theta, &x, &y, retain)?;
        theta.sub(&g.mul(alpha)?)
    }

    /// `‖θ̂_N − θ*_{t+M}‖² / ‖θ*_t − θ*_{t+M}‖²` with the whole unroll kept
    /// in one differentiable graph.
    pub fn loss_unrolled(&self, images: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
        let denom = self.denominator()?;
        let target = self.segment.theta_target.to_tensor();
        let mut theta = self.segment.theta_start.to_tensor().leaf();
        for (i, idx) in self.schedule().iter().enumerate() {
            theta = self.step(&theta, images, idx, i, alpha, true)?;
        }
        theta.sub(&target)?.norm_sq()?.mul_scalar(T::one() / denom)
    }

    /// Loss value and exact gradients with respect to `images` and `alpha`
    /// by reverse replay: the forward unroll keeps parameter snapshots only,
    /// then each step's graph is rebuilt alone and pulled back with a vjp.
    pub fn grad_constmem(&self, images: &Tensor<T>, alpha: &Tensor<T>) -> Result<(T, Tensor<T>, Tensor<T>)> {
        let denom = self.denominator()?;
        let schedule = self.schedule();
        let x = images.detach();
        let a = alpha.detach();
        let mut snaps = vec![self.segment.theta_start.values.clone()];
        for (i, idx) in schedule.iter().enumerate() {
            let theta = Tensor::from_vec(snaps[i].clone()).leaf();
            let next = self.step(&theta, &x, idx, i, &a, false)?;
            snaps.push(next.to_vec());
        }
        let target = &self.segment.theta_target.values;
        let last = snaps.last().expect("at least the start snapshot");
        let mut value = T::zero();
        let mut lambda = Vec::with_capacity(last.len());
        for (v, t) in last.iter().zip(target) {
            value += (*v - *t) * (*v - *t);
            lambda.push(T::of(2.0) * (*v - *t) / denom);
        }
        value /= denom;
        let mut lambda = Tensor::from_vec(lambda);
        let mut gx = Tensor::zeros(images.shape());
        let mut ga = T::zero();
        for (i, idx) in schedule.iter().enumerate().rev() {
            let theta = Tensor::from_vec(snaps[i].clone()).leaf();
            let xl = x.leaf();
            let al = a.leaf();
            let next = self.step(&theta, &xl, idx, i, &al, true)?;
            let g = vjp(&next, &lambda, &[&theta, &xl, &al], false)?.into_vec();
            let mut g = g.into_iter();
            lambda = g.next().expect("theta cotangent");
            gx = gx.add(&g.next().expect("image cotangent"))?;
            ga += g.next().expect("alpha cotangent").item()?;
        }
        Ok((value, gx, Tensor::scalar(ga)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_covers_images_in_order() {
        let s = batch_schedule(5, 2, 5, 1);
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|b| b.len() == 2));
        let mut first: Vec<usize> = s[..2].concat();
        first.sort_unstable();
        first.dedup();
        assert_eq!(first.len(), 4);
        assert_eq!(batch_schedule(5, 0, 2, 1)[0].len(), 5);
    }

    #[test]
    fn zero_gradient_is_degenerate() {
        let a = Tensor::<f64>::zeros(&[3]).leaf();
        let b = Tensor::from_vec(vec![1.0, 0.0, 0.0]);
        assert!(matches!(cosine_distance(&a, &b), Err(Error::DegenerateGradient)));
    }
}
