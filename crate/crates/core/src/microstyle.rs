//! A small class-conditional style-modulated generator.
//!
//! The mapping network turns `(z, class)` into a style code `w`. The synthesis
//! stack starts from a learned constant and runs `B` blocks, each
//! `upsample×2 → conv3×3 → per-channel scale/shift from w_k → leaky relu`.
//! The last block ends in a 1×1 RGB projection and `tanh`.
//!
//! A [`GenLatent`] cut at block `n` holds the activation entering block `n`
//! and one style code per remaining block. Cut `B` holds the finished image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nets::{ParamEntry, ParamVector};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SLOPE: f64 = 0.2;
const MIN_CHANNELS: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GenSpec {
    pub z_dim: usize,
    pub w_dim: usize,
    pub blocks: usize,
    pub base_size: usize,
    pub base_channels: usize,
    pub out_size: usize,
    pub image_channels: usize,
    pub classes: usize,
    pub seed: u64,
}

impl GenSpec {
    /// z 64, w 64, four blocks from a 2×2×128 constant to 32×32 images.
    pub fn desk(classes: usize, seed: u64) -> Self {
        GenSpec {
            z_dim: 64,
            w_dim: 64,
            blocks: 4,
            base_size: 2,
            base_channels: 128,
            out_size: 32,
            image_channels: 3,
            classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::Config(format!("generator needs at least 2 blocks, got {}", self.blocks)));
        }
        if self.base_size << self.blocks != self.out_size {
            return Err(Error::Config(format!(
                "base size {} · 2^{} != output size {}",
                self.base_size, self.blocks, self.out_size
            )));
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.base_channels == 0 || self.image_channels == 0 {
            return Err(Error::Config(format!("degenerate generator spec {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        Ok(())
    }

    /// Channels entering block `k`; `k == blocks` is the last hidden width.
    pub fn channels_at(&self, k: usize) -> usize {
        (self.base_channels >> k).max(MIN_CHANNELS.min(self.base_channels))
    }

    /// Shape `C × H × W` of the latent feature at `cut`.
    pub fn feature_shape(&self, cut: usize) -> [usize; 3] {
        if cut == self.blocks {
            [self.image_channels, self.out_size, self.out_size]
        } else {
            let s = self.base_size << cut;
            [self.channels_at(cut), s, s]
        }
    }

    /// Number of scalars a latent at `cut` exposes to optimization.
    pub fn latent_dof(&self, cut: usize) -> usize {
        self.feature_shape(cut).iter().product::<usize>() + (self.blocks - cut) * self.w_dim
    }

    pub fn layout(&self) -> Vec<ParamEntry> {
        let mut shapes: Vec<(String, Vec<usize>)> = vec![
            ("map.embed".into(), vec![self.classes, self.z_dim]),
            ("map0.weight_z".into(), vec![self.w_dim, self.z_dim]),
            ("map0.weight_e".into(), vec![self.w_dim, self.z_dim]),
            ("map0.bias".into(), vec![self.w_dim]),
            ("map1.weight".into(), vec![self.w_dim, self.w_dim]),
            ("map1.bias".into(), vec![self.w_dim]),
            (
                "const".into(),
                vec![self.base_channels, self.base_size, self.base_size],
            ),
        ];
        for k in 0..self.blocks {
            let (cin, cout) = (self.channels_at(k), self.channels_at(k + 1));
            shapes.push((format!("block{k}.conv.weight"), vec![cout, cin, 3, 3]));
            shapes.push((format!("block{k}.conv.bias"), vec![cout]));
            shapes.push((format!("block{k}.scale.weight"), vec![cout, self.w_dim]));
            shapes.push((format!("block{k}.scale.bias"), vec![cout]));
            shapes.push((format!("block{k}.shift.weight"), vec![cout, self.w_dim]));
            shapes.push((format!("block{k}.shift.bias"), vec![cout]));
        }
        let last = self.channels_at(self.blocks);
        shapes.push(("rgb.weight".into(), vec![self.image_channels, last, 1, 1]));
        shapes.push(("rgb.bias".into(), vec![self.image_channels]));
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, shape)| {
                let e = ParamEntry { name, offset, shape };
                offset += e.len();
                e
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(ParamEntry::len).sum()
    }
}

/// One synthetic sample in generator latent form.
#[derive(Clone, Debug)]
pub struct GenLatent<T: Scalar> {
    pub cut: usize,
    /// `C × H × W` activation entering block `cut`.
    pub feature: Tensor<T>,
    /// One `w_dim` code per block `cut..B`.
    pub styles: Vec<Tensor<T>>,
}

/// A batch of latents sharing one cut, stored as stacked tensors so they can
/// be optimized as a handful of leaves.
#[derive(Clone, Debug)]
pub struct LatentBatch<T: Scalar> {
    pub cut: usize,
    /// `N × C × H × W`.
    pub features: Tensor<T>,
    /// One `N × w_dim` tensor per block `cut..B`.
    pub styles: Vec<Tensor<T>>,
}

impl<T: Scalar> LatentBatch<T> {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stack(latents: &[GenLatent<T>]) -> Result<Self> {
        let first = latents
            .first()
            .ok_or_else(|| Error::Invalid("cannot stack an empty latent list".into()))?;
        let cut = first.cut;
        if latents.iter().any(|l| l.cut != cut || l.styles.len() != first.styles.len()) {
            return Err(Error::Invalid("latents with different cuts".into()));
        }
        let with_batch = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.reshape(&s)
        };
        let features = Tensor::concat(&latents.iter().map(|l| with_batch(&l.feature)).collect::<Result<Vec<_>>>()?)?;
        let styles = (0..first.styles.len())
            .map(|k| Tensor::concat(&latents.iter().map(|l| with_batch(&l.styles[k])).collect::<Result<Vec<_>>>()?))
            .collect::<Result<Vec<_>>>()?;
        Ok(LatentBatch { cut, features, styles })
    }

    pub fn split(&self) -> Result<Vec<GenLatent<T>>> {
        let row = |t: &Tensor<T>, i: usize| -> Result<Tensor<T>> { t.narrow(i, 1)?.reshape(&t.shape()[1..]) };
        (0..self.len())
            .map(|i| {
                Ok(GenLatent {
                    cut: self.cut,
                    feature: row(&self.features, i)?,
                    styles: self.styles.iter().map(|s| row(s, i)).collect::<Result<_>>()?,
                })
            })
            .collect()
    }

    pub fn detach(&self) -> Self {
        LatentBatch {
            cut: self.cut,
            features: self.features.detach(),
            styles: self.styles.iter().map(Tensor::detach).collect(),
        }
    }

    /// Fresh tracked leaves holding the same values.
    pub fn leaves(&self) -> Self {
        LatentBatch {
            cut: self.cut,
            features: self.features.leaf(),
            styles: self.styles.iter().map(Tensor::leaf).collect(),
        }
    }

    /// Every optimizable tensor, feature first.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        std::iter::once(&self.features).chain(&self.styles).collect()
    }

    /// Rows `start..start + len`.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(LatentBatch {
            cut: self.cut,
            features: self.features.narrow(start, len)?,
            styles: self.styles.iter().map(|s| s.narrow(start, len)).collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    FeedForward,
    Gaussian,
}

impl InitMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "feedforward" => Ok(InitMode::FeedForward),
            "gaussian" => Ok(InitMode::Gaussian),
            _ => Err(Error::Config(format!("unknown latent init `{s}`"))),
        }
    }
}

/// A generator: its spec and frozen parameters.
#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    pub spec: GenSpec,
    pub params: ParamVector<T>,
    weights: Vec<Tensor<T>>,
}

impl<T: Scalar> Generator<T> {
    /// Randomly initialized generator, deterministic in `spec.seed`.
    pub fn random(spec: GenSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut values = Vec::with_capacity(spec.param_count());
        for e in &layout {
            let n = e.len();
            let name = e.name.as_str();
            if name == "map.embed" || name == "const" {
                values.extend((0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))));
            } else if e.shape.len() == 1 || name.contains("scale.weight") || name.contains("shift.weight") {
                let bound = if e.shape.len() == 1 { 0.0 } else { 0.5 / (e.shape[1] as f64).sqrt() };
                values.extend((0..n).map(|_| if bound == 0.0 { T::zero() } else { T::of(rng.gen_range(-bound..bound)) }));
            } else {
                let fan_in: usize = e.shape[1..].iter().product();
                let gain = if name.starts_with("rgb") { 1.0 } else { 6.0 / (1.0 + SLOPE * SLOPE) };
                let bound = (gain / fan_in as f64).sqrt();
                values.extend((0..n).map(|_| T::of(rng.gen_range(-bound..bound))));
            }
        }
        Self::from_params(spec, ParamVector::new(values, layout)?)
    }

    pub fn from_params(spec: GenSpec, params: ParamVector<T>) -> Result<Self> {
        spec.validate()?;
        if params.layout != spec.layout() {
            return Err(Error::Invalid("generator parameters do not match the spec".into()));
        }
        let weights = params.unflatten();
        Ok(Generator { spec, params, weights })
    }

    /// Per-entry weight tensors, untracked.
    pub fn weights(&self) -> &[Tensor<T>] {
        &self.weights
    }

    /// `w` for one `(class, z)` pair.
    pub fn map_latent(&self, class: usize, z: &Tensor<T>) -> Result<Tensor<T>> {
        let z = z.reshape(&[1, self.spec.z_dim])?;
        self.map_batch(&self.weights, &[class], &z)?.reshape(&[self.spec.w_dim])
    }

    /// Mapping network over a batch, `N × z_dim → N × w_dim`.
    pub fn map_batch(&self, weights: &[Tensor<T>], classes: &[usize], z: &Tensor<T>) -> Result<Tensor<T>> {
        let s = &self.spec;
        if let Some(c) = classes.iter().find(|&&c| c >= s.classes) {
            return Err(Error::Invalid(format!("class {c} out of range for {} classes", s.classes)));
        }
        if z.shape() != [classes.len(), s.z_dim] {
            return Err(Error::shape("map_batch", format!("z {:?} for {} classes", z.shape(), classes.len())));
        }
        let e = weights[0].index_select(classes)?;
        let h = z
            .matmul_t(&weights[1], false, true)?
            .add(&e.matmul_t(&weights[2], false, true)?)?
            .add(&weights[3])?
            .leaky_relu(T::of(SLOPE))?;
        h.matmul_t(&weights[4], false, true)?.add(&weights[5])
    }

    fn block(&self, weights: &[Tensor<T>], k: usize, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        let base = 7 + 6 * k;
        let cout = self.spec.channels_at(k + 1);
        let n = x.shape()[0];
        let modulation = |wt: &Tensor<T>, b: &Tensor<T>| -> Result<Tensor<T>> {
            w.matmul_t(wt, false, true)?.add(b)?.reshape(&[n, cout, 1, 1])
        };
        let scale = modulation(&weights[base + 2], &weights[base + 3])?.add_scalar(T::one())?;
        let shift = modulation(&weights[base + 4], &weights[base + 5])?;
        let bias = weights[base + 1].reshape(&[cout, 1, 1])?;
        let h = x
            .upsample_nearest(2)?
            .conv2d(&weights[base], 1)?
            .add(&bias)?
            .mul(&scale)?
            .add(&shift)?
            .leaky_relu(T::of(SLOPE))?;
        if k + 1 < self.spec.blocks {
            return Ok(h);
        }
        let rgb_w = &weights[weights.len() - 2];
        let rgb_b = weights[weights.len() - 1].reshape(&[self.spec.image_channels, 1, 1])?;
        h.conv2d(rgb_w, 0)?.add(&rgb_b)?.tanh()
    }

    fn check_classes_z(&self, classes: &[usize], z: &Tensor<T>) -> Result<()> {
        if z.rank() != 2 || z.shape()[0] != classes.len() {
            return Err(Error::shape("generator", format!("z {:?} for {} classes", z.shape(), classes.len())));
        }
        Ok(())
    }

    /// Runs mapping once, then blocks `0..cut`; returns the batch latent at `cut`.
    pub fn partial_forward_batch(&self, classes: &[usize], z: &Tensor<T>, cut: usize) -> Result<LatentBatch<T>> {
        self.partial_forward_with(&self.weights, classes, z, cut)
    }

    pub(crate) fn partial_forward_with(
        &self,
        weights: &[Tensor<T>],
        classes: &[usize],
        z: &Tensor<T>,
        cut: usize,
    ) -> Result<LatentBatch<T>> {
        let s = &self.spec;
        if cut > s.blocks {
            return Err(Error::Invalid(format!("cut {cut} out of range 0..={}", s.blocks)));
        }
        self.check_classes_z(classes, z)?;
        let n = classes.len();
        let w = self.map_batch(weights, classes, z)?;
        let c = &weights[6];
        let mut cs = vec![1];
        cs.extend_from_slice(c.shape());
        let mut x = c.reshape(&cs)?.broadcast_to(&[n, s.base_channels, s.base_size, s.base_size])?;
        for k in 0..cut {
            x = self.block(weights, k, &x, &w)?;
        }
        let styles = (cut..s.blocks).map(|_| w.clone()).collect();
        Ok(LatentBatch { cut, features: x, styles })
    }

    pub fn partial_forward(&self, class: usize, z: &Tensor<T>, cut: usize) -> Result<GenLatent<T>> {
        let z = z.reshape(&[1, self.spec.z_dim])?;
        let mut v = self.partial_forward_batch(&[class], &z, cut)?.split()?;
        Ok(v.remove(0))
    }

    /// Runs blocks `cut..B`; the identity at cut `B`.
    pub fn synth_batch(&self, latents: &LatentBatch<T>) -> Result<Tensor<T>> {
        self.synth_with(&self.weights, latents)
    }

    pub(crate) fn synth_with(&self, weights: &[Tensor<T>], latents: &LatentBatch<T>) -> Result<Tensor<T>> {
        let s = &self.spec;
        let cut = latents.cut;
        if cut > s.blocks || latents.styles.len() != s.blocks - cut {
            return Err(Error::Invalid(format!(
                "latent at cut {cut} carries {} styles",
                latents.styles.len()
            )));
        }
        let fs = self.spec.feature_shape(cut);
        let x = &latents.features;
        if x.rank() != 4 || x.shape()[1..] != fs {
            return Err(Error::shape("synth_from", format!("feature {:?} vs N×{fs:?}", x.shape())));
        }
        let n = x.shape()[0];
        for st in &latents.styles {
            if st.shape() != [n, s.w_dim] {
                return Err(Error::shape("synth_from", format!("style {:?} vs {:?}", st.shape(), [n, s.w_dim])));
            }
        }
        let mut x = x.clone();
        for (i, k) in (cut..s.blocks).enumerate() {
            x = self.block(weights, k, &x, &latents.styles[i])?;
        }
        Ok(x)
    }

    pub fn synth_from(&self, latent: &GenLatent<T>) -> Result<Tensor<T>> {
        let img = self.synth_batch(&LatentBatch::stack(std::slice::from_ref(latent))?)?;
        img.reshape(&img.shape()[1..])
    }

    /// The full pass `G(z)` for a batch.
    pub fn forward_batch(&self, classes: &[usize], z: &Tensor<T>) -> Result<Tensor<T>> {
        self.synth_batch(&self.partial_forward_batch(classes, z, 0)?)
    }

    /// Empirical per-coordinate mean and variance of feed-forward features of
    /// `class` at `cut` over `m` samples.
    pub fn feature_moments(&self, class: usize, cut: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        if m == 0 {
            return Err(Error::Invalid("moment estimation needs at least one sample".into()));
        }
        let d: usize = self.spec.feature_shape(cut).iter().product();
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        let mut done = 0;
        while done < m {
            let b = (m - done).min(256);
            let z = gaussian(rng, &[b, self.spec.z_dim]);
            let lat = self.partial_forward_batch(&vec![class; b], &z, cut)?;
            for row in lat.features.values().chunks_exact(d) {
                for (j, v) in row.iter().enumerate() {
                    let v = v.as_f64();
                    sum[j] += v;
                    sum_sq[j] += v * v;
                }
            }
            done += b;
        }
        let mf = m as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / mf).collect();
        let var = sum_sq.iter().zip(&mean).map(|(q, mu)| (q / mf - mu * mu).max(0.0)).collect();
        Ok((mean, var))
    }

    /// `count` latents of `class` at `cut`. Gaussian mode draws features from
    /// the moments of `m` feed-forward samples; styles always come from fresh
    /// mapping passes.
    pub fn init_latents(
        &self,
        mode: InitMode,
        class: usize,
        count: usize,
        cut: usize,
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<LatentBatch<T>> {
        if count == 0 {
            return Err(Error::Invalid("latent count must be >= 1".into()));
        }
        let z = gaussian(rng, &[count, self.spec.z_dim]);
        let lat = self.partial_forward_batch(&vec![class; count], &z, cut)?;
        match mode {
            InitMode::FeedForward => Ok(lat),
            InitMode::Gaussian => {
                let (mean, var) = self.feature_moments(class, cut, m, rng)?;
                let d = mean.len();
                let data = (0..count * d)
                    .map(|i| {
                        let j = i % d;
                        T::of(mean[j] + var[j].sqrt() * rng.sample::<f64, _>(StandardNormal))
                    })
                    .collect();
                Ok(LatentBatch {
                    features: Tensor::new(lat.features.shape(), data)?,
                    ..lat
                })
            }
        }
    }
}

/// Standard normal tensor.
pub fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect())
        .expect("shape and length agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GenSpec {
        GenSpec {
            z_dim: 4,
            w_dim: 5,
            blocks: 2,
            base_size: 2,
            base_channels: 8,
            out_size: 8,
            image_channels: 3,
            classes: 3,
            seed: 1,
        }
    }

    #[test]
    fn spec_validation() {
        assert!(GenSpec::desk(10, 0).validate().is_ok());
        let mut s = tiny();
        s.out_size = 16;
        assert!(s.validate().is_err());
        s = tiny();
        s.blocks = 1;
        s.out_size = 4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn desk_feature_shapes() {
        let s = GenSpec::desk(10, 0);
        assert_eq!(s.feature_shape(0), [128, 2, 2]);
        assert_eq!(s.feature_shape(2), [32, 8, 8]);
        assert_eq!(s.feature_shape(4), [3, 32, 32]);
    }

    #[test]
    fn mapping_is_conditional_and_deterministic() {
        let g = Generator::<f64>::random(tiny()).unwrap();
        let z = Tensor::from_vec(vec![0.1, -0.3, 0.5, 0.2]);
        let a = g.map_latent(1, &z).unwrap();
        assert_eq!(a.shape(), &[5]);
        assert!(a.bit_eq(&g.map_latent(1, &z).unwrap()));
        assert!(!a.bit_eq(&g.map_latent(2, &z).unwrap()));
        assert!(g.map_latent(3, &z).is_err());
    }

    #[test]
    fn degenerate_cuts() {
        let g = Generator::<f64>::random(tiny()).unwrap();
        let z = Tensor::from_vec(vec![0.1, -0.3, 0.5, 0.2]);
        let l0 = g.partial_forward(0, &z, 0).unwrap();
        assert_eq!(l0.styles.len(), 2);
        assert!(l0.feature.bit_eq(&g.weights()[6]));
        let lb = g.partial_forward(0, &z, 2).unwrap();
        assert!(lb.styles.is_empty());
        assert!(g.synth_from(&lb).unwrap().bit_eq(&lb.feature));
        assert!(g.partial_forward(0, &z, 3).is_err());
    }

    #[test]
    fn stack_split_roundtrip() {
        let g = Generator::<f64>::random(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = g.init_latents(InitMode::FeedForward, 1, 3, 1, 0, &mut rng).unwrap();
        let back = LatentBatch::stack(&b.split().unwrap()).unwrap();
        assert!(back.features.bit_eq(&b.features));
        assert!(back.styles[0].bit_eq(&b.styles[0]));
    }

    #[test]
    fn degrees_of_freedom_shrink_with_cut() {
        let s = GenSpec::desk(10, 0);
        for n in 1..s.blocks {
            assert!(s.latent_dof(n) > s.blocks * s.w_dim);
        }
    }
}
