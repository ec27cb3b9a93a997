//! The distillation loop over pixels or generator latents.
//!
//! Each iteration renders the synthetic set through the frozen generator,
//! evaluates the chosen objective against real data with a shared
//! augmentation, and takes a momentum-SGD step on the latents. Gradients
//! reach the latents through a checkpointed path: the objective is
//! differentiated with respect to the rendered images in its own graph, which
//! is then dropped, and the images are re-rendered with tracking to pull that
//! cotangent back onto the latents.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::container::{read_file, Reader, Writer};
use crate::datakit::{Dataset, Split};
use crate::dsa::{AugSettings, Capture, Siamese};
use crate::error::{Error, Result};
use crate::experts::{sgd_epoch_on, TrajBuffer};
use crate::microstyle::{gaussian, Generator, InitMode, LatentBatch};
use crate::nets::{init_params, NetSpec};
use crate::objectives::{dc_loss, dm_loss, sample_expert_segment, ExpertSegment, Model, MttConfig, MttProblem};
use crate::scalar::Scalar;
use crate::seeds::mix;
use crate::tensor::{backward, is_strict, vjp, Tensor};

pub const MAGIC: &[u8; 8] = b"GLADSYNS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Dc,
    Dm,
    Mtt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dc, Method::Dm, Method::Mtt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dc => "dc",
            Method::Dm => "dm",
            Method::Mtt => "mtt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (dc, dm, mtt)")))
    }
}

/// Where the synthetic set lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Space {
    Pixel,
    /// Per-block style codes only, the learned constant stays fixed.
    WPlus,
    /// The feature entering block `n` plus the styles of blocks `n..B`.
    F(usize),
}

impl Space {
    pub fn name(self) -> String {
        match self {
            Space::Pixel => "pixel".into(),
            Space::WPlus => "wplus".into(),
            Space::F(n) => format!("f{n}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(Space::Pixel),
            "wplus" | "w+" => Ok(Space::WPlus),
            _ => s
                .strip_prefix('f')
                .or_else(|| s.strip_prefix('F'))
                .and_then(|n| n.parse().ok())
                .map(Space::F)
                .ok_or_else(|| Error::Config(format!("unknown space `{s}` (pixel, wplus, f<n>)"))),
        }
    }

    fn tag(self) -> (u8, u32) {
        match self {
            Space::Pixel => (0, 0),
            Space::WPlus => (1, 0),
            Space::F(n) => (2, n as u32),
        }
    }

    fn from_tag(tag: u8, n: u32) -> Result<Self> {
        match tag {
            0 => Ok(Space::Pixel),
            1 => Ok(Space::WPlus),
            2 => Ok(Space::F(n as usize)),
            _ => Err(Error::Format(format!("unknown space tag {tag}"))),
        }
    }

    /// Generator cut the latents are stored at.
    pub fn cut(self) -> usize {
        match self {
            Space::Pixel | Space::WPlus => 0,
            Space::F(n) => n,
        }
    }
}

/// A distilled set. Latents are class-major: rows `c·ipc..(c+1)·ipc` belong
/// to class `c`. In pixel space `latents.features` holds the images and there
/// are no styles.
#[derive(Clone, Debug)]
pub struct SynSet<T: Scalar> {
    pub space: Space,
    pub ipc: usize,
    pub classes: usize,
    pub latents: LatentBatch<T>,
    pub generator_hash: Option<[u8; 8]>,
    pub alpha: T,
}

impl<T: Scalar> SynSet<T> {
    pub fn labels(&self) -> Vec<usize> {
        (0..self.classes).flat_map(|c| std::iter::repeat(c).take(self.ipc)).collect()
    }

    pub fn len(&self) -> usize {
        self.ipc * self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tensors the optimizer updates (α excluded).
    pub fn optimized(&self) -> Vec<&Tensor<T>> {
        match self.space {
            Space::Pixel => vec![&self.latents.features],
            Space::WPlus => self.latents.styles.iter().collect(),
            Space::F(_) => self.latents.tensors(),
        }
    }

    /// Whether tensor `i` of [`optimized`](Self::optimized) is a style code.
    fn is_style(&self, i: usize) -> bool {
        match self.space {
            Space::Pixel => false,
            Space::WPlus => true,
            Space::F(_) => i > 0,
        }
    }

    fn with_optimized(&self, parts: Vec<Tensor<T>>) -> Result<Self> {
        let mut out = self.clone();
        match self.space {
            Space::Pixel => out.latents.features = parts.into_iter().next().expect("one tensor"),
            Space::WPlus => out.latents.styles = parts,
            Space::F(_) => {
                let mut it = parts.into_iter();
                out.latents.features = it.next().expect("feature tensor");
                out.latents.styles = it.collect();
            }
        }
        Ok(out)
    }

    /// The rendered images, untracked.
    pub fn render(&self, generator: Option<&Generator<T>>) -> Result<Tensor<T>> {
        render_latents(self.space, generator, &self.latents.detach(), 0)
    }

    pub fn check_generator(&self, generator: Option<&Generator<T>>) -> Result<()> {
        match (self.space, generator) {
            (Space::Pixel, _) => Ok(()),
            (_, None) => Err(Error::Config(format!("space {} needs a generator", self.space.name()))),
            (_, Some(g)) => {
                if self.generator_hash.is_some_and(|h| h != generator_hash(g)) {
                    return Err(Error::Config("synthetic set was distilled with a different generator".into()));
                }
                Ok(())
            }
        }
    }
}

/// First 8 bytes of SHA-256 over the generator spec and parameters.
pub fn generator_hash<T: Scalar>(g: &Generator<T>) -> [u8; 8] {
    let mut h = Sha256::new();
    h.update(format!("{:?}", g.spec).as_bytes());
    for v in &g.params.values {
        h.update(v.as_f64().to_le_bytes());
    }
    h.finalize()[..8].try_into().expect("8 bytes")
}

fn render_latents<T: Scalar>(space: Space, generator: Option<&Generator<T>>, latents: &LatentBatch<T>, chunk: usize) -> Result<Tensor<T>> {
    if space == Space::Pixel {
        return Ok(latents.features.clone());
    }
    let g = generator.ok_or_else(|| Error::Config("latent spaces need a generator".into()))?;
    let n = latents.len();
    let chunk = if chunk == 0 { n } else { chunk };
    if chunk >= n {
        return g.synth_batch(latents);
    }
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        parts.push(g.synth_batch(&latents.narrow(start, len)?)?);
        start += len;
    }
    Tensor::concat(&parts)
}

/// A loss over the rendered synthetic images and the student step size α.
pub trait Objective<T: Scalar> {
    fn loss(&self, images: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>>;

    /// Loss value and its gradients with respect to `images` and `alpha`.
    fn value_and_grad(&self, images: &Tensor<T>, alpha: &Tensor<T>) -> Result<(T, Tensor<T>, Tensor<T>)> {
        let x = images.detach().leaf();
        let a = alpha.detach().leaf();
        let loss = self.loss(&x, &a)?;
        let mut g = backward(&loss, &[&x, &a], false)?.into_vec().into_iter();
        Ok((loss.item()?, g.next().expect("image grad"), g.next().expect("alpha grad")))
    }
}

/// Gradient of an objective with respect to the synthetic set's optimized
/// tensors, computed in three strictly ordered steps: render untracked,
/// differentiate the objective with respect to the images, re-render tracked
/// and pull the image gradient back with a vjp. Returns the loss value, the
/// gradients in [`SynSet::optimized`] order and the α gradient.
pub fn checkpointed_syn_grad<T: Scalar>(
    generator: Option<&Generator<T>>,
    syn: &SynSet<T>,
    objective: &dyn Objective<T>,
    chunk: usize,
) -> Result<(T, Vec<Tensor<T>>, Tensor<T>)> {
    let images = render_latents(syn.space, generator, &syn.latents.detach(), chunk)?;
    let (value, g_images, g_alpha) = objective.value_and_grad(&images, &Tensor::scalar(syn.alpha))?;
    drop(images);
    if syn.space == Space::Pixel {
        return Ok((value, vec![g_images], g_alpha));
    }
    let g = generator.expect("checked by render");
    let leaves = syn.latents.leaves();
    let probe = SynSet {
        latents: leaves.clone(),
        ..syn.clone()
    };
    let wrt = probe.optimized();
    let n = leaves.len();
    let chunk = if chunk == 0 { n } else { chunk.min(n) };
    let mut grads: Option<Vec<Tensor<T>>> = None;
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let sub = if len == n { leaves.clone() } else { leaves.narrow(start, len)? };
        let out = g.synth_batch(&sub)?;
        let cot = if len == n { g_images.clone() } else { g_images.narrow(start, len)? };
        let part = vjp(&out, &cot, &wrt, false)?.into_vec();
        grads = Some(match grads {
            None => part,
            Some(acc) => acc.iter().zip(&part).map(|(a, b)| a.add(b)).collect::<Result<_>>()?,
        });
        start += len;
    }
    Ok((value, grads.expect("non-empty synthetic set"), g_alpha))
}

/// The same gradient from a single graph through generator and objective.
pub fn direct_syn_grad<T: Scalar>(
    generator: Option<&Generator<T>>,
    syn: &SynSet<T>,
    objective: &dyn Objective<T>,
) -> Result<(T, Vec<Tensor<T>>, Tensor<T>)> {
    let leaves = syn.latents.leaves();
    let probe = SynSet {
        latents: leaves.clone(),
        ..syn.clone()
    };
    let alpha = Tensor::scalar(syn.alpha).leaf();
    let images = render_latents(syn.space, generator, &leaves, 0)?;
    let loss = objective.loss(&images, &alpha)?;
    let mut wrt = probe.optimized();
    wrt.push(&alpha);
    let mut g = backward(&loss, &wrt, false)?.into_vec();
    let ga = g.pop().expect("alpha grad");
    Ok((loss.item()?, g, ga))
}

/// Hyperparameters of the latent optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub latent_lr: f64,
    pub alpha_lr: f64,
    pub momentum: f64,
    pub optimize_alpha: bool,
    /// Clamp pixel-space images to `[-1, 1]` after each step.
    pub clamp_pixels: bool,
}

/// Momentum buffers, one per optimized tensor plus α.
#[derive(Clone, Debug, Default)]
pub struct MomentumState {
    bufs: Vec<Vec<f64>>,
    alpha: f64,
}

pub const ALPHA_FLOOR: f64 = 1e-8;
/// Style codes step at this fraction of the latent learning rate.
pub const STYLE_LR_SCALE: f64 = 0.1;

/// One SGD-with-momentum step: `v ← μ v + g`, `x ← x − lr v`, with the style
/// codes at `lr / 10` and α at `alpha_lr`, floored to stay positive.
pub fn latent_sgd_step<T: Scalar>(
    syn: &SynSet<T>,
    grads: &[Tensor<T>],
    alpha_grad: Option<T>,
    cfg: &StepConfig,
    state: &mut MomentumState,
) -> Result<SynSet<T>> {
    let opt = syn.optimized();
    if grads.len() != opt.len() {
        return Err(Error::Invalid(format!(
            "got {} gradients for {} optimized tensors",
            grads.len(),
            opt.len()
        )));
    }
    if state.bufs.is_empty() {
        state.bufs = opt.iter().map(|t| vec![0.0; t.numel()]).collect();
    }
    let mut parts = Vec::with_capacity(opt.len());
    for (i, (x, g)) in opt.iter().zip(grads).enumerate() {
        if g.shape() != x.shape() {
            return Err(Error::shape("latent_sgd_step", format!("{:?} vs {:?}", g.shape(), x.shape())));
        }
        let lr = if syn.is_style(i) { cfg.latent_lr * STYLE_LR_SCALE } else { cfg.latent_lr };
        let buf = &mut state.bufs[i];
        let mut values = Vec::with_capacity(x.numel());
        for ((b, &xv), &gv) in buf.iter_mut().zip(x.values()).zip(g.values()) {
            *b = cfg.momentum * *b + gv.as_f64();
            let mut v = xv.as_f64() - lr * *b;
            if cfg.clamp_pixels && syn.space == Space::Pixel {
                v = v.clamp(-1.0, 1.0);
            }
            values.push(T::of(v));
        }
        parts.push(Tensor::new(x.shape(), values)?);
    }
    let mut out = syn.with_optimized(parts)?;
    if cfg.optimize_alpha {
        let ga = alpha_grad.ok_or_else(|| Error::Invalid("missing step-size gradient".into()))?;
        state.alpha = cfg.momentum * state.alpha + ga.as_f64();
        out.alpha = T::of((syn.alpha.as_f64() - cfg.alpha_lr * state.alpha).max(ALPHA_FLOOR));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelInit {
    Real,
    Noise,
}

impl PixelInit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(PixelInit::Real),
            "noise" => Ok(PixelInit::Noise),
            _ => Err(Error::Config(format!("unknown pixel init `{s}` (real, noise)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DistillConfig {
    pub method: Method,
    pub space: Space,
    pub ipc: usize,
    pub iterations: usize,
    pub step: StepConfig,
    pub init_alpha: f64,
    pub mtt: MttConfig,
    /// Skip the reverse-replay path and differentiate the full unroll.
    pub mtt_unrolled: bool,
    pub aug: AugSettings,
    pub seed: u64,
    pub net: NetSpec,
    pub latent_init: InitMode,
    pub init_samples: usize,
    pub pixel_init: PixelInit,
    /// Real images per class per iteration (gradient and distribution matching).
    pub real_batch: usize,
    pub dc_outer_loop: usize,
    pub dc_inner_loop: usize,
    pub dc_net_lr: f64,
    pub dc_per_layer: bool,
    /// Images per generator pass; 0 renders the whole set at once.
    pub gen_batch: usize,
}

impl DistillConfig {
    /// Desk defaults for `method` in `space`.
    pub fn desk(method: Method, space: Space, ipc: usize, net: NetSpec) -> Self {
        let (latent_lr, real_batch) = match method {
            Method::Dc => (10.0, 64),
            Method::Dm => (1.0, 64),
            Method::Mtt => (100.0, 0),
        };
        DistillConfig {
            method,
            space,
            ipc,
            iterations: 5000,
            step: StepConfig {
                latent_lr,
                alpha_lr: 1e-5,
                momentum: 0.5,
                optimize_alpha: method == Method::Mtt,
                clamp_pixels: false,
            },
            init_alpha: 0.01,
            mtt: MttConfig::default(),
            mtt_unrolled: false,
            aug: AugSettings::default(),
            seed: 0,
            net,
            latent_init: InitMode::FeedForward,
            init_samples: 1024,
            pixel_init: PixelInit::Real,
            real_batch,
            dc_outer_loop: if ipc == 1 { 1 } else { 10 },
            dc_inner_loop: if ipc == 1 { 1 } else { 50 },
            dc_net_lr: 0.01,
            dc_per_layer: false,
            gen_batch: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.ipc == 0 {
            return Err(Error::Config("iterations and ipc must be >= 1".into()));
        }
        if self.step.latent_lr < 0.0 || self.step.alpha_lr < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.init_alpha <= 0.0 {
            return Err(Error::Config("initial step size must be positive".into()));
        }
        if self.method == Method::Mtt {
            self.mtt.validate()?;
        }
        self.net.validate()
    }
}

/// Initial synthetic set.
pub fn init_synset<T: Scalar>(cfg: &DistillConfig, data: &Dataset, generator: Option<&Generator<T>>) -> Result<SynSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x1A7E));
    let classes = data.classes;
    let latents = match cfg.space {
        Space::Pixel => {
            let features = match cfg.pixel_init {
                PixelInit::Real => {
                    let mut idx = Vec::with_capacity(classes * cfg.ipc);
                    for c in 0..classes {
                        let mut pool = data.class_indices(Split::Train, c);
                        if pool.len() < cfg.ipc {
                            return Err(Error::Invalid(format!("class {c} has fewer than {} training images", cfg.ipc)));
                        }
                        pool.shuffle(&mut rng);
                        idx.extend_from_slice(&pool[..cfg.ipc]);
                    }
                    data.batch(&idx)
                }
                PixelInit::Noise => {
                    gaussian::<T>(&mut rng, &[classes * cfg.ipc, data.channels, data.size, data.size]).mul_scalar(T::of(0.5))?
                }
            };
            LatentBatch {
                cut: 0,
                features,
                styles: vec![],
            }
        }
        space => {
            let g = generator.ok_or_else(|| Error::Config(format!("space {} needs a generator", space.name())))?;
            if g.spec.classes != classes || g.spec.out_size != data.size || g.spec.image_channels != data.channels {
                return Err(Error::Config("generator does not match the dataset".into()));
            }
            if let Space::F(n) = space {
                if n > g.spec.blocks {
                    return Err(Error::Config(format!("cut f{n} exceeds the generator's {} blocks", g.spec.blocks)));
                }
            }
            let parts = (0..classes)
                .map(|c| g.init_latents(cfg.latent_init, c, cfg.ipc, space.cut(), cfg.init_samples, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let mut all = Vec::new();
            for p in parts {
                all.extend(p.split()?);
            }
            LatentBatch::stack(&all)?
        }
    };
    Ok(SynSet {
        space: cfg.space,
        ipc: cfg.ipc,
        classes,
        latents: latents.detach(),
        generator_hash: generator.filter(|_| cfg.space != Space::Pixel).map(generator_hash),
        alpha: T::of(cfg.init_alpha),
    })
}

fn sample_real<T: Scalar>(data: &Dataset, class: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let mut pool = data.class_indices(Split::Train, class);
    if pool.is_empty() {
        return Err(Error::Invalid(format!("class {class} has no training images")));
    }
    pool.shuffle(rng);
    pool.truncate(count.max(1));
    Ok(data.batch(&pool))
}

/// Gradient matching summed over classes at fixed network parameters.
pub struct DcObjective<'a, T: Scalar> {
    pub model: &'a dyn Model<T>,
    pub params: Vec<T>,
    pub real: Vec<Tensor<T>>,
    pub ipc: usize,
    pub per_layer: bool,
    pub aug: Vec<Siamese>,
}

impl<T: Scalar> Objective<T> for DcObjective<'_, T> {
    fn loss(&self, images: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
        let mut total: Option<Tensor<T>> = None;
        for (c, real) in self.real.iter().enumerate() {
            let syn = images.narrow(c * self.ipc, self.ipc)?;
            let (syn, real) = match self.aug.get(c) {
                Some(a) => (a.apply("syn", &syn)?, a.apply("real", real)?),
                None => (syn, real.clone()),
            };
            let l = dc_loss(
                self.model,
                &self.params,
                &syn,
                &vec![c; self.ipc],
                &real,
                &vec![c; real.shape()[0]],
                self.per_layer,
            )?;
            total = Some(match total {
                Some(t) => t.add(&l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| Error::Invalid("no classes".into()))?;
        total.add(&alpha.mul_scalar(T::zero())?)
    }
}

/// Distribution matching under a fixed random embedding.
pub struct DmObjective<'a, T: Scalar> {
    pub model: &'a dyn Model<T>,
    pub psi: Vec<T>,
    pub real: Vec<Tensor<T>>,
    pub ipc: usize,
    pub aug: Vec<Siamese>,
}

impl<T: Scalar> Objective<T> for DmObjective<'_, T> {
    fn loss(&self, images: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
        let mut syn = Vec::with_capacity(self.real.len());
        let mut real = Vec::with_capacity(self.real.len());
        for (c, r) in self.real.iter().enumerate() {
            let s = images.narrow(c * self.ipc, self.ipc)?;
            match self.aug.get(c) {
                Some(a) => {
                    syn.push(a.apply("syn", &s)?);
                    real.push(a.apply("real", r)?);
                }
                None => {
                    syn.push(s);
                    real.push(r.clone());
                }
            }
        }
        dm_loss(self.model, &self.psi, &syn, &real)?.add(&alpha.mul_scalar(T::zero())?)
    }
}

/// Trajectory matching against one expert segment.
pub struct MttObjective<'a, T: Scalar> {
    pub problem: MttProblem<'a, T>,
    pub unrolled: bool,
}

impl<T: Scalar> Objective<T> for MttObjective<'_, T> {
    fn loss(&self, images: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
        self.problem.loss_unrolled(images, alpha)
    }

    fn value_and_grad(&self, images: &Tensor<T>, alpha: &Tensor<T>) -> Result<(T, Tensor<T>, Tensor<T>)> {
        if self.unrolled {
            let x = images.detach().leaf();
            let a = alpha.detach().leaf();
            let loss = self.loss(&x, &a)?;
            let mut g = backward(&loss, &[&x, &a], false)?.into_vec().into_iter();
            return Ok((loss.item()?, g.next().expect("image grad"), g.next().expect("alpha grad")));
        }
        self.problem.grad_constmem(images, alpha)
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutput<T: Scalar> {
    pub synset: SynSet<T>,
    pub losses: Vec<f64>,
}

/// Runs `cfg.iterations` distillation steps. `capture` records every
/// augmentation draw applied, tagged real or syn.
pub fn distill<T: Scalar>(
    cfg: &DistillConfig,
    data: &Dataset,
    generator: Option<&Generator<T>>,
    experts: Option<&TrajBuffer>,
    capture: Option<Capture>,
) -> Result<DistillOutput<T>> {
    cfg.validate()?;
    if cfg.method == Method::Mtt && experts.is_none() {
        return Err(Error::Config("trajectory matching needs an expert buffer".into()));
    }
    if cfg.space != Space::Pixel && generator.is_none() {
        return Err(Error::Config(format!("space {} needs a generator", cfg.space.name())));
    }
    if let Some(b) = experts {
        if b.spec != cfg.net {
            return Err(Error::Config(format!(
                "expert buffer was trained with {}, distillation uses {}",
                b.spec.label(),
                cfg.net.label()
            )));
        }
    }
    let mut syn = init_synset(cfg, data, generator)?;
    let model: &dyn Model<T> = &cfg.net;
    let labels = syn.labels();
    let mut state = MomentumState::default();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut dc_params: Vec<T> = Vec::new();
    let size = data.size;
    let aug_for = |key: u64| -> Vec<Siamese> {
        (0..data.classes as u64)
            .map(|c| Siamese::new(&cfg.aug, size, mix(key, c), capture.clone()))
            .collect()
    };
    for it in 0..cfg.iterations {
        let it_seed = mix(cfg.seed, it as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(it_seed);
        let dc_cycle_start = cfg.method == Method::Dc && it % cfg.dc_outer_loop.max(1) == 0;
        if dc_cycle_start {
            dc_params = init_params::<T>(&cfg.net, it_seed).values;
        }
        let real = |rng: &mut ChaCha8Rng| -> Result<Vec<Tensor<T>>> {
            (0..data.classes).map(|c| sample_real(data, c, cfg.real_batch, rng)).collect()
        };
        let (value, grads, g_alpha) = match cfg.method {
            Method::Dc => {
                let obj = DcObjective {
                    model,
                    params: dc_params.clone(),
                    real: real(&mut rng)?,
                    ipc: cfg.ipc,
                    per_layer: cfg.dc_per_layer,
                    aug: aug_for(it_seed),
                };
                checkpointed_syn_grad(generator, &syn, &obj, cfg.gen_batch)?
            }
            Method::Dm => {
                let obj = DmObjective {
                    model,
                    psi: init_params::<T>(&cfg.net, it_seed).values,
                    real: real(&mut rng)?,
                    ipc: cfg.ipc,
                    aug: aug_for(it_seed),
                };
                checkpointed_syn_grad(generator, &syn, &obj, cfg.gen_batch)?
            }
            Method::Mtt => {
                let buffer = experts.expect("checked above");
                let segment: ExpertSegment<T> = sample_expert_segment(buffer, &cfg.mtt, &mut rng)?.cast();
                let obj = MttObjective {
                    problem: MttProblem {
                        model,
                        segment: &segment,
                        cfg: cfg.mtt,
                        labels: &labels,
                        student_seed: it_seed,
                        aug: cfg.aug.enabled.then_some((&cfg.aug, it_seed)),
                    },
                    unrolled: cfg.mtt_unrolled,
                };
                checkpointed_syn_grad(generator, &syn, &obj, cfg.gen_batch)?
            }
        };
        let v = value.as_f64();
        losses.push(v);
        let finite = v.is_finite()
            && grads.iter().all(|g| g.values().iter().all(|x| x.is_finite()))
            && g_alpha.values().iter().all(|x| x.is_finite());
        if !finite {
            if is_strict() {
                return Err(Error::NonFiniteLoss { iteration: it });
            }
            continue;
        }
        syn = latent_sgd_step(&syn, &grads, Some(g_alpha.item()?), &cfg.step, &mut state)?;
        let cycle_end = (it + 1) % cfg.dc_outer_loop.max(1) == 0;
        if cfg.method == Method::Dc && !cycle_end {
            let images = syn.render(generator)?;
            for _ in 0..cfg.dc_inner_loop {
                sgd_epoch_on(model, &images, &labels, &mut dc_params, cfg.dc_net_lr, 256, mix(it_seed, 7))?;
            }
        }
    }
    Ok(DistillOutput { synset: syn, losses })
}

pub fn synset_bytes<T: Scalar>(s: &SynSet<T>) -> Vec<u8> {
    let mut w = Writer::new(MAGIC);
    let (tag, n) = s.space.tag();
    w.u8(tag);
    w.u32(n);
    w.u32(s.ipc as u32);
    w.u32(s.classes as u32);
    w.u8(s.generator_hash.is_some() as u8);
    w.bytes(&s.generator_hash.unwrap_or_default());
    w.f64(s.alpha.as_f64());
    w.u32(s.latents.cut as u32);
    let lat = s.latents.split().expect("stored latents split by row");
    w.u32(lat.len() as u32);
    for l in &lat {
        w.u32(1 + l.styles.len() as u32);
        for t in std::iter::once(&l.feature).chain(&l.styles) {
            w.shaped_f64(t.shape(), t.values().iter().map(|v| v.as_f64()));
        }
    }
    w.into_bytes()
}

pub fn synset_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<SynSet<T>> {
    let mut r = Reader::new(bytes, MAGIC, "synthetic set")?;
    let tag = r.u8()?;
    let n = r.u32()?;
    let space = Space::from_tag(tag, n)?;
    let ipc = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let has_hash = r.u8()? != 0;
    let hash: [u8; 8] = r.bytes(8)?.try_into().expect("8 bytes");
    let alpha = r.f64()?;
    let cut = r.u32()? as usize;
    let count = r.u32()? as usize;
    if count != ipc * classes || count == 0 || alpha <= 0.0 {
        return Err(Error::Format(format!(
            "synthetic set: {count} latents for ipc {ipc} × {classes} classes, alpha {alpha}"
        )));
    }
    let tensor = |r: &mut Reader| -> Result<Tensor<T>> {
        let (shape, values) = r.shaped_f64()?;
        Tensor::new(&shape, values.into_iter().map(T::of).collect())
    };
    let mut latents = Vec::with_capacity(count);
    for _ in 0..count {
        let k = r.u32()? as usize;
        if k == 0 {
            return Err(Error::Format("synthetic set: latent without a feature".into()));
        }
        let feature = tensor(&mut r)?;
        let styles = (1..k).map(|_| tensor(&mut r)).collect::<Result<Vec<_>>>()?;
        latents.push(crate::microstyle::GenLatent { cut, feature, styles });
    }
    r.finish()?;
    let latents = LatentBatch::stack(&latents).map_err(|e| Error::Format(format!("synthetic set: {e}")))?;
    Ok(SynSet {
        space,
        ipc,
        classes,
        latents,
        generator_hash: has_hash.then_some(hash),
        alpha: T::of(alpha),
    })
}

pub fn save_synset<T: Scalar>(s: &SynSet<T>, path: &Path) -> Result<()> {
    std::fs::write(path, synset_bytes(s))?;
    Ok(())
}

pub fn load_synset<T: Scalar>(path: &Path) -> Result<SynSet<T>> {
    synset_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_names_roundtrip() {
        for s in [Space::Pixel, Space::WPlus, Space::F(0), Space::F(3)] {
            assert_eq!(Space::parse(&s.name()).unwrap(), s);
        }
        assert!(Space::parse("g2").is_err());
        assert_eq!(Method::parse("mtt").unwrap(), Method::Mtt);
    }

    #[test]
    fn vanilla_sgd_step_and_style_rate() {
        let lat = LatentBatch {
            cut: 1,
            features: Tensor::<f64>::from_vec(vec![1.0, 2.0]).reshape(&[1, 2, 1, 1]).unwrap(),
            styles: vec![Tensor::from_vec(vec![3.0]).reshape(&[1, 1]).unwrap()],
        };
        let syn = SynSet {
            space: Space::F(1),
            ipc: 1,
            classes: 1,
            latents: lat,
            generator_hash: None,
            alpha: 0.01,
        };
        let cfg = StepConfig {
            latent_lr: 0.5,
            alpha_lr: 0.0,
            momentum: 0.0,
            optimize_alpha: false,
            clamp_pixels: false,
        };
        let g = vec![
            Tensor::from_vec(vec![1.0, 1.0]).reshape(&[1, 2, 1, 1]).unwrap(),
            Tensor::from_vec(vec![1.0]).reshape(&[1, 1]).unwrap(),
        ];
        let out = latent_sgd_step(&syn, &g, None, &cfg, &mut MomentumState::default()).unwrap();
        assert_eq!(out.latents.features.values(), &[0.5, 1.5]);
        assert_eq!(out.latents.styles[0].values(), &[3.0 - 0.05]);
        assert!(latent_sgd_step(&syn, &g[..1], None, &cfg, &mut MomentumState::default()).is_err());
    }
}
