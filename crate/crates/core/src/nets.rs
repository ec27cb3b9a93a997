//! Classifier backbones and flat parameter vectors.
//!
//! All networks read their weights out of one flat 1-D parameter tensor, so
//! the same forward pass serves plain training (untracked values), gradient
//! matching (the parameters are a tracked leaf) and trajectory matching (the
//! parameters are themselves a tracked function of the synthetic data).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Groups used by [`Norm::Group`].
pub const GROUP_NORM_GROUPS: usize = 4;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    ConvNet,
    Mlp,
    AltConvNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Norm {
    Instance,
    None,
    Group,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::ConvNet => "convnet",
            Family::Mlp => "mlp",
            Family::AltConvNet => "altconvnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "convnet" => Ok(Family::ConvNet),
            "mlp" => Ok(Family::Mlp),
            "altconvnet" => Ok(Family::AltConvNet),
            _ => Err(Error::Config(format!("unknown architecture family `{s}`"))),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Family::ConvNet => 0,
            Family::Mlp => 1,
            Family::AltConvNet => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        [Family::ConvNet, Family::Mlp, Family::AltConvNet]
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown family code {c}")))
    }
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::Instance => "instance",
            Norm::None => "none",
            Norm::Group => "group",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(Norm::Instance),
            "none" => Ok(Norm::None),
            "group" => Ok(Norm::Group),
            _ => Err(Error::Config(format!("unknown norm `{s}`"))),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Norm::Instance => 0,
            Norm::None => 1,
            Norm::Group => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        [Norm::Instance, Norm::None, Norm::Group]
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown norm code {c}")))
    }
}

/// Architecture description. For `Mlp`, `depth` is the number of hidden layers
/// and `width` their size.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NetSpec {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
    pub norm: Norm,
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
}

impl NetSpec {
    /// Depth-`depth` ConvNet: `depth × [conv3×3 → instance norm → relu → avgpool2]`.
    pub fn convnet(depth: usize, width: usize, image_size: usize, channels: usize, classes: usize) -> Self {
        NetSpec {
            family: Family::ConvNet,
            depth,
            width,
            norm: Norm::Instance,
            image_size,
            channels,
            classes,
        }
    }

    /// The distillation backbone at desk scale: depth 3, width 64.
    pub fn desk_backbone(image_size: usize, channels: usize, classes: usize) -> Self {
        Self::convnet(3, 64, image_size, channels, classes)
    }

    /// Depth 3/5/6/7 by resolution, 128 filters.
    pub fn full_backbone(image_size: usize, channels: usize, classes: usize) -> Self {
        let depth = match image_size {
            0..=32 => 3,
            33..=128 => 5,
            129..=256 => 6,
            _ => 7,
        };
        Self::convnet(depth, 128, image_size, channels, classes)
    }

    /// Unseen evaluation MLP: two hidden layers of width 256.
    pub fn mlp(image_size: usize, channels: usize, classes: usize) -> Self {
        NetSpec {
            family: Family::Mlp,
            depth: 2,
            width: 256,
            norm: Norm::None,
            image_size,
            channels,
            classes,
        }
    }

    /// Unseen evaluation ConvNet variant without normalization, width 64.
    pub fn alt_convnet(depth: usize, image_size: usize, channels: usize, classes: usize) -> Self {
        NetSpec {
            family: Family::AltConvNet,
            depth,
            width: 64,
            norm: Norm::None,
            image_size,
            channels,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.depth == 0 || self.width == 0 || self.channels == 0 || self.image_size == 0 {
            return Err(Error::Config(format!("degenerate network spec {self:?}")));
        }
        if self.is_conv() && self.image_size % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by 2^{}",
                self.image_size, self.depth
            )));
        }
        if self.norm == Norm::Group && self.width % GROUP_NORM_GROUPS != 0 {
            return Err(Error::Config(format!(
                "group norm needs width divisible by {GROUP_NORM_GROUPS}"
            )));
        }
        Ok(())
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.family, Family::ConvNet | Family::AltConvNet)
    }

    /// Short human-readable name, e.g. `convnet-d3w64`.
    pub fn label(&self) -> String {
        let base = format!("{}-d{}w{}", self.family.name(), self.depth, self.width);
        match (self.family, self.norm) {
            (Family::ConvNet, Norm::Instance) | (Family::Mlp | Family::AltConvNet, Norm::None) => base,
            (_, norm) => format!("{base}-{}norm", norm.name()),
        }
    }

    /// Dimension of the pre-classifier embedding.
    pub fn feature_dim(&self) -> usize {
        if self.is_conv() {
            let s = self.image_size >> self.depth;
            self.width * s * s
        } else {
            self.width
        }
    }

    /// Named parameter shapes, in storage order.
    pub fn layout(&self) -> Vec<ParamEntry> {
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        if self.is_conv() {
            let mut cin = self.channels;
            for k in 0..self.depth {
                shapes.push((format!("conv{k}.weight"), vec![self.width, cin, 3, 3]));
                shapes.push((format!("conv{k}.bias"), vec![self.width]));
                cin = self.width;
            }
        } else {
            let mut fan_in = self.channels * self.image_size * self.image_size;
            for k in 0..self.depth {
                shapes.push((format!("fc{k}.weight"), vec![self.width, fan_in]));
                shapes.push((format!("fc{k}.bias"), vec![self.width]));
                fan_in = self.width;
            }
        }
        shapes.push(("head.weight".into(), vec![self.classes, self.feature_dim()]));
        shapes.push(("head.bias".into(), vec![self.classes]));
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

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }

    fn fan_in(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

/// Flattened network parameters with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T: Scalar> {
    pub values: Vec<T>,
    pub layout: Vec<ParamEntry>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn new(values: Vec<T>, layout: Vec<ParamEntry>) -> Result<Self> {
        let mut expect = 0;
        for e in &layout {
            if e.offset != expect {
                return Err(Error::Invalid(format!("layout gap at `{}`", e.name)));
            }
            expect += e.len();
        }
        if expect != values.len() {
            return Err(Error::Invalid(format!(
                "layout covers {expect} values, got {}",
                values.len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Vec<ParamEntry>) -> Self {
        let n = layout.iter().map(ParamEntry::len).sum();
        ParamVector {
            values: vec![T::zero(); n],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector<T>) -> bool {
        self.layout == other.layout
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.layout
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.values[e.offset..e.offset + e.len()])
    }

    /// Untracked 1-D tensor of the values.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(self.values.clone())
    }

    /// Replaces the values with those of a 1-D tensor of the same length.
    pub fn with_values(&self, t: &Tensor<T>) -> Result<Self> {
        ParamVector::new(t.to_vec(), self.layout.clone())
    }

    /// One tensor per layout entry.
    pub fn unflatten(&self) -> Vec<Tensor<T>> {
        self.layout
            .iter()
            .map(|e| {
                Tensor::new(&e.shape, self.values[e.offset..e.offset + e.len()].to_vec())
                    .expect("layout entries match their shapes")
            })
            .collect()
    }

    /// Inverse of [`unflatten`](Self::unflatten).
    pub fn flatten(parts: &[Tensor<T>], layout: Vec<ParamEntry>) -> Result<Self> {
        if parts.len() != layout.len() {
            return Err(Error::Invalid("part count differs from layout".into()));
        }
        let mut values = Vec::new();
        for (p, e) in parts.iter().zip(&layout) {
            if p.shape() != e.shape.as_slice() {
                return Err(Error::shape("flatten", format!("{:?} vs {:?}", p.shape(), e.shape)));
            }
            values.extend_from_slice(p.values());
        }
        ParamVector::new(values, layout)
    }

    pub fn dist_sq(&self, other: &ParamVector<T>) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum()
    }
}

/// Kaiming-uniform weights (ReLU gain) for hidden layers, `1/sqrt(fan_in)`
/// bound for the classifier head, zero biases. Deterministic in `seed`.
pub fn init_params<T: Scalar>(spec: &NetSpec, seed: u64) -> ParamVector<T> {
    let layout = spec.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for e in &layout {
        if e.is_bias() {
            values.extend(std::iter::repeat(T::zero()).take(e.len()));
            continue;
        }
        let fan_in = e.fan_in() as f64;
        let bound = if e.name.starts_with("head") {
            1.0 / fan_in.sqrt()
        } else {
            (6.0 / fan_in).sqrt()
        };
        values.extend((0..e.len()).map(|_| T::of(rng.gen_range(-bound..bound))));
    }
    ParamVector { values, layout }
}

fn take<T: Scalar>(params: &Tensor<T>, e: &ParamEntry) -> Result<Tensor<T>> {
    params.narrow(e.offset, e.len())?.reshape(&e.shape)
}

fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    x.matmul_t(w, false, true)?.add(b)
}

fn check_batch<T: Scalar>(spec: &NetSpec, params: &Tensor<T>, batch: &Tensor<T>) -> Result<()> {
    let want = [spec.channels, spec.image_size, spec.image_size];
    if batch.rank() != 4 || batch.shape()[1..] != want {
        return Err(Error::shape(
            "forward",
            format!("batch {:?} vs expected N×{want:?}", batch.shape()),
        ));
    }
    if params.shape() != [spec.param_count()] {
        return Err(Error::shape(
            "forward",
            format!("params {:?} vs {} for {}", params.shape(), spec.param_count(), spec.label()),
        ));
    }
    Ok(())
}

/// The flattened pre-classifier activation ψ(x), `N × feature_dim`.
pub fn feature_extract<T: Scalar>(spec: &NetSpec, params: &Tensor<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    check_batch(spec, params, batch)?;
    let layout = spec.layout();
    let n = batch.shape()[0];
    let eps = T::of(NORM_EPS);
    let mut x = batch.clone();
    if spec.is_conv() {
        for k in 0..spec.depth {
            let w = take(params, &layout[2 * k])?;
            let b = take(params, &layout[2 * k + 1])?.reshape(&[spec.width, 1, 1])?;
            x = x.conv2d(&w, 1)?.add(&b)?;
            x = match spec.norm {
                Norm::Instance => x.instance_norm(eps)?,
                Norm::Group => x.group_norm(GROUP_NORM_GROUPS, eps)?,
                Norm::None => x,
            };
            x = x.relu()?.avgpool2d(2)?;
        }
        x.reshape(&[n, spec.feature_dim()])
    } else {
        x = x.reshape(&[n, spec.channels * spec.image_size * spec.image_size])?;
        for k in 0..spec.depth {
            let w = take(params, &layout[2 * k])?;
            let b = take(params, &layout[2 * k + 1])?;
            x = linear(&x, &w, &b)?.relu()?;
        }
        Ok(x)
    }
}

/// Class logits, `N × classes`.
pub fn forward_logits<T: Scalar>(spec: &NetSpec, params: &Tensor<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let feats = feature_extract(spec, params, batch)?;
    let layout = spec.layout();
    let w = take(params, &layout[layout.len() - 2])?;
    let b = take(params, &layout[layout.len() - 1])?;
    linear(&feats, &w, &b)
}

/// Mean negative log-likelihood of the labels under softmax(logits).
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    logits.softmax_cross_entropy(labels)
}

/// Argmax predictions, evaluated untracked in chunks of `chunk` images.
pub fn predict<T: Scalar>(spec: &NetSpec, params: &ParamVector<T>, images: &Tensor<T>, chunk: usize) -> Result<Vec<usize>> {
    let p = params.to_tensor();
    let images = images.detach();
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = chunk.max(1).min(n - start);
        let logits = forward_logits(spec, &p, &images.narrow(start, len)?)?;
        for row in logits.values().chunks_exact(spec.classes) {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            out.push(best);
        }
        start += len;
    }
    Ok(out)
}

pub fn accuracy<T: Scalar>(spec: &NetSpec, params: &ParamVector<T>, images: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(spec, params, images, 128)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
