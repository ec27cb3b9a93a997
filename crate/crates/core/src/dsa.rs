//! Differentiable siamese augmentation.
//!
//! One [`AugParams`] is sampled per iteration from `(seed, iteration)` and
//! applied to both the real and the synthetic batch. Every transform is linear
//! in the pixels, with masks and sampling positions held constant, so gradients
//! flow to the images through all of them.

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds::mix;
use crate::tensor::Tensor;

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const ROTATE_DEG: f64 = 15.0;
pub const BRIGHTNESS: f64 = 0.5;
pub const SATURATION_RANGE: (f64, f64) = (0.0, 2.0);
pub const CONTRAST_RANGE: (f64, f64) = (0.5, 1.5);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugOp {
    Color,
    Crop,
    Cutout,
    Flip,
    Scale,
    Rotate,
}

impl AugOp {
    pub const ALL: [AugOp; 6] = [
        AugOp::Color,
        AugOp::Crop,
        AugOp::Cutout,
        AugOp::Flip,
        AugOp::Scale,
        AugOp::Rotate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugOp::Color => "color",
            AugOp::Crop => "crop",
            AugOp::Cutout => "cutout",
            AugOp::Flip => "flip",
            AugOp::Scale => "scale",
            AugOp::Rotate => "rotate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AugOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Compose every enabled op each iteration.
    All,
    /// Pick one enabled op uniformly each iteration.
    SingleRandom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugSettings {
    pub enabled: bool,
    pub ops: Vec<AugOp>,
    pub strategy: Strategy,
    /// Sample separate parameters for every image index.
    pub per_image: bool,
    pub seed: u64,
}

impl Default for AugSettings {
    fn default() -> Self {
        AugSettings {
            enabled: true,
            ops: AugOp::ALL.to_vec(),
            strategy: Strategy::All,
            per_image: false,
            seed: 0,
        }
    }
}

impl AugSettings {
    pub fn disabled() -> Self {
        AugSettings {
            enabled: false,
            ..Default::default()
        }
    }

    /// Parses a comma-separated op list such as `color,crop,flip`.
    pub fn parse_ops(s: &str) -> Result<Vec<AugOp>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(AugOp::parse)
            .collect()
    }
}

/// Parameters of one augmentation draw. Neutral values mean "op off".
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugParams {
    pub flip: bool,
    /// Shift in pixels along x and y.
    pub crop: (i64, i64),
    /// Cutout square centre (x, y) and side; side 0 disables it.
    pub cutout: (i64, i64, usize),
    pub scale: (f64, f64),
    /// Degrees.
    pub rotate: f64,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
}

impl AugParams {
    pub fn identity() -> Self {
        AugParams {
            flip: false,
            crop: (0, 0),
            cutout: (0, 0, 0),
            scale: (1.0, 1.0),
            rotate: 0.0,
            brightness: 0.0,
            saturation: 1.0,
            contrast: 1.0,
        }
    }

    /// Maximum crop shift for square images of side `size`.
    pub fn crop_radius(size: usize) -> i64 {
        size.div_ceil(8) as i64
    }

    pub fn cutout_size(size: usize) -> usize {
        size.div_ceil(2)
    }

    /// Whether every value lies inside its sampling range for `size`.
    pub fn in_range(&self, size: usize) -> bool {
        let r = Self::crop_radius(size);
        let (cx, cy, side) = self.cutout;
        let s = size as i64;
        self.crop.0.abs() <= r
            && self.crop.1.abs() <= r
            && (side == 0 || side == Self::cutout_size(size))
            && (0..s).contains(&cx)
            && (0..s).contains(&cy)
            && [self.scale.0, self.scale.1]
                .iter()
                .all(|v| (SCALE_RANGE.0..=SCALE_RANGE.1).contains(v))
            && self.rotate.abs() <= ROTATE_DEG
            && self.brightness.abs() <= BRIGHTNESS
            && (SATURATION_RANGE.0..=SATURATION_RANGE.1).contains(&self.saturation)
            && (CONTRAST_RANGE.0..=CONTRAST_RANGE.1).contains(&self.contrast)
    }
}

fn draw(rng: &mut ChaCha8Rng, op: AugOp, size: usize, p: &mut AugParams) {
    match op {
        AugOp::Flip => p.flip = rng.gen_bool(0.5),
        AugOp::Crop => {
            let r = AugParams::crop_radius(size);
            p.crop = (rng.gen_range(-r..=r), rng.gen_range(-r..=r));
        }
        AugOp::Cutout => {
            let s = size as i64;
            p.cutout = (rng.gen_range(0..s), rng.gen_range(0..s), AugParams::cutout_size(size));
        }
        AugOp::Scale => {
            p.scale = (
                rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
                rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            );
        }
        AugOp::Rotate => p.rotate = rng.gen_range(-ROTATE_DEG..=ROTATE_DEG),
        AugOp::Color => {
            p.brightness = rng.gen_range(-BRIGHTNESS..=BRIGHTNESS);
            p.saturation = rng.gen_range(SATURATION_RANGE.0..=SATURATION_RANGE.1);
            p.contrast = rng.gen_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1);
        }
    }
}

/// Deterministic draw for `(settings.seed, iteration, index)`; `index`
/// distinguishes images in per-image mode and is 0 otherwise.
pub fn sample_aug_params(settings: &AugSettings, size: usize, iteration: u64, index: u64) -> AugParams {
    let mut p = AugParams::identity();
    if !settings.enabled || settings.ops.is_empty() {
        return p;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(settings.seed, iteration), index));
    match settings.strategy {
        Strategy::All => {
            for op in AugOp::ALL.iter().filter(|op| settings.ops.contains(op)) {
                draw(&mut rng, *op, size, &mut p);
            }
        }
        Strategy::SingleRandom => {
            let op = settings.ops[rng.gen_range(0..settings.ops.len())];
            draw(&mut rng, op, size, &mut p);
        }
    }
    p
}

/// Sampling grid for `scale` followed by `rotate`, mapping output positions
/// to input positions in normalized coordinates.
fn affine_grid<T: Scalar>(n: usize, h: usize, w: usize, p: &AugParams) -> Result<Tensor<T>> {
    let (sin, cos) = p.rotate.to_radians().sin_cos();
    let (sx, sy) = p.scale;
    let coord = |i: usize, len: usize| if len > 1 { -1.0 + 2.0 * i as f64 / (len - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(n * h * w * 2);
    for _ in 0..n {
        for i in 0..h {
            let y = coord(i, h);
            for j in 0..w {
                let x = coord(j, w);
                data.push(T::of(sx * (cos * x - sin * y)));
                data.push(T::of(sy * (sin * x + cos * y)));
            }
        }
    }
    Tensor::new(&[n, h, w, 2], data)
}

/// Applies one parameter draw to a whole `N × C × H × W` batch:
/// flip, scale/rotate, crop shift, colour, cutout.
pub fn apply_aug<T: Scalar>(images: &Tensor<T>, p: &AugParams) -> Result<Tensor<T>> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::shape("apply_aug", format!("{:?} (expected N×C×H×W)", images.shape())));
    };
    if h != w {
        return Err(Error::shape("apply_aug", format!("{:?} (expected square images)", images.shape())));
    }
    let mut x = images.clone();
    if p.flip {
        x = x.flip_w()?;
    }
    if p.scale != (1.0, 1.0) || p.rotate != 0.0 {
        x = x.grid_sample_bilinear(&affine_grid(n, h, w, p)?)?;
    }
    if p.crop != (0, 0) {
        let (dx, dy) = (p.crop.0 as isize, p.crop.1 as isize);
        x = x.pad2d([dy, -dy, dx, -dx])?;
    }
    if p.brightness != 0.0 {
        x = x.add_scalar(T::of(p.brightness))?;
    }
    if p.saturation != 1.0 {
        let mean = x.sum_to(&[n, 1, h, w])?.mul_scalar(T::of(1.0 / c as f64))?;
        x = x.sub(&mean)?.mul_scalar(T::of(p.saturation))?.add(&mean)?;
    }
    if p.contrast != 1.0 {
        let mean = x.sum_to(&[n, 1, 1, 1])?.mul_scalar(T::of(1.0 / (c * h * w) as f64))?;
        x = x.sub(&mean)?.mul_scalar(T::of(p.contrast))?.add(&mean)?;
    }
    let (cx, cy, side) = p.cutout;
    if side > 0 {
        let half = side as i64 / 2;
        let inside = |v: usize, centre: i64| (centre - half..centre - half + side as i64).contains(&(v as i64));
        let mut mask = vec![T::one(); h * w];
        for i in 0..h {
            for j in 0..w {
                if inside(i, cy) && inside(j, cx) {
                    mask[i * w + j] = T::zero();
                }
            }
        }
        x = x.mul(&Tensor::new(&[h, w], mask)?)?;
    }
    Ok(x)
}

/// A sink recording every parameter draw applied, tagged by call site.
pub type Capture = Arc<Mutex<Vec<(u64, String, Vec<AugParams>)>>>;

/// The augmentation for one iteration, shared by the real and synthetic batches.
#[derive(Clone)]
pub struct Siamese {
    settings: AugSettings,
    size: usize,
    iteration: u64,
    shared: AugParams,
    capture: Option<Capture>,
}

impl Siamese {
    pub fn new(settings: &AugSettings, size: usize, iteration: u64, capture: Option<Capture>) -> Self {
        Siamese {
            settings: settings.clone(),
            size,
            iteration,
            shared: sample_aug_params(settings, size, iteration, 0),
            capture,
        }
    }

    pub fn params(&self) -> AugParams {
        self.shared
    }

    pub fn apply<T: Scalar>(&self, tag: &str, images: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.settings.enabled {
            return Ok(images.clone());
        }
        let n = images.shape().first().copied().unwrap_or(0);
        let (out, used) = if self.settings.per_image {
            let params: Vec<AugParams> = (0..n as u64)
                .map(|i| sample_aug_params(&self.settings, self.size, self.iteration, i))
                .collect();
            let parts = params
                .iter()
                .enumerate()
                .map(|(i, p)| apply_aug(&images.narrow(i, 1)?, p))
                .collect::<Result<Vec<_>>>()?;
            (Tensor::concat(&parts)?, params)
        } else {
            (apply_aug(images, &self.shared)?, vec![self.shared])
        };
        if let Some(c) = &self.capture {
            c.lock()
                .expect("capture lock")
                .push((self.iteration, tag.to_string(), used));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(n: usize) -> Tensor<f64> {
        let len = n * 3 * 8 * 8;
        Tensor::new(&[n, 3, 8, 8], (0..len).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect()).unwrap()
    }

    #[test]
    fn identity_params_are_the_identity_map() {
        let x = img(2);
        assert!(apply_aug(&x, &AugParams::identity()).unwrap().bit_eq(&x));
    }

    #[test]
    fn flip_is_an_involution() {
        let x = img(1);
        let p = AugParams {
            flip: true,
            ..AugParams::identity()
        };
        let twice = apply_aug(&apply_aug(&x, &p).unwrap(), &p).unwrap();
        assert!(twice.bit_eq(&x));
    }

    #[test]
    fn sampling_is_deterministic_and_varies_by_iteration() {
        let s = AugSettings::default();
        assert_eq!(sample_aug_params(&s, 32, 5, 0), sample_aug_params(&s, 32, 5, 0));
        assert_ne!(sample_aug_params(&s, 32, 5, 0), sample_aug_params(&s, 32, 6, 0));
    }

    #[test]
    fn single_random_touches_one_op() {
        let s = AugSettings {
            strategy: Strategy::SingleRandom,
            ..Default::default()
        };
        for it in 0..50 {
            let p = sample_aug_params(&s, 32, it, 0);
            let id = AugParams::identity();
            let changed = [
                p.flip != id.flip,
                p.crop != id.crop,
                p.cutout != id.cutout,
                p.scale != id.scale,
                p.rotate != id.rotate,
                (p.brightness, p.saturation, p.contrast) != (id.brightness, id.saturation, id.contrast),
            ];
            assert!(changed.iter().filter(|c| **c).count() <= 1);
        }
    }

    #[test]
    fn crop_shift_moves_pixels() {
        let x = img(1);
        let p = AugParams {
            crop: (1, 0),
            ..AugParams::identity()
        };
        let y = apply_aug(&x, &p).unwrap();
        assert_eq!(y.values()[1], x.values()[0]);
        assert_eq!(y.values()[0], 0.0);
    }

    #[test]
    fn cutout_zeroes_a_square() {
        let x = Tensor::<f64>::ones(&[1, 1, 8, 8]);
        let p = AugParams {
            cutout: (4, 4, 4),
            ..AugParams::identity()
        };
        let y = apply_aug(&x, &p).unwrap();
        assert_eq!(y.values().iter().filter(|v| **v == 0.0).count(), 16);
    }

    #[test]
    fn parse_ops() {
        assert_eq!(AugSettings::parse_ops("flip, crop").unwrap(), vec![AugOp::Flip, AugOp::Crop]);
        assert!(AugSettings::parse_ops("noise").is_err());
    }
}
