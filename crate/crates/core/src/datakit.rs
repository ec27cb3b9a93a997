//! A procedural glyph dataset, its binary container and PPM image grids.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::container::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds::mix;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GLADDATA";

pub const GLYPHS: [&str; 10] = [
    "circle", "cross", "bars", "triangle", "ring", "checker", "wedge", "dot-grid", "diagonal", "blob",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Images `N × C × H × W` in `[-1, 1]`, stored as `f32`. The first
/// `train_count` images are the training split, the rest validation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<u16>,
    pub train_count: usize,
    pub class_names: Vec<String>,
    /// Per-channel mean and standard deviation over the training split.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    fn range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_count,
            Split::Val => self.train_count..self.len(),
        }
    }

    /// Global indices of the images of `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.range(split).collect()
    }

    /// Global indices of `class` within `split`.
    pub fn class_indices(&self, split: Split, class: usize) -> Vec<usize> {
        self.range(split).filter(|&i| self.labels[i] as usize == class).collect()
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i] as usize).collect()
    }

    /// Stacks the given images into an untracked tensor.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let d = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(self.pixels[i * d..(i + 1) * d].iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(&[idx.len(), self.channels, self.size, self.size], data).expect("dataset shape")
    }

    pub fn split_tensor<T: Scalar>(&self, split: Split) -> (Tensor<T>, Vec<usize>) {
        let idx = self.indices(split);
        (self.batch(&idx), self.labels_of(&idx))
    }

    fn compute_stats(&mut self) {
        let hw = self.size * self.size;
        let mut mean = vec![0.0; self.channels];
        let mut sq = vec![0.0; self.channels];
        for i in 0..self.train_count {
            for c in 0..self.channels {
                let start = (i * self.channels + c) * hw;
                for &v in &self.pixels[start..start + hw] {
                    mean[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.train_count * hw).max(1) as f64;
        for c in 0..self.channels {
            mean[c] /= n;
            sq[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
        }
        self.mean = mean;
        self.std = sq;
    }
}

/// Soft coverage of glyph `kind` at glyph coordinates `(u, v)` in `[-1, 1]²`.
fn glyph(kind: usize, u: f64, v: f64, phase: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let box7 = u.abs() < 0.7 && v.abs() < 0.7;
    match kind {
        0 => r < 0.6,
        1 => (u.abs() < 0.18 && v.abs() < 0.7) || (v.abs() < 0.18 && u.abs() < 0.7),
        2 => box7 && (((v + 0.7) / 0.28).floor() as i64) % 2 == 0,
        3 => v > -0.6 && v < 0.6 && u.abs() < (v + 0.6) * 0.6,
        4 => r > 0.4 && r < 0.68,
        5 => box7 && ((((u + 0.7) / 0.35).floor() + ((v + 0.7) / 0.35).floor()) as i64) % 2 == 0,
        6 => {
            let a = v.atan2(u);
            r < 0.72 && (0.0..=std::f64::consts::FRAC_PI_2 * 1.3).contains(&a)
        }
        7 => {
            let near = |t: f64| t - (t / 0.55).round() * 0.55;
            u.abs() < 0.8 && v.abs() < 0.8 && (near(u).powi(2) + near(v).powi(2)).sqrt() < 0.16
        }
        8 => (u - v).abs() < 0.22 && u.abs() < 0.75 && v.abs() < 0.75,
        _ => r < 0.48 + 0.18 * (3.0 * v.atan2(u) + phase).sin(),
    }
}

fn render(kind: usize, size: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let angle = rng.gen_range(-20f64..20.0).to_radians();
    let scale = rng.gen_range(0.8..1.2);
    let shift = 0.25;
    let (tx, ty) = (rng.gen_range(-shift..shift), rng.gen_range(-shift..shift));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let bg: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..-0.3)).collect();
    let fg: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.2..1.0)).collect();
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0f32; channels * size * size];
    let sub = [0.25, 0.75];
    for i in 0..size {
        for j in 0..size {
            let mut cover = 0.0;
            for dy in sub {
                for dx in sub {
                    let x = 2.0 * (j as f64 + dx) / size as f64 - 1.0 - tx;
                    let y = 2.0 * (i as f64 + dy) / size as f64 - 1.0 - ty;
                    let u = (cos * x + sin * y) / scale;
                    let v = (-sin * x + cos * y) / scale;
                    if glyph(kind, u, v, phase) {
                        cover += 0.25;
                    }
                }
            }
            for c in 0..channels {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.1;
                let val = bg[c] + cover * (fg[c] - bg[c]) + noise;
                out[(c * size + i) * size + j] = val.clamp(-1.0, 1.0) as f32;
            }
        }
    }
    out
}

/// `classes` glyph classes with `per_class` images each, 80/20 train/val.
pub fn gen_glyph_dataset(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if ![16, 32, 64].contains(&size) {
        return Err(Error::Invalid(format!("unsupported image size {size} (use 16, 32 or 64)")));
    }
    if !(2..=GLYPHS.len()).contains(&classes) {
        return Err(Error::Invalid(format!("classes must be in 2..={}, got {classes}", GLYPHS.len())));
    }
    if per_class < 2 {
        return Err(Error::Invalid("need at least 2 images per class".into()));
    }
    let train_per = (per_class * 4 / 5).max(1);
    let channels = 3;
    let d = channels * size * size;
    let mut ds = Dataset {
        classes,
        channels,
        size,
        pixels: Vec::with_capacity(classes * per_class * d),
        labels: Vec::with_capacity(classes * per_class),
        train_count: classes * train_per,
        class_names: GLYPHS[..classes].iter().map(|s| s.to_string()).collect(),
        mean: vec![],
        std: vec![],
    };
    for (lo, hi) in [(0, train_per), (train_per, per_class)] {
        for k in lo..hi {
            for c in 0..classes {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, c as u64), k as u64));
                ds.pixels.extend(render(c, size, channels, &mut rng));
                ds.labels.push(c as u16);
            }
        }
    }
    ds.compute_stats();
    Ok(ds)
}

pub fn dataset_bytes(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(MAGIC);
    for v in [ds.classes, ds.len(), ds.channels, ds.size, ds.size, ds.train_count] {
        w.u32(v as u32);
    }
    w.f64s(ds.mean.iter().copied());
    w.f64s(ds.std.iter().copied());
    for name in &ds.class_names {
        w.str(name);
    }
    for &l in &ds.labels {
        w.u16(l);
    }
    for &p in &ds.pixels {
        w.f32(p);
    }
    w.into_bytes()
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes, MAGIC, "dataset")?;
    let classes = r.u32()? as usize;
    let n = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let train_count = r.u32()? as usize;
    if h != w || train_count > n || classes < 2 || channels == 0 {
        return Err(Error::Format(format!(
            "dataset: inconsistent header (classes {classes}, n {n}, {channels}×{h}×{w}, train {train_count})"
        )));
    }
    let mean = r.f64s(channels)?;
    let std = r.f64s(channels)?;
    let class_names = (0..classes).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let labels = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Format(format!("dataset: label {l} out of range")));
    }
    let count = n * channels * h * w;
    let bytes = r.bytes(count.checked_mul(4).ok_or_else(|| Error::Format("dataset: too large".into()))?)?;
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    r.finish()?;
    Ok(Dataset {
        classes,
        channels,
        size: h,
        pixels,
        labels,
        train_count,
        class_names,
        mean,
        std,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_bytes(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&read_file(path)?)
}

/// `[-1, 1] → {0..255}` by `floor((v + 1) / 2 · 255 + 0.5)`, clamped.
pub fn quantize(v: f64) -> u8 {
    ((v + 1.0) / 2.0 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Tiles `N × C × H × W` images (C = 1 or 3) row-major into a binary PPM with
/// 2-pixel white separators. Returns the file bytes.
pub fn image_grid_ppm<T: Scalar>(images: &Tensor<T>, columns: usize) -> Result<Vec<u8>> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::shape("export_image_grid", format!("{:?}", images.shape())));
    };
    if c != 1 && c != 3 {
        return Err(Error::shape("export_image_grid", format!("{c} channels (expected 1 or 3)")));
    }
    let cols = columns.max(1).min(n.max(1));
    let rows = n.div_ceil(cols).max(1);
    let width = cols * (w + 2) + 2;
    let height = rows * (h + 2) + 2;
    let mut pix = vec![255u8; width * height * 3];
    let v = images.values();
    for k in 0..n {
        let (gy, gx) = (k / cols, k % cols);
        let (y0, x0) = (2 + gy * (h + 2), 2 + gx * (w + 2));
        for i in 0..h {
            for j in 0..w {
                for ch in 0..3 {
                    let src = if c == 1 { 0 } else { ch };
                    let val = v[((k * c + src) * h + i) * w + j].as_f64();
                    pix[((y0 + i) * width + x0 + j) * 3 + ch] = quantize(val);
                }
            }
        }
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pix);
    Ok(out)
}

pub fn export_image_grid<T: Scalar>(images: &Tensor<T>, path: &Path, columns: usize) -> Result<()> {
    let bytes = image_grid_ppm(images, columns)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}
