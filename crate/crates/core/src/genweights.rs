//! Generator weight blobs and optional decoder pretraining.
//!
//! Pretraining fits the generator as a generative latent optimizer: every
//! training image owns a learned `z`, and the generator weights and codes are
//! fitted jointly to reconstruct the images under squared error. A random
//! generator works as a prior too; pretraining makes its outputs image-like.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{read_file, Reader, Writer};
use crate::datakit::{Dataset, Split};
use crate::error::{Error, Result};
use crate::microstyle::{gaussian, GenSpec, Generator};
use crate::nets::ParamVector;
use crate::scalar::Scalar;
use crate::seeds::mix;
use crate::tensor::{backward, Tensor};

pub const MAGIC: &[u8; 8] = b"GLADGENW";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub code_lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            lr: 0.01,
            code_lr: 1.0,
            momentum: 0.9,
            batch: 32,
            seed: 0,
        }
    }
}

/// Fits `spec`'s generator to the training split. Returns the generator and
/// the mean reconstruction error of every epoch.
pub fn pretrain_glo<T: Scalar>(data: &Dataset, spec: GenSpec, cfg: &PretrainConfig) -> Result<(Generator<T>, Vec<f64>)> {
    if spec.classes != data.classes || spec.out_size != data.size || spec.image_channels != data.channels {
        return Err(Error::Config("generator does not match the dataset".into()));
    }
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(Error::Config("pretraining needs epochs and batch >= 1".into()));
    }
    let mut gen = Generator::<T>::random(spec)?;
    let train = data.indices(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x610));
    let mut codes = gaussian::<T>(&mut rng, &[train.len(), gen.spec.z_dim]).to_vec();
    let z_dim = gen.spec.z_dim;
    let mut vel = vec![0.0; gen.params.len()];
    let mut code_vel = vec![0.0; codes.len()];
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let idx: Vec<usize> = chunk.iter().map(|&i| train[i]).collect();
            let target: Tensor<T> = data.batch(&idx);
            let classes = data.labels_of(&idx);
            let z_vals = chunk.iter().flat_map(|&i| codes[i * z_dim..(i + 1) * z_dim].iter().copied()).collect();
            let z = Tensor::new(&[chunk.len(), z_dim], z_vals)?.leaf();
            let weights: Vec<Tensor<T>> = gen.weights().iter().map(Tensor::leaf).collect();
            let lat = gen.partial_forward_with(&weights, &classes, &z, 0)?;
            let out = gen.synth_with(&weights, &lat)?;
            let loss = out.sub(&target)?.square()?.mean()?;
            total += loss.item()?.as_f64() * chunk.len() as f64;
            let mut wrt: Vec<&Tensor<T>> = weights.iter().collect();
            wrt.push(&z);
            let mut grads = backward(&loss, &wrt, false)?.into_vec();
            let gz = grads.pop().expect("code gradient");
            let gw = ParamVector::flatten(&grads, gen.params.layout.clone())?;
            let values = gen
                .params
                .values
                .iter()
                .zip(&gw.values)
                .zip(&mut vel)
                .map(|((&w, &g), v)| {
                    *v = cfg.momentum * *v + g.as_f64();
                    T::of(w.as_f64() - cfg.lr * *v)
                })
                .collect();
            gen = Generator::from_params(gen.spec.clone(), ParamVector::new(values, gen.params.layout.clone())?)?;
            for (row, &i) in chunk.iter().enumerate() {
                for j in 0..z_dim {
                    let v = &mut code_vel[i * z_dim + j];
                    *v = cfg.momentum * *v + gz.values()[row * z_dim + j].as_f64();
                    codes[i * z_dim + j] -= T::of(cfg.code_lr * *v);
                }
            }
        }
        history.push(total / train.len() as f64);
    }
    Ok((gen, history))
}

pub fn generator_bytes<T: Scalar>(g: &Generator<T>) -> Vec<u8> {
    let s = &g.spec;
    let mut w = Writer::new(MAGIC);
    for v in [s.z_dim, s.w_dim, s.blocks, s.base_size, s.base_channels, s.out_size, s.image_channels, s.classes] {
        w.u32(v as u32);
    }
    w.u64(s.seed);
    w.usize(g.params.len());
    w.f64s(g.params.values.iter().map(|v| v.as_f64()));
    w.into_bytes()
}

pub fn generator_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Generator<T>> {
    let mut r = Reader::new(bytes, MAGIC, "generator weights")?;
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [z_dim, w_dim, blocks, base_size, base_channels, out_size, image_channels, classes] = dims;
    let spec = GenSpec {
        z_dim,
        w_dim,
        blocks,
        base_size,
        base_channels,
        out_size,
        image_channels,
        classes,
        seed: r.u64()?,
    };
    spec.validate().map_err(|e| Error::Format(format!("generator weights: {e}")))?;
    let n = r.usize()?;
    if n != spec.param_count() {
        return Err(Error::Format(format!(
            "generator weights: {n} parameters, spec needs {}",
            spec.param_count()
        )));
    }
    let values = r.f64s(n)?.into_iter().map(T::of).collect();
    r.finish()?;
    let layout = spec.layout();
    Generator::from_params(spec, ParamVector::new(values, layout)?)
}

pub fn save_generator<T: Scalar>(g: &Generator<T>, path: &Path) -> Result<()> {
    std::fs::write(path, generator_bytes(g))?;
    Ok(())
}

pub fn load_generator<T: Scalar>(path: &Path) -> Result<Generator<T>> {
    generator_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::gen_glyph_dataset;

    fn tiny(classes: usize) -> GenSpec {
        GenSpec {
            z_dim: 4,
            w_dim: 4,
            blocks: 2,
            base_size: 4,
            base_channels: 8,
            out_size: 16,
            image_channels: 3,
            classes,
            seed: 3,
        }
    }

    #[test]
    fn pretraining_reduces_reconstruction_error() {
        let data = gen_glyph_dataset(2, 10, 16, 1).unwrap();
        let cfg = PretrainConfig {
            epochs: 8,
            batch: 4,
            ..Default::default()
        };
        let (_, h) = pretrain_glo::<f64>(&data, tiny(2), &cfg).unwrap();
        assert!(h.last().unwrap() < &h[0], "{h:?}");
    }

    #[test]
    fn size_arithmetic_and_bad_count() {
        let g = Generator::<f64>::random(tiny(3)).unwrap();
        let bytes = generator_bytes(&g);
        assert_eq!(bytes.len(), 12 + 8 * 4 + 8 + 8 + 8 * g.spec.param_count());
        let back: Generator<f64> = generator_from_bytes(&bytes).unwrap();
        assert_eq!(back.params, g.params);
        let mut bad = bytes.clone();
        bad[12 + 32 + 8] ^= 1;
        assert!(generator_from_bytes::<f64>(&bad).is_err());
    }
}
