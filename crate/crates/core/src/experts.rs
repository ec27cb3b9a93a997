//! Expert trajectories: networks trained on real data with parameter
//! snapshots after every epoch, and their binary container.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::{read_file, Reader, Writer};
use crate::datakit::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nets::{cross_entropy_loss, init_params, Family, NetSpec, Norm, ParamVector};
use crate::parallel::with_pool;
use crate::scalar::Scalar;
use crate::seeds::mix;
use crate::objectives::Model;
use crate::tensor::{backward, Tensor};

pub const MAGIC: &[u8; 8] = b"GLADTRAJ";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertHyper {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for ExpertHyper {
    fn default() -> Self {
        ExpertHyper {
            epochs: 15,
            lr: 0.01,
            batch: 256,
        }
    }
}

/// Parameter snapshots indexed `[trajectory][snapshot]`; snapshot `k` holds
/// the parameters after `k · interval` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajBuffer {
    pub spec: NetSpec,
    pub epochs: usize,
    pub interval: usize,
    pub trajectories: Vec<Vec<ParamVector<f64>>>,
}

impl TrajBuffer {
    pub fn snapshots_per_trajectory(&self) -> usize {
        self.epochs / self.interval + 1
    }

    pub fn validate(&self) -> Result<()> {
        let layout = self.spec.layout();
        let want = self.snapshots_per_trajectory();
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.len() != want {
                return Err(Error::Invalid(format!("trajectory {i} has {} snapshots, expected {want}", t.len())));
            }
            if t.iter().any(|p| p.layout != layout) {
                return Err(Error::Invalid(format!("trajectory {i} does not match the network layout")));
            }
        }
        Ok(())
    }
}

/// One plain SGD step on a minibatch. Returns the batch loss.
pub(crate) fn sgd_step<T: Scalar>(model: &dyn Model<T>, params: &mut Vec<T>, x: &Tensor<T>, labels: &[usize], lr: f64) -> Result<f64> {
    let p = Tensor::from_vec(std::mem::take(params)).leaf();
    let loss = cross_entropy_loss(&model.logits(&p, x)?, labels)?;
    let value = loss.item()?.as_f64();
    let g = backward(&loss, &[&p], false)?.into_vec().remove(0);
    let lr = T::of(lr);
    *params = p.values().iter().zip(g.values()).map(|(&w, &d)| w - lr * d).collect();
    Ok(value)
}

/// One epoch of plain SGD over `data`'s training split, in a seeded order.
/// Returns the mean training loss over the epoch.
pub(crate) fn sgd_epoch<T: Scalar>(
    data: &Dataset,
    spec: &NetSpec,
    params: &mut Vec<T>,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let mut order = data.indices(Split::Train);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut total = 0.0;
    for chunk in order.chunks(batch.max(1)) {
        let x = data.batch::<T>(chunk);
        total += sgd_step(spec, params, &x, &data.labels_of(chunk), lr)? * chunk.len() as f64;
    }
    Ok(total / order.len().max(1) as f64)
}

/// One epoch of plain SGD over in-memory images.
pub(crate) fn sgd_epoch_on<T: Scalar>(
    model: &dyn Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    params: &mut Vec<T>,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut total = 0.0;
    for chunk in order.chunks(batch.max(1)) {
        let x = images.detach().index_select(chunk)?;
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        total += sgd_step(model, params, &x, &y, lr)? * chunk.len() as f64;
    }
    Ok(total / order.len().max(1) as f64)
}

/// Trains one network from `init_params(spec, seed)` and returns the
/// `epochs + 1` snapshots, the first being the initialization.
pub fn train_expert<T: Scalar>(data: &Dataset, spec: &NetSpec, hyper: &ExpertHyper, seed: u64) -> Result<Vec<ParamVector<f64>>> {
    spec.validate()?;
    if data.train_count == 0 {
        return Err(Error::Invalid("expert training needs a non-empty training split".into()));
    }
    let init: ParamVector<T> = init_params(spec, seed);
    let layout = init.layout.clone();
    let to64 = |v: &[T]| ParamVector {
        values: v.iter().map(|x| x.as_f64()).collect(),
        layout: layout.clone(),
    };
    let mut values = init.values;
    let mut snaps = vec![to64(&values)];
    for epoch in 0..hyper.epochs {
        sgd_epoch(data, spec, &mut values, hyper.lr, hyper.batch, mix(seed, epoch as u64 + 1))?;
        snaps.push(to64(&values));
    }
    Ok(snaps)
}

/// Trains `count` experts in parallel with seeds derived from `seed`.
pub fn train_experts<T: Scalar>(data: &Dataset, spec: &NetSpec, hyper: &ExpertHyper, count: usize, seed: u64) -> Result<TrajBuffer> {
    let trajectories = with_pool(|| {
        (0..count as u64)
            .into_par_iter()
            .map(|i| train_expert::<T>(data, spec, hyper, mix(seed, 1000 + i)))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(TrajBuffer {
        spec: spec.clone(),
        epochs: hyper.epochs,
        interval: 1,
        trajectories,
    })
}

pub(crate) fn write_netspec(w: &mut Writer, s: &NetSpec) {
    w.u8(s.family.code());
    w.u8(s.norm.code());
    for v in [s.depth, s.width, s.image_size, s.channels, s.classes] {
        w.u32(v as u32);
    }
}

pub(crate) fn read_netspec(r: &mut Reader) -> Result<NetSpec> {
    let family = Family::from_code(r.u8()?)?;
    let norm = Norm::from_code(r.u8()?)?;
    let mut next = || -> Result<usize> { Ok(r.u32()? as usize) };
    let spec = NetSpec {
        family,
        norm,
        depth: next()?,
        width: next()?,
        image_size: next()?,
        channels: next()?,
        classes: next()?,
    };
    spec.validate().map_err(|e| Error::Format(format!("stored network spec: {e}")))?;
    Ok(spec)
}

/// Header bytes before the snapshot payload.
pub const HEADER_LEN: usize = 12 + 2 + 5 * 4 + 4 * 4 + 8;

pub fn buffer_bytes(b: &TrajBuffer) -> Result<Vec<u8>> {
    b.validate()?;
    let mut w = Writer::new(MAGIC);
    write_netspec(&mut w, &b.spec);
    let n_snap = b.snapshots_per_trajectory();
    for v in [b.epochs, b.interval, b.trajectories.len(), n_snap] {
        w.u32(v as u32);
    }
    w.u64(b.spec.param_count() as u64);
    for t in &b.trajectories {
        for p in t {
            w.f64s(p.values.iter().copied());
        }
    }
    Ok(w.into_bytes())
}

pub fn buffer_from_bytes(bytes: &[u8]) -> Result<TrajBuffer> {
    let mut r = Reader::new(bytes, MAGIC, "trajectory buffer")?;
    let spec = read_netspec(&mut r)?;
    let epochs = r.u32()? as usize;
    let interval = r.u32()? as usize;
    let n_traj = r.u32()? as usize;
    let n_snap = r.u32()? as usize;
    let len = r.usize()?;
    if interval == 0 || n_snap != epochs / interval + 1 || len != spec.param_count() {
        return Err(Error::Format(format!(
            "trajectory buffer: inconsistent header (epochs {epochs}, interval {interval}, snapshots {n_snap}, length {len})"
        )));
    }
    let layout = spec.layout();
    let mut trajectories = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let mut t = Vec::with_capacity(n_snap);
        for _ in 0..n_snap {
            t.push(ParamVector {
                values: r.f64s(len)?,
                layout: layout.clone(),
            });
        }
        trajectories.push(t);
    }
    r.finish()?;
    Ok(TrajBuffer {
        spec,
        epochs,
        interval,
        trajectories,
    })
}

pub fn save_buffer(b: &TrajBuffer, path: &Path) -> Result<()> {
    std::fs::write(path, buffer_bytes(b)?)?;
    Ok(())
}

pub fn load_buffer(path: &Path) -> Result<TrajBuffer> {
    buffer_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::gen_glyph_dataset;

    fn tiny() -> (Dataset, NetSpec) {
        let ds = gen_glyph_dataset(3, 5, 16, 2).unwrap();
        (ds, NetSpec::convnet(2, 4, 16, 3, 3))
    }

    #[test]
    fn zero_lr_freezes_every_snapshot() {
        let (ds, spec) = tiny();
        let hyper = ExpertHyper { epochs: 2, lr: 0.0, batch: 4 };
        let t = train_expert::<f64>(&ds, &spec, &hyper, 1).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|p| p == &t[0]));
    }

    #[test]
    fn size_arithmetic() {
        let (ds, spec) = tiny();
        let hyper = ExpertHyper { epochs: 2, lr: 0.01, batch: 8 };
        let b = train_experts::<f64>(&ds, &spec, &hyper, 2, 0).unwrap();
        let bytes = buffer_bytes(&b).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 2 * 3 * spec.param_count() * 8);
        assert_eq!(buffer_from_bytes(&bytes).unwrap(), b);
    }
}
