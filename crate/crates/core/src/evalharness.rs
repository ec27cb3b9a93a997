//! Downstream evaluation: train fresh networks on a distilled set and report
//! validation accuracy per architecture.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datakit::{Dataset, Split};
use crate::dsa::{AugSettings, Siamese};
use crate::error::{Error, Result};
use crate::nets::{accuracy, cross_entropy_loss, forward_logits, init_params, Family, NetSpec, Norm, ParamVector};
use crate::parallel::with_pool;
use crate::scalar::Scalar;
use crate::seeds::mix;
use crate::tensor::{backward, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub warmup_epochs: usize,
    pub decay_epochs: usize,
    pub lr_convnet: f64,
    pub lr_mlp: f64,
    pub lr_alt_convnet: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub repeats: usize,
    pub batch: usize,
    pub aug: AugSettings,
}

impl EvalProtocol {
    /// 500 warmup and 500 cosine epochs, five repeats.
    pub fn full() -> Self {
        EvalProtocol {
            warmup_epochs: 500,
            decay_epochs: 500,
            lr_convnet: 0.01,
            lr_mlp: 0.01,
            lr_alt_convnet: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            ema_decay: 0.999,
            repeats: 5,
            batch: 256,
            aug: AugSettings {
                per_image: true,
                ..AugSettings::default()
            },
        }
    }

    /// 50 warmup and 50 cosine epochs, five repeats.
    pub fn desk() -> Self {
        EvalProtocol {
            warmup_epochs: 50,
            decay_epochs: 50,
            ..Self::full()
        }
    }

    pub fn epochs(&self) -> usize {
        self.warmup_epochs + self.decay_epochs
    }

    pub fn base_lr(&self, arch: &NetSpec) -> f64 {
        match arch.family {
            Family::ConvNet => self.lr_convnet,
            Family::Mlp => self.lr_mlp,
            Family::AltConvNet => self.lr_alt_convnet,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.epochs() == 0 || self.batch == 0 {
            return Err(Error::Config("eval needs repeats, warmup + decay epochs and batch >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("ema decay and momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `base`, then cosine decay towards zero.
pub fn lr_schedule(epoch: usize, warmup: usize, decay: usize, base: f64) -> Result<f64> {
    if epoch >= warmup + decay {
        return Err(Error::Invalid(format!("epoch {epoch} outside the {}-epoch schedule", warmup + decay)));
    }
    if epoch < warmup {
        return Ok(base * (epoch + 1) as f64 / warmup as f64);
    }
    let t = (epoch - warmup) as f64 / decay as f64;
    Ok(base * 0.5 * (1.0 + (PI * t).cos()))
}

/// `decay · ema + (1 − decay) · current`.
pub fn ema_update<T: Scalar>(ema: &ParamVector<T>, current: &ParamVector<T>, decay: f64) -> Result<ParamVector<T>> {
    if !ema.same_layout(current) {
        return Err(Error::Invalid("ema and current parameters have different layouts".into()));
    }
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Invalid(format!("ema decay {decay} outside [0, 1)")));
    }
    let (d, c) = (T::of(decay), T::of(1.0 - decay));
    Ok(ParamVector {
        values: ema.values.iter().zip(&current.values).map(|(&e, &x)| d * e + c * x).collect(),
        layout: ema.layout.clone(),
    })
}

/// EMA decay used at update `k`: the configured decay, lowered early on so
/// that short schedules are not dominated by the initialization.
pub fn warm_ema_decay(decay: f64, k: usize) -> f64 {
    decay.min((1.0 + k as f64) / (10.0 + k as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudentResult {
    /// Validation accuracy of the EMA weights, the reported number.
    pub accuracy: f64,
    /// Validation accuracy of the raw final weights, logged only.
    pub raw_accuracy: f64,
}

/// Trains `arch` from scratch on `images` and evaluates on `val`.
pub fn train_student<T: Scalar>(
    images: &Tensor<T>,
    labels: &[usize],
    arch: &NetSpec,
    protocol: &EvalProtocol,
    val: (&Tensor<T>, &[usize]),
    seed: u64,
) -> Result<StudentResult> {
    protocol.validate()?;
    arch.validate()?;
    let n = labels.len();
    if n == 0 || images.rank() != 4 || images.shape()[0] != n {
        return Err(Error::Invalid(format!("{n} labels for images of shape {:?}", images.shape())));
    }
    let images = images.detach();
    let mut params: ParamVector<T> = init_params(arch, mix(seed, 1));
    let mut ema = params.clone();
    let mut velocity = vec![T::zero(); params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2));
    let base = protocol.base_lr(arch);
    let (mu, wd) = (T::of(protocol.momentum), T::of(protocol.weight_decay));
    let size = images.shape()[2];
    let mut step = 0usize;
    for epoch in 0..protocol.epochs() {
        let lr = T::of(lr_schedule(epoch, protocol.warmup_epochs, protocol.decay_epochs, base)?);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(protocol.batch) {
            let x = Siamese::new(&protocol.aug, size, mix(seed, 1000 + step as u64), None)
                .apply("train", &images.index_select(chunk)?)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let p = params.to_tensor().leaf();
            let loss = cross_entropy_loss(&forward_logits(arch, &p, &x)?, &y)?;
            let g = backward(&loss, &[&p], false)?.into_vec().remove(0);
            for ((w, v), &d) in params.values.iter_mut().zip(&mut velocity).zip(g.values()) {
                *v = mu * *v + d + wd * *w;
                *w -= lr * *v;
            }
            ema = ema_update(&ema, &params, warm_ema_decay(protocol.ema_decay, step))?;
            step += 1;
        }
    }
    Ok(StudentResult {
        accuracy: accuracy(arch, &ema, val.0, val.1)?,
        raw_accuracy: accuracy(arch, &params, val.0, val.1)?,
    })
}

/// Unseen architectures for cross-architecture evaluation at desk scale.
pub fn desk_unseen_archs(image_size: usize, channels: usize, classes: usize) -> Vec<NetSpec> {
    vec![
        NetSpec::mlp(image_size, channels, classes),
        NetSpec::alt_convnet(3, image_size, channels, classes),
        NetSpec {
            norm: Norm::Group,
            ..NetSpec::convnet(3, 32, image_size, channels, classes)
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchResult {
    pub arch: String,
    pub accuracies: Vec<f64>,
    pub raw_accuracies: Vec<f64>,
}

impl ArchResult {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }

    /// Population standard deviation over the repeats.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let n = self.accuracies.len().max(1) as f64;
        (self.accuracies.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub archs: Vec<ArchResult>,
}

impl EvalReport {
    /// Mean of the per-architecture means.
    pub fn cross_arch_mean(&self) -> f64 {
        self.archs.iter().map(ArchResult::mean).sum::<f64>() / self.archs.len().max(1) as f64
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("arch\trepeat\taccuracy\traw_accuracy\n");
        for a in &self.archs {
            for (i, (acc, raw)) in a.accuracies.iter().zip(&a.raw_accuracies).enumerate() {
                let _ = writeln!(s, "{}\t{i}\t{acc}\t{raw}", a.arch);
            }
        }
        for a in &self.archs {
            let _ = writeln!(s, "{}\tmean\t{:.6}\t", a.arch, a.mean());
            let _ = writeln!(s, "{}\tstd\t{:.6}\t", a.arch, a.std());
        }
        let _ = writeln!(s, "all\tcross_arch_mean\t{:.6}\t", self.cross_arch_mean());
        s
    }
}

impl EvalReport {
    /// Parses the per-repeat rows written by [`to_tsv`](Self::to_tsv).
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut archs: Vec<ArchResult> = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 4 || cols[1].parse::<usize>().is_err() {
                continue;
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("eval table line {}: bad number `{s}`", i + 1)))
            };
            let (acc, raw) = (num(cols[2])?, num(cols[3])?);
            match archs.iter_mut().find(|a| a.arch == cols[0]) {
                Some(a) => {
                    a.accuracies.push(acc);
                    a.raw_accuracies.push(raw);
                }
                None => archs.push(ArchResult {
                    arch: cols[0].to_string(),
                    accuracies: vec![acc],
                    raw_accuracies: vec![raw],
                }),
            }
        }
        if archs.is_empty() {
            return Err(Error::Format("eval table has no accuracy rows".into()));
        }
        Ok(EvalReport { archs })
    }

    /// The first architecture (the distillation backbone) and the rest.
    pub fn split_backbone(&self) -> (EvalReport, EvalReport) {
        let (head, tail) = self.archs.split_at(1.min(self.archs.len()));
        (EvalReport { archs: head.to_vec() }, EvalReport { archs: tail.to_vec() })
    }
}

/// Trains every architecture `protocol.repeats` times on the images, in
/// parallel. Each cell draws from its own seed stream `(seed, arch, repeat)`.
pub fn cross_arch_eval<T: Scalar>(
    images: &Tensor<T>,
    labels: &[usize],
    archs: &[NetSpec],
    protocol: &EvalProtocol,
    data: &Dataset,
    seed: u64,
) -> Result<EvalReport> {
    protocol.validate()?;
    if archs.is_empty() {
        return Err(Error::Config("no architectures to evaluate".into()));
    }
    let (vx, vy) = data.split_tensor::<T>(Split::Val);
    let cells: Vec<(usize, usize)> = (0..archs.len())
        .flat_map(|a| (0..protocol.repeats).map(move |r| (a, r)))
        .collect();
    let results = with_pool(|| {
        cells
            .par_iter()
            .map(|&(a, r)| {
                train_student(images, labels, &archs[a], protocol, (&vx, &vy), mix(mix(seed, a as u64), r as u64))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let archs = archs
        .iter()
        .enumerate()
        .map(|(a, spec)| {
            let rs = &results[a * protocol.repeats..(a + 1) * protocol.repeats];
            ArchResult {
                arch: spec.label(),
                accuracies: rs.iter().map(|r| r.accuracy).collect(),
                raw_accuracies: rs.iter().map(|r| r.raw_accuracy).collect(),
            }
        })
        .collect();
    Ok(EvalReport { archs })
}

/// Markdown table with one row per labelled report and one column per
/// architecture plus the cross-architecture average, cells `mean ± std` in
/// percent.
pub fn markdown_table(rows: &[(String, EvalReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut s = String::from("| run |");
    for a in &first.archs {
        let _ = write!(s, " {} |", a.arch);
    }
    s.push_str(" average |\n|---|");
    for _ in &first.archs {
        s.push_str("---|");
    }
    s.push_str("---|\n");
    for (label, r) in rows {
        let _ = write!(s, "| {label} |");
        for a in &r.archs {
            let _ = write!(s, " {:.1} ± {:.1} |", 100.0 * a.mean(), 100.0 * a.std());
        }
        let _ = writeln!(s, " {:.1} |", 100.0 * r.cross_arch_mean());
    }
    s
}

/// Tab-separated counterpart of [`markdown_table`], means and stds as fractions.
pub fn tsv_table(rows: &[(String, EvalReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut s = String::from("run");
    for a in &first.archs {
        let _ = write!(s, "\t{0}_mean\t{0}_std", a.arch);
    }
    s.push_str("\tcross_arch_mean\n");
    for (label, r) in rows {
        s.push_str(label);
        for a in &r.archs {
            let _ = write!(s, "\t{:.6}\t{:.6}", a.mean(), a.std());
        }
        let _ = writeln!(s, "\t{:.6}", r.cross_arch_mean());
    }
    s
}
