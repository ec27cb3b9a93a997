//! Oracle checks shared by the `selftest` command and the acceptance suite.
//!
//! Every function returns [`Check`]s instead of panicking so callers can
//! print one line per check and decide how to fail. Sizes are parameters:
//! the command runs small instances, the acceptance suite larger ones.

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datakit::{dataset_bytes, dataset_from_bytes, gen_glyph_dataset, Dataset};
use crate::dsa::{apply_aug, sample_aug_params, AugOp, AugParams, AugSettings, Capture};
use crate::engine::{
    checkpointed_syn_grad, direct_syn_grad, distill, synset_bytes, synset_from_bytes, DcObjective, DistillConfig,
    DmObjective, Method, MttObjective, Objective, Space, SynSet,
};
use crate::error::Result;
use crate::evalharness::{ema_update, lr_schedule};
use crate::experts::{buffer_bytes, buffer_from_bytes, TrajBuffer};
use crate::genweights::{generator_bytes, generator_from_bytes};
use crate::microstyle::{gaussian, GenSpec, Generator, InitMode, LatentBatch};
use crate::nets::{forward_logits, init_params, NetSpec, Norm, ParamEntry, ParamVector};
use crate::objectives::{dc_loss, dm_loss, ExpertSegment, Model, MttConfig, MttProblem};
use crate::tensor::{backward, finite_diff_gradient, graph_stats, rel_error, Tensor};

pub const FD_TOLERANCE: f64 = 1e-4;
pub const MTT_LOSS_TOLERANCE: f64 = 1e-12;
pub const MTT_GRAD_TOLERANCE: f64 = 1e-8;
pub const CHECKPOINT_TOLERANCE: f64 = 1e-10;
pub const EMA_TOLERANCE: f64 = 1e-12;
pub const MOMENT_TOLERANCE: f64 = 0.05;

type T64 = Tensor<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: impl Into<String>, r: Result<Check>) -> Self {
        let name = name.into();
        match r {
            Ok(c) => c,
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {} ({})", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> T64 {
    let n = shape.iter().product();
    T64::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape and length agree")
}

/// Analytic gradient of `sum(f(x) ⊙ r)` for a fixed random `r` against
/// central differences.
fn fd_check(name: &str, x: &T64, f: impl Fn(&T64) -> Result<T64>) -> Check {
    let run = || -> Result<Check> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
        let shape = f(x)?.shape().to_vec();
        let r = uniform(&mut rng, &shape, -1.0, 1.0);
        let objective = |t: &T64| -> Result<T64> { f(t)?.mul(&r)?.sum() };
        let leaf = x.leaf();
        let g = backward(&objective(&leaf)?, &[&leaf], false)?.into_vec().remove(0);
        let fd = finite_diff_gradient(|t| objective(t)?.item(), x, 1e-6)?;
        let err = rel_error(g.values(), fd.values());
        Ok(Check::new(name, err < FD_TOLERANCE, format!("rel error {err:.2e}")))
    };
    Check::from_result(name, run())
}

/// Finite-difference checks of every differentiable op and every composite:
/// network forwards, the generator, each augmentation and each loss.
pub fn gradient_oracle(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let pos = uniform(&mut rng, &[3, 4], 0.5, 2.0);
    let img = uniform(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let kern = uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let grid = uniform(&mut rng, &[2, 5, 4, 2], -1.1, 1.1);
    let mut out = vec![
        fd_check("op add", &a, |x| x.add(&b)),
        fd_check("op add broadcast", &a, |x| x.add(&b.sum_to(&[1, 4])?)),
        fd_check("op sub", &a, |x| b.sub(x)),
        fd_check("op mul", &a, |x| x.mul(&b)),
        fd_check("op div numerator", &a, |x| x.div(&pos)),
        fd_check("op div denominator", &pos, |x| a.div(x)),
        fd_check("op neg", &a, |x| x.neg()),
        fd_check("op scalar affine", &a, |x| x.mul_scalar(1.5)?.add_scalar(0.3)),
        fd_check("op matmul lhs", &a, |x| x.matmul_t(&b, false, true)),
        fd_check("op matmul rhs", &b, |x| a.matmul_t(x, true, false)),
        fd_check("op conv2d input", &img, |x| x.conv2d(&kern, 1)),
        fd_check("op conv2d weight", &kern, |w| img.conv2d(w, 0)),
        fd_check("op relu", &a, |x| x.relu()),
        fd_check("op leaky_relu", &a, |x| x.leaky_relu(0.2)),
        fd_check("op tanh", &a, |x| x.tanh()),
        fd_check("op exp", &a, |x| x.exp()),
        fd_check("op log", &pos, |x| x.log()),
        fd_check("op powf", &pos, |x| x.powf(-0.5)),
        fd_check("op square", &a, |x| x.square()),
        fd_check("op sum", &a, |x| x.sum()),
        fd_check("op mean", &a, |x| x.mean()),
        fd_check("op reshape", &a, |x| x.reshape(&[2, 6])),
        fd_check("op broadcast/sum_to", &a, |x| x.sum_to(&[1, 4])?.broadcast_to(&[5, 3, 4])),
        fd_check("op pad2d", &img, |x| x.pad2d([1, -1, 2, 0])),
        fd_check("op avgpool2d", &img, |x| x.avgpool2d(2)),
        fd_check("op upsample", &img, |x| x.upsample_nearest(2)),
        fd_check("op instance_norm", &img, |x| x.instance_norm(1e-5)),
        fd_check("op group_norm", &img, |x| x.group_norm(3, 1e-5)),
        fd_check("op concat", &a, |x| T64::concat(&[b.clone(), x.clone()])),
        fd_check("op narrow", &a, |x| x.narrow(1, 2)),
        fd_check("op index_select", &a, |x| x.index_select(&[2, 0, 2])),
        fd_check("op flip", &img, |x| x.flip_w()),
        fd_check("op dot", &a, |x| x.dot(&b)),
        fd_check("op norm_sq", &a, |x| x.norm_sq()),
        fd_check("op cross_entropy", &a, |x| x.softmax_cross_entropy(&[1, 3, 0])),
        fd_check("op grid_sample", &img, |x| x.grid_sample_bilinear(&grid)),
    ];
    out.extend(network_oracles(&mut rng));
    out.extend(generator_oracles(&mut rng));
    out.extend(augmentation_oracles(&mut rng));
    out.extend(loss_oracles(&mut rng));
    out
}

fn small_nets() -> Vec<NetSpec> {
    vec![
        NetSpec::convnet(2, 4, 8, 3, 3),
        NetSpec {
            norm: Norm::Group,
            ..NetSpec::convnet(2, 4, 8, 3, 3)
        },
        NetSpec {
            norm: Norm::None,
            ..NetSpec::convnet(1, 4, 8, 3, 3)
        },
        NetSpec::alt_convnet(2, 8, 3, 3),
        NetSpec {
            depth: 1,
            width: 6,
            ..NetSpec::mlp(8, 3, 3)
        },
    ]
}

fn network_oracles(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let x = uniform(rng, &[2, 3, 8, 8], -1.0, 1.0);
    let mut out = Vec::new();
    for spec in small_nets() {
        let p = init_params::<f64>(&spec, rng.gen()).to_tensor();
        let label = spec.label();
        out.push(fd_check(&format!("net {label} wrt params"), &p, |p| forward_logits(&spec, p, &x)));
        out.push(fd_check(&format!("net {label} wrt input"), &x, |x| forward_logits(&spec, &p, x)));
    }
    out
}

fn tiny_gen_spec(classes: usize) -> GenSpec {
    GenSpec {
        z_dim: 4,
        w_dim: 5,
        blocks: 3,
        base_size: 2,
        base_channels: 8,
        out_size: 16,
        image_channels: 3,
        classes,
        seed: 11,
    }
}

fn generator_oracles(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let g = match Generator::<f64>::random(tiny_gen_spec(3)) {
        Ok(g) => g,
        Err(e) => return vec![Check::new("generator", false, e.to_string())],
    };
    let z = gaussian::<f64>(rng, &[2, 4]);
    let classes = [0, 2];
    let mut out = vec![fd_check("generator full pass wrt z", &z, |z| g.forward_batch(&classes, z))];
    for cut in 0..=g.spec.blocks {
        let lat = match g.partial_forward_batch(&classes, &z, cut) {
            Ok(l) => l.detach(),
            Err(e) => return vec![Check::new("generator", false, e.to_string())],
        };
        out.push(fd_check(&format!("generator synth from f{cut} wrt feature"), &lat.features, |f| {
            g.synth_batch(&LatentBatch {
                features: f.clone(),
                ..lat.clone()
            })
        }));
        for k in 0..lat.styles.len() {
            out.push(fd_check(&format!("generator synth from f{cut} wrt style {k}"), &lat.styles[k], |s| {
                let mut l = lat.clone();
                l.styles[k] = s.clone();
                g.synth_batch(&l)
            }));
        }
    }
    out
}

fn augmentation_oracles(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let x = uniform(rng, &[2, 3, 8, 8], -1.0, 1.0);
    let mut out = Vec::new();
    for op in AugOp::ALL {
        let settings = AugSettings {
            ops: vec![op],
            ..AugSettings::default()
        };
        let mut p = sample_aug_params(&settings, 8, rng.gen(), 0);
        if op == AugOp::Flip {
            p.flip = true;
        }
        out.push(fd_check(&format!("augment {}", op.name()), &x, |x| apply_aug(x, &p)));
    }
    let all = sample_aug_params(&AugSettings::default(), 8, rng.gen(), 0);
    out.push(fd_check("augment composed", &x, |x| apply_aug(x, &all)));
    out
}

/// A bias-free linear classifier. At zero weights the softmax is uniform
/// whatever the input, so negating a batch negates its gradient.
pub struct LinearModel {
    pub inputs: usize,
    pub classes: usize,
}

impl Model<f64> for LinearModel {
    fn logits(&self, params: &T64, x: &T64) -> Result<T64> {
        let n = x.shape()[0];
        x.reshape(&[n, self.inputs])?
            .matmul_t(&params.reshape(&[self.classes, self.inputs])?, false, true)
    }

    fn features(&self, _params: &T64, x: &T64) -> Result<T64> {
        let n = x.shape()[0];
        x.reshape(&[n, self.inputs])
    }

    fn layout(&self) -> Vec<ParamEntry> {
        vec![ParamEntry {
            name: "weight".into(),
            offset: 0,
            shape: vec![self.classes, self.inputs],
        }]
    }
}

/// The two-layer net used for the gradient-matching second-order check:
/// one conv block and the linear head, 163 parameters.
pub fn second_order_net() -> NetSpec {
    NetSpec::convnet(1, 4, 4, 3, 3)
}

fn random_segment(spec: &NetSpec, rng: &mut ChaCha8Rng, spread: f64) -> ExpertSegment<f64> {
    let start = init_params::<f64>(spec, rng.gen());
    let target = ParamVector {
        values: start.values.iter().map(|v| v + rng.gen_range(-spread..spread)).collect(),
        layout: start.layout.clone(),
    };
    ExpertSegment {
        trajectory: 0,
        t: 0,
        m: 2,
        theta_start: start,
        theta_target: target,
    }
}

fn loss_oracles(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut out = vec![dc_second_order(rng.gen())];
    let spec = NetSpec::convnet(2, 4, 8, 3, 3);
    let syn = uniform(rng, &[3, 3, 8, 8], -1.0, 1.0);
    let real = uniform(rng, &[4, 3, 8, 8], -1.0, 1.0);
    let params = init_params::<f64>(&spec, rng.gen()).values;
    out.push(fd_check("loss dc per-layer wrt synthetic", &syn, |s| {
        dc_loss(&spec, &params, s, &[0, 1, 2], &real, &[0, 1, 2, 0], true)
    }));
    out.push(fd_check("loss dm wrt synthetic", &syn, |s| {
        dm_loss(
            &spec,
            &params,
            &[s.narrow(0, 2)?, s.narrow(2, 1)?],
            &[real.narrow(0, 2)?, real.narrow(2, 2)?],
        )
    }));
    let seg = random_segment(&spec, rng, 0.05);
    let labels = [0, 1, 2];
    let problem = MttProblem {
        model: &spec,
        segment: &seg,
        cfg: MttConfig {
            n: 3,
            m: 2,
            t_plus: 0,
            syn_batch: 2,
        },
        labels: &labels,
        student_seed: 4,
        aug: None,
    };
    let alpha = T64::scalar(0.05);
    out.push(fd_check("loss mtt wrt synthetic", &syn, |s| problem.loss_unrolled(s, &alpha)));
    out.push(fd_check("loss mtt wrt step size", &alpha, |a| problem.loss_unrolled(&syn, a)));
    out
}

/// Gradient-matching loss gradient with respect to synthetic pixels, which
/// differentiates through the inner parameter gradient, against central
/// differences on a net with at most 200 parameters.
pub fn dc_second_order(seed: u64) -> Check {
    let spec = second_order_net();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params::<f64>(&spec, seed).values;
    let syn = uniform(&mut rng, &[3, 3, 4, 4], -1.0, 1.0);
    let real = uniform(&mut rng, &[6, 3, 4, 4], -1.0, 1.0);
    let name = format!("dc second order ({} params)", spec.param_count());
    if spec.param_count() > 200 {
        return Check::new(name, false, "net exceeds 200 parameters");
    }
    fd_check(&name, &syn, |s| dc_loss(&spec, &params, s, &[0, 1, 2], &real, &[0, 1, 2, 0, 1, 2], false))
}

/// Constant-memory against unrolled trajectory matching for each `N`:
/// equal losses and gradients, flat peak graph size for the former and
/// linear growth for the latter.
pub fn mtt_equivalence(spec: &NetSpec, ipc: usize, ns: &[usize], seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seg = random_segment(spec, &mut rng, 0.01);
    let labels: Vec<usize> = (0..spec.classes).flat_map(|c| std::iter::repeat(c).take(ipc)).collect();
    let images = uniform(&mut rng, &[labels.len(), spec.channels, spec.image_size, spec.image_size], -1.0, 1.0);
    let alpha = T64::scalar(0.01);
    let mut out = Vec::new();
    let mut peaks = Vec::new();
    for &n in ns {
        let problem = MttProblem {
            model: spec,
            segment: &seg,
            cfg: MttConfig {
                n,
                m: 2,
                t_plus: 0,
                syn_batch: 0,
            },
            labels: &labels,
            student_seed: crate::seeds::mix(seed, n as u64),
            aug: None,
        };
        let run = || -> Result<(Check, usize, usize)> {
            let x = images.leaf();
            let a = alpha.leaf();
            let (unrolled, peak_unrolled) = graph_stats::measure(|| -> Result<(f64, Vec<T64>)> {
                let loss = problem.loss_unrolled(&x, &a)?;
                Ok((loss.item()?, backward(&loss, &[&x, &a], false)?.into_vec()))
            });
            let (lv, g) = unrolled?;
            let ((value, gx, ga), peak_const) = {
                let (r, p) = graph_stats::measure(|| problem.grad_constmem(&images, &alpha));
                (r?, p)
            };
            let loss_err = (lv - value).abs() / lv.abs().max(f64::MIN_POSITIVE);
            let gx_err = rel_error(g[0].values(), gx.values());
            let ga_err = rel_error(g[1].values(), ga.values());
            let passed = loss_err <= MTT_LOSS_TOLERANCE && gx_err <= MTT_GRAD_TOLERANCE && ga_err <= MTT_GRAD_TOLERANCE;
            Ok((
                Check::new(
                    format!("mtt constant-memory equals unrolled, N={n}"),
                    passed,
                    format!("loss rel {loss_err:.1e}, image grad rel {gx_err:.1e}, step-size grad rel {ga_err:.1e}"),
                ),
                peak_unrolled,
                peak_const,
            ))
        };
        match run() {
            Ok((c, pu, pc)) => {
                out.push(c);
                peaks.push((n, pu, pc));
            }
            Err(e) => out.push(Check::new(format!("mtt constant-memory equals unrolled, N={n}"), false, e.to_string())),
        }
    }
    if peaks.len() >= 2 {
        out.extend(memory_shape_checks(&peaks));
    }
    out
}

/// Flat constant-memory peaks, and unrolled peaks on a line increasing in N.
fn memory_shape_checks(peaks: &[(usize, usize, usize)]) -> Vec<Check> {
    let consts: Vec<usize> = peaks.iter().map(|p| p.2).collect();
    let (lo, hi) = (*consts.iter().min().expect("non-empty"), *consts.iter().max().expect("non-empty"));
    let flat = hi == lo;
    let (n0, u0, _) = peaks[0];
    let (n1, u1, _) = peaks[peaks.len() - 1];
    let slope = (u1 as f64 - u0 as f64) / (n1 - n0) as f64;
    let residual = peaks
        .iter()
        .map(|&(n, u, _)| (u as f64 - (u0 as f64 + slope * (n - n0) as f64)).abs())
        .fold(0.0, f64::max);
    let linear = slope > 0.0 && residual <= 0.01 * u1 as f64;
    let listing = peaks
        .iter()
        .map(|(n, u, c)| format!("N={n}: unrolled {u}, constant {c}"))
        .collect::<Vec<_>>()
        .join("; ");
    vec![
        Check::new("mtt constant-memory peak graph is flat in N", flat, listing.clone()),
        Check::new(
            "mtt unrolled peak graph grows linearly in N",
            linear,
            format!("slope {slope:.1} nodes/step, max residual {residual:.1}"),
        ),
    ]
}

struct ProbeSetup {
    gen: Generator<f64>,
    syn: SynSet<f64>,
    net: NetSpec,
    real: Vec<T64>,
    params: Vec<f64>,
    seg: ExpertSegment<f64>,
    labels: Vec<usize>,
}

fn probe_setup(seed: u64) -> Result<ProbeSetup> {
    let classes = 2;
    let ipc = 2;
    let gen = Generator::<f64>::random(tiny_gen_spec(classes))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    for c in 0..classes {
        parts.extend(gen.init_latents(InitMode::FeedForward, c, ipc, 1, 0, &mut rng)?.split()?);
    }
    let syn = SynSet {
        space: Space::F(1),
        ipc,
        classes,
        latents: LatentBatch::stack(&parts)?,
        generator_hash: None,
        alpha: 0.02,
    };
    let net = NetSpec::convnet(2, 4, 16, 3, classes);
    let real = (0..classes).map(|_| uniform(&mut rng, &[3, 3, 16, 16], -1.0, 1.0)).collect();
    let params = init_params::<f64>(&net, seed).values;
    let seg = random_segment(&net, &mut rng, 0.05);
    let labels = syn.labels();
    Ok(ProbeSetup {
        gen,
        syn,
        net,
        real,
        params,
        seg,
        labels,
    })
}

/// Checkpointed gradients through the generator against single-graph
/// differentiation for each method, with the peak graph size of both paths.
pub fn checkpoint_equivalence(seed: u64) -> Vec<Check> {
    let s = match probe_setup(seed) {
        Ok(s) => s,
        Err(e) => return vec![Check::new("checkpointed gradient setup", false, e.to_string())],
    };
    let dc = DcObjective {
        model: &s.net,
        params: s.params.clone(),
        real: s.real.clone(),
        ipc: s.syn.ipc,
        per_layer: false,
        aug: vec![],
    };
    let dm = DmObjective {
        model: &s.net,
        psi: s.params.clone(),
        real: s.real.clone(),
        ipc: s.syn.ipc,
        aug: vec![],
    };
    let mtt = MttObjective {
        problem: MttProblem {
            model: &s.net,
            segment: &s.seg,
            cfg: MttConfig {
                n: 3,
                m: 2,
                t_plus: 0,
                syn_batch: 0,
            },
            labels: &s.labels,
            student_seed: seed,
            aug: None,
        },
        unrolled: true,
    };
    let objectives: [(&str, &dyn Objective<f64>); 3] = [("dc", &dc), ("dm", &dm), ("mtt", &mtt)];
    let mut out = Vec::new();
    for (name, obj) in objectives {
        let run = || -> Result<Vec<Check>> {
            let (ck, peak_ck) = graph_stats::measure(|| checkpointed_syn_grad(Some(&s.gen), &s.syn, obj, 0));
            let (direct, peak_direct) = graph_stats::measure(|| direct_syn_grad(Some(&s.gen), &s.syn, obj));
            let ((v1, g1, a1), (v2, g2, a2)) = (ck?, direct?);
            let value_err = (v1 - v2).abs() / v2.abs().max(f64::MIN_POSITIVE);
            let grad_err = g1
                .iter()
                .zip(&g2)
                .map(|(a, b)| rel_error(a.values(), b.values()))
                .fold(rel_error(a1.values(), a2.values()), f64::max);
            let (_, loss_graph) = graph_stats::measure(|| -> Result<()> {
                let x = s.syn.render(Some(&s.gen))?.leaf();
                let a = T64::scalar(s.syn.alpha).leaf();
                let l = obj.loss(&x, &a)?;
                backward(&l, &[&x], false)?;
                Ok(())
            });
            let (_, gen_graph) = graph_stats::measure(|| -> Result<()> {
                let l = s.syn.latents.leaves();
                let img = s.gen.synth_batch(&l)?;
                backward(&img.sum()?, &l.tensors(), false)?;
                Ok(())
            });
            Ok(vec![
                Check::new(
                    format!("checkpointed gradient equals direct ({name})"),
                    value_err <= CHECKPOINT_TOLERANCE && grad_err <= CHECKPOINT_TOLERANCE,
                    format!("loss rel {value_err:.1e}, gradient rel {grad_err:.1e}"),
                ),
                Check::new(
                    format!("checkpointed peak graph below direct ({name})"),
                    loss_graph <= gen_graph || peak_ck < peak_direct,
                    format!(
                        "checkpointed {peak_ck}, direct {peak_direct}; loss graph {loss_graph}, generator graph {gen_graph}"
                    ),
                ),
            ])
        };
        match run() {
            Ok(c) => out.extend(c),
            Err(e) => out.push(Check::new(format!("checkpointed gradient equals direct ({name})"), false, e.to_string())),
        }
    }
    out
}

/// Closed-form values of each loss on constructed inputs.
pub fn loss_identities(seed: u64) -> Vec<Check> {
    let run = || -> Result<Vec<Check>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = NetSpec::convnet(2, 4, 8, 3, 3);
        let params = init_params::<f64>(&spec, seed).values;
        let batch = uniform(&mut rng, &[4, 3, 8, 8], -1.0, 1.0);
        let labels = [0, 1, 2, 1];
        let dc_same = dc_loss(&spec, &params, &batch, &labels, &batch, &labels, false)?.item()?;
        let lin = LinearModel { inputs: 3 * 8 * 8, classes: 3 };
        let zeros = vec![0.0; 3 * 3 * 8 * 8];
        let neg = batch.neg()?;
        let dc_anti = dc_loss(&lin, &zeros, &neg, &labels, &batch, &labels, false)?.item()?;
        let dm_same = dm_loss(
            &spec,
            &params,
            &[batch.narrow(0, 2)?, batch.narrow(2, 2)?],
            &[batch.narrow(0, 2)?, batch.narrow(2, 2)?],
        )?
        .item()?;

        let syn_labels = [0, 1, 2];
        let syn = batch.narrow(0, 3)?;
        let mut seg = random_segment(&spec, &mut rng, 0.05);
        let cfg = MttConfig {
            n: 3,
            m: 2,
            t_plus: 0,
            syn_batch: 2,
        };
        let alpha = T64::scalar(0.05);
        let matched_target = {
            let mut theta = seg.theta_start.to_tensor();
            for idx in &crate::objectives::batch_schedule(3, cfg.syn_batch, cfg.n, 9) {
                let x = syn.index_select(idx)?;
                let y: Vec<usize> = idx.iter().map(|&j| syn_labels[j]).collect();
                let t = theta.leaf();
                let l = crate::nets::cross_entropy_loss(&forward_logits(&spec, &t, &x)?, &y)?;
                let g = backward(&l, &[&t], false)?.into_vec().remove(0);
                theta = t.detach().sub(&g.mul(&alpha)?)?;
            }
            theta
        };
        let problem = |seg: &ExpertSegment<f64>, a: &T64| -> Result<f64> {
            MttProblem {
                model: &spec,
                segment: seg,
                cfg,
                labels: &syn_labels,
                student_seed: 9,
                aug: None,
            }
            .loss_unrolled(&syn, a)?
            .item()
        };
        let at_zero = problem(&seg, &T64::scalar(0.0))?;
        seg.theta_target = seg.theta_start.with_values(&matched_target)?;
        let matched = problem(&seg, &alpha)?;
        Ok(vec![
            Check::new("dc loss is 0 on identical batches", dc_same.abs() < 1e-12, format!("{dc_same:e}")),
            Check::new(
                "dc loss is 2 on antiparallel gradients",
                (dc_anti - 2.0).abs() < 1e-12,
                format!("{dc_anti:.15}"),
            ),
            Check::new("dm loss is 0 when synthetic equals real", dm_same == 0.0, format!("{dm_same:e}")),
            Check::new("mtt loss is 0 on a matched segment", matched.abs() < 1e-12, format!("{matched:e}")),
            Check::new("mtt loss is 1 at zero step size", at_zero == 1.0, format!("{at_zero:.17}")),
        ])
    };
    run().unwrap_or_else(|e| vec![Check::new("loss identities", false, e.to_string())])
}

/// `synth_from ∘ partial_forward` against the full pass, bit for bit, at
/// every cut of `spec`.
pub fn cut_consistency(spec: GenSpec, batch: usize, seed: u64) -> Vec<Check> {
    let run = || -> Result<Vec<Check>> {
        let g = Generator::<f64>::random(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian::<f64>(&mut rng, &[batch, g.spec.z_dim]);
        let classes: Vec<usize> = (0..batch).map(|i| i % g.spec.classes).collect();
        let full = g.forward_batch(&classes, &z)?;
        (0..=g.spec.blocks)
            .map(|n| {
                let via = g.synth_batch(&g.partial_forward_batch(&classes, &z, n)?)?;
                let single = g.synth_from(&g.partial_forward(classes[0], &z.narrow(0, 1)?.reshape(&[g.spec.z_dim])?, n)?)?;
                let ok = via.bit_eq(&full) && single.bit_eq(&full.narrow(0, 1)?.reshape(single.shape())?);
                Ok(Check::new(
                    format!("cut consistency at f{n}"),
                    ok,
                    format!("max diff {:e}", via.max_abs_diff(&full)),
                ))
            })
            .collect()
    };
    run().unwrap_or_else(|e| vec![Check::new("cut consistency", false, e.to_string())])
}

/// Exact schedule junction and midpoint, and the geometric EMA ratio.
pub fn schedule_and_ema() -> Vec<Check> {
    let mut out = Vec::new();
    for (w, d, base) in [(50, 50, 0.01), (500, 500, 0.01), (3, 8, 0.1)] {
        let junction = lr_schedule(w, w, d, base);
        let mid = lr_schedule(w + d / 2, w, d, base);
        let ok = matches!((junction.as_ref(), mid.as_ref()), (Ok(j), Ok(m)) if *j == base && *m == base / 2.0);
        out.push(Check::new(
            format!("lr schedule junction and midpoint (warmup {w}, decay {d})"),
            ok,
            format!("{junction:?}, {mid:?}"),
        ));
    }
    for decay in [0.5, 0.9, 0.999] {
        let run = || -> Result<f64> {
            let layout = vec![ParamEntry {
                name: "v".into(),
                offset: 0,
                shape: vec![4],
            }];
            let current = ParamVector::new(vec![0.25, -1.0, 3.0, 0.5], layout.clone())?;
            let mut ema = ParamVector::new(vec![2.0, 1.0, -1.0, 0.0], layout)?;
            let gap = |e: &ParamVector<f64>| e.dist_sq(&current).sqrt();
            let mut worst: f64 = 0.0;
            for _ in 0..10 {
                let before = gap(&ema);
                ema = ema_update(&ema, &current, decay)?;
                worst = worst.max((gap(&ema) / before - decay).abs());
            }
            Ok(worst)
        };
        let r = run();
        out.push(Check::new(
            format!("ema geometric ratio equals decay {decay}"),
            matches!(r, Ok(w) if w <= EMA_TOLERANCE),
            format!("{r:?}"),
        ));
    }
    out
}

/// Bytes → value → bytes for one random instance of each container.
pub fn container_roundtrips(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let check = |name: &str, r: Result<bool>| match r {
        Ok(ok) => Check::new(format!("{name} roundtrip is byte-exact"), ok, "bytes compared"),
        Err(e) => Check::new(format!("{name} roundtrip is byte-exact"), false, e.to_string()),
    };
    let data = || -> Result<bool> {
        let ds = gen_glyph_dataset(rng_classes(seed), 3, 16, seed)?;
        let bytes = dataset_bytes(&ds);
        let back = dataset_from_bytes(&bytes)?;
        Ok(dataset_bytes(&back) == bytes && back == ds)
    };
    let traj = |rng: &mut ChaCha8Rng| -> Result<bool> {
        let spec = NetSpec::convnet(1, 2, 4, 1, 2);
        let trajectories = (0..2)
            .map(|_| {
                (0..3)
                    .map(|_| ParamVector::new((0..spec.param_count()).map(|_| rng.gen()).collect(), spec.layout()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let b = TrajBuffer {
            spec,
            epochs: 2,
            interval: 1,
            trajectories,
        };
        let bytes = buffer_bytes(&b)?;
        let back = buffer_from_bytes(&bytes)?;
        Ok(buffer_bytes(&back)? == bytes && back == b)
    };
    let gen = |rng: &mut ChaCha8Rng| -> Result<bool> {
        let g = Generator::<f64>::random(GenSpec {
            seed: rng.gen(),
            ..tiny_gen_spec(2)
        })?;
        let bytes = generator_bytes(&g);
        let back: Generator<f64> = generator_from_bytes(&bytes)?;
        Ok(generator_bytes(&back) == bytes)
    };
    let syns = |rng: &mut ChaCha8Rng| -> Result<bool> {
        let g = Generator::<f64>::random(tiny_gen_spec(2))?;
        let mut parts = Vec::new();
        for c in 0..2 {
            parts.extend(g.init_latents(InitMode::FeedForward, c, 2, 2, 0, rng)?.split()?);
        }
        let s = SynSet {
            space: Space::F(2),
            ipc: 2,
            classes: 2,
            latents: LatentBatch::stack(&parts)?,
            generator_hash: Some(crate::engine::generator_hash(&g)),
            alpha: rng.gen_range(0.001..0.1),
        };
        let bytes = synset_bytes(&s);
        let back: SynSet<f64> = synset_from_bytes(&bytes)?;
        Ok(synset_bytes(&back) == bytes)
    };
    vec![
        check("GLADDATA", data()),
        check("GLADTRAJ", traj(&mut rng)),
        check("GLADGENW", gen(&mut rng)),
        check("GLADSYNS", syns(&mut rng)),
    ]
}

fn rng_classes(seed: u64) -> usize {
    2 + (seed % 4) as usize
}

/// Gaussian-initialized features at `cut` against an independent
/// feed-forward estimate, both from `m` samples: relative L2 error of the
/// mean and the variance vectors.
pub fn init_moments(spec: GenSpec, cut: usize, m: usize, seed: u64) -> Vec<Check> {
    let run = || -> Result<Vec<Check>> {
        let g = Generator::<f64>::random(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lat = g.init_latents(InitMode::Gaussian, 0, m, cut, m, &mut rng)?;
        let d: usize = g.spec.feature_shape(cut).iter().product();
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for row in lat.features.values().chunks_exact(d) {
            for (j, v) in row.iter().enumerate() {
                mean[j] += v / m as f64;
                sq[j] += v * v / m as f64;
            }
        }
        let var: Vec<f64> = sq.iter().zip(&mean).map(|(q, mu)| q - mu * mu).collect();
        let (ref_mean, ref_var) = g.feature_moments(0, cut, m, &mut rng)?;
        let rel = |a: &[f64], b: &[f64]| {
            let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            let den: f64 = b.iter().map(|y| y * y).sum();
            (num / den).sqrt()
        };
        let (em, ev) = (rel(&mean, &ref_mean), rel(&var, &ref_var));
        Ok(vec![
            Check::new(
                format!("gaussian init mean within 5% at f{cut}, m={m}"),
                em < MOMENT_TOLERANCE,
                format!("rel error {em:.4}"),
            ),
            Check::new(
                format!("gaussian init variance within 5% at f{cut}, m={m}"),
                ev < MOMENT_TOLERANCE,
                format!("rel error {ev:.4}"),
            ),
        ])
    };
    run().unwrap_or_else(|e| vec![Check::new("gaussian init moments", false, e.to_string())])
}

/// Real and synthetic batches of every iteration see identical draws, and
/// identity parameters leave images unchanged.
pub fn dsa_determinism(data: &Dataset, iterations: usize, seed: u64) -> Vec<Check> {
    let run = || -> Result<Vec<Check>> {
        let net = NetSpec::convnet(2, 4, data.size, data.channels, data.classes);
        let mut cfg = DistillConfig::desk(Method::Dm, Space::Pixel, 1, net);
        cfg.iterations = iterations;
        cfg.real_batch = 4;
        cfg.seed = seed;
        cfg.aug.seed = seed;
        let capture: Capture = Arc::new(Mutex::new(Vec::new()));
        distill::<f64>(&cfg, data, None, None, Some(capture.clone()))?;
        let log = capture.lock().expect("capture lock").clone();
        let mut pairs = 0;
        let mut mismatched = 0;
        for (it, _, params) in log.iter().filter(|e| e.1 == "real") {
            match log.iter().find(|e| e.0 == *it && e.1 == "syn") {
                Some(s) if s.2 == *params => pairs += 1,
                _ => mismatched += 1,
            }
        }
        let expected = iterations * data.classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = uniform(&mut rng, &[3, data.channels, data.size, data.size], -1.0, 1.0);
        let same = apply_aug(&img, &AugParams::identity())?.bit_eq(&img);
        Ok(vec![
            Check::new(
                "dsa real and synthetic draws identical",
                mismatched == 0 && pairs == expected,
                format!("{pairs} matched pairs of {expected}, {mismatched} mismatched"),
            ),
            Check::new("dsa identity parameters are the identity map", same, "bitwise"),
        ])
    };
    run().unwrap_or_else(|e| vec![Check::new("dsa determinism", false, e.to_string())])
}

/// The quick suite run by the `selftest` command.
pub fn quick_suite() -> Vec<Check> {
    let mut out = gradient_oracle(1);
    out.extend(mtt_equivalence(&NetSpec::convnet(2, 4, 8, 3, 3), 1, &[1, 2, 5], 2));
    out.extend(checkpoint_equivalence(3));
    out.extend(loss_identities(4));
    out.extend(cut_consistency(GenSpec::desk(10, 5), 3, 5));
    out.extend(schedule_and_ema());
    out.extend(container_roundtrips(6));
    out.extend(init_moments(tiny_gen_spec(2), 1, 10_000, 7));
    match gen_glyph_dataset(3, 10, 16, 8) {
        Ok(ds) => out.extend(dsa_determinism(&ds, 3, 8)),
        Err(e) => out.push(Check::new("dsa determinism", false, e.to_string())),
    }
    out
}

