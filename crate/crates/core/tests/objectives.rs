use glad::dsa::AugSettings;
use glad::experts::TrajBuffer;
use glad::nets::{init_params, NetSpec, ParamVector};
use glad::objectives::{batch_schedule, dc_loss, dm_loss, sample_expert_segment, ExpertSegment, MttConfig, MttProblem};
use glad::selftest::LinearModel;
use glad::tensor::rel_error;
use glad::{backward, Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn segment(spec: &NetSpec, rng: &mut ChaCha8Rng) -> ExpertSegment<f64> {
    let start = init_params::<f64>(spec, rng.gen());
    let target = ParamVector {
        values: start.values.iter().map(|v| v + rng.gen_range(-0.02..0.02)).collect(),
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

#[test]
fn dc_loss_is_bounded_and_zero_on_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = NetSpec::convnet(2, 4, 8, 3, 3);
    let params = init_params::<f64>(&spec, 2).values;
    let real = uniform(&mut rng, &[6, 3, 8, 8]);
    let syn = uniform(&mut rng, &[3, 3, 8, 8]);
    for per_layer in [false, true] {
        let l = dc_loss(&spec, &params, &syn, &[0, 1, 2], &real, &[0, 1, 2, 0, 1, 2], per_layer)
            .unwrap()
            .item()
            .unwrap();
        let layers = if per_layer { 3.0 } else { 1.0 };
        assert!(l > 0.0 && l < 2.0 * layers, "{l}");
        let same = dc_loss(&spec, &params, &real, &[0, 1, 2, 0, 1, 2], &real, &[0, 1, 2, 0, 1, 2], per_layer)
            .unwrap()
            .item()
            .unwrap();
        assert!(same.abs() < 1e-12);
    }
}

#[test]
fn dc_loss_hits_two_on_antiparallel_gradients_and_rejects_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lin = LinearModel { inputs: 12, classes: 3 };
    let x = uniform(&mut rng, &[4, 3, 2, 2]);
    let labels = [2, 0, 1, 1];
    let zeros = vec![0.0; 36];
    let l = dc_loss(&lin, &zeros, &x.neg().unwrap(), &labels, &x, &labels, false).unwrap().item().unwrap();
    assert!((l - 2.0).abs() < 1e-12);
    let blank = Tensor::<f64>::zeros(&[4, 3, 2, 2]);
    assert!(matches!(
        dc_loss(&lin, &zeros, &blank, &labels, &x, &labels, false),
        Err(Error::DegenerateGradient)
    ));
}

#[test]
fn dm_loss_sums_per_class_mean_gaps() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lin = LinearModel { inputs: 12, classes: 2 };
    let r0 = uniform(&mut rng, &[3, 3, 2, 2]);
    let r1 = uniform(&mut rng, &[2, 3, 2, 2]);
    let s0 = uniform(&mut rng, &[1, 3, 2, 2]);
    let s1 = uniform(&mut rng, &[1, 3, 2, 2]);
    let mean = |t: &Tensor<f64>| {
        let n = t.shape()[0];
        (0..12).map(|j| (0..n).map(|i| t.values()[i * 12 + j]).sum::<f64>() / n as f64).collect::<Vec<_>>()
    };
    let gap = |a: &Tensor<f64>, b: &Tensor<f64>| mean(a).iter().zip(mean(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let want = gap(&r0, &s0) + gap(&r1, &s1);
    let got = dm_loss(&lin, &[], &[s0.clone(), s1.clone()], &[r0.clone(), r1.clone()]).unwrap().item().unwrap();
    assert!((got - want).abs() < 1e-12);
    assert_eq!(dm_loss(&lin, &[], &[r0.clone(), r1.clone()], &[r0.clone(), r1]).unwrap().item().unwrap(), 0.0);
    assert!(dm_loss(&lin, &[], &[s0], &[r0.clone(), r0]).is_err());
}

#[test]
fn constant_memory_matches_unrolled_with_augmentation_and_minibatches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = NetSpec::convnet(2, 4, 8, 3, 3);
    let seg = segment(&spec, &mut rng);
    let syn = uniform(&mut rng, &[6, 3, 8, 8]);
    let labels = [0, 0, 1, 1, 2, 2];
    let aug = AugSettings::default();
    let problem = MttProblem {
        model: &spec,
        segment: &seg,
        cfg: MttConfig {
            n: 4,
            m: 2,
            t_plus: 0,
            syn_batch: 4,
        },
        labels: &labels,
        student_seed: 6,
        aug: Some((&aug, 17)),
    };
    let alpha = Tensor::scalar(0.03);
    let (x, a) = (syn.leaf(), alpha.leaf());
    let loss = problem.loss_unrolled(&x, &a).unwrap();
    let grads = backward(&loss, &[&x, &a], false).unwrap().into_vec();
    let (value, gx, ga) = problem.grad_constmem(&syn, &alpha).unwrap();
    assert!((value - loss.item().unwrap()).abs() <= 1e-12 * value.abs());
    assert!(rel_error(gx.values(), grads[0].values()) < 1e-8);
    assert!(rel_error(ga.values(), grads[1].values()) < 1e-8);
}

#[test]
fn identical_expert_endpoints_are_degenerate() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = NetSpec::convnet(1, 2, 4, 3, 2);
    let mut seg = segment(&spec, &mut rng);
    seg.theta_target = seg.theta_start.clone();
    let problem = MttProblem {
        model: &spec,
        segment: &seg,
        cfg: MttConfig::default(),
        labels: &[0, 1],
        student_seed: 0,
        aug: None,
    };
    let syn = uniform(&mut rng, &[2, 3, 4, 4]);
    assert!(matches!(problem.grad_constmem(&syn, &Tensor::scalar(0.01)), Err(Error::DegenerateSegment)));
}

#[test]
fn segments_respect_the_start_window() {
    let spec = NetSpec::convnet(1, 2, 4, 1, 2);
    let traj = |k: usize| -> Vec<ParamVector<f64>> {
        (0..=k).map(|e| ParamVector::new(vec![e as f64; spec.param_count()], spec.layout()).unwrap()).collect()
    };
    let buffer = TrajBuffer {
        spec: spec.clone(),
        epochs: 6,
        interval: 1,
        trajectories: vec![traj(6), traj(6)],
    };
    let cfg = MttConfig {
        n: 1,
        m: 2,
        t_plus: 3,
        syn_batch: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut starts = [0usize; 4];
    for _ in 0..400 {
        let s = sample_expert_segment(&buffer, &cfg, &mut rng).unwrap();
        assert_eq!(s.theta_start.values[0] as usize, s.t);
        assert_eq!(s.theta_target.values[0] as usize, s.t + 2);
        starts[s.t] += 1;
    }
    assert!(starts.iter().all(|&c| c > 50), "{starts:?}");
    let too_far = MttConfig { t_plus: 5, ..cfg };
    assert!(sample_expert_segment(&buffer, &too_far, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batch_schedules_cover_every_image_evenly(total in 1usize..20, batch in 0usize..25, n in 1usize..12, seed in any::<u64>()) {
        let sched = batch_schedule(total, batch, n, seed);
        let b = if batch == 0 { total } else { batch.min(total) };
        prop_assert_eq!(sched.len(), n);
        let mut counts = vec![0usize; total];
        for step in &sched {
            prop_assert_eq!(step.len(), b);
            for &i in step {
                counts[i] += 1;
            }
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 2);
        prop_assert_eq!(batch_schedule(total, batch, n, seed), sched);
    }
}
