#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::sync::{Arc, Mutex};

use glad::datakit::{gen_glyph_dataset, Dataset};
use glad::dsa::{AugSettings, Capture};
use glad::engine::{
    checkpointed_syn_grad, direct_syn_grad, distill, init_synset, latent_sgd_step, synset_bytes, DistillConfig,
    DmObjective, Method, MomentumState, Space, StepConfig, SynSet, STYLE_LR_SCALE,
};
use glad::experts::{train_experts, ExpertHyper};
use glad::microstyle::{GenSpec, Generator};
use glad::nets::{init_params, NetSpec};
use glad::objectives::MttConfig;
use glad::tensor::rel_error;
use glad::{Error, Tensor};

fn tiny_gen(classes: usize) -> GenSpec {
    GenSpec {
        z_dim: 4,
        w_dim: 5,
        blocks: 3,
        base_size: 2,
        base_channels: 8,
        out_size: 16,
        image_channels: 3,
        classes,
        seed: 1,
    }
}

fn data() -> Dataset {
    gen_glyph_dataset(3, 6, 16, 2).unwrap()
}

fn small_net() -> NetSpec {
    NetSpec::convnet(2, 4, 16, 3, 3)
}

fn config(method: Method, space: Space) -> DistillConfig {
    let mut cfg = DistillConfig::desk(method, space, 2, small_net());
    cfg.iterations = 3;
    cfg.real_batch = 3;
    cfg.init_samples = 16;
    cfg.mtt = MttConfig {
        n: 2,
        m: 1,
        t_plus: 1,
        syn_batch: 0,
    };
    cfg
}

#[test]
fn checkpointed_gradient_equals_the_direct_gradient_in_every_space() {
    let ds = data();
    let g = Generator::<f64>::random(tiny_gen(3)).unwrap();
    let net = small_net();
    for space in [Space::Pixel, Space::WPlus, Space::F(0), Space::F(2), Space::F(3)] {
        let cfg = config(Method::Dm, space);
        let syn = init_synset(&cfg, &ds, Some(&g)).unwrap();
        let obj = DmObjective {
            model: &net,
            psi: init_params::<f64>(&net, 4).values,
            real: (0..3).map(|c| ds.batch(&ds.class_indices(glad::datakit::Split::Train, c)[..3])).collect(),
            ipc: 2,
            aug: vec![],
        };
        let (v1, g1, a1) = checkpointed_syn_grad(Some(&g), &syn, &obj, 0).unwrap();
        let (v2, g2, a2) = direct_syn_grad(Some(&g), &syn, &obj).unwrap();
        let (v3, g3, _) = checkpointed_syn_grad(Some(&g), &syn, &obj, 4).unwrap();
        assert!((v1 - v2).abs() <= 1e-10 * v2.abs(), "{}", space.name());
        assert!((v3 - v2).abs() <= 1e-10 * v2.abs());
        assert_eq!(g1.len(), syn.optimized().len());
        for ((x, y), z) in g1.iter().zip(&g2).zip(&g3) {
            assert!(rel_error(x.values(), y.values()) < 1e-10, "{}", space.name());
            assert!(rel_error(z.values(), y.values()) < 1e-10, "{} chunked", space.name());
        }
        assert_eq!(a1.item().unwrap(), 0.0);
        assert_eq!(a2.item().unwrap(), 0.0);
    }
}

#[test]
fn distillation_is_deterministic_for_every_method() {
    let ds = data();
    let g = Generator::<f32>::random(tiny_gen(3)).unwrap();
    let hyper = ExpertHyper {
        epochs: 2,
        lr: 0.01,
        batch: 8,
    };
    let buffer = train_experts::<f32>(&ds, &small_net(), &hyper, 1, 3).unwrap();
    for method in [Method::Dc, Method::Dm, Method::Mtt] {
        let cfg = config(method, Space::F(1));
        let a = distill::<f32>(&cfg, &ds, Some(&g), Some(&buffer), None).unwrap();
        let b = distill::<f32>(&cfg, &ds, Some(&g), Some(&buffer), None).unwrap();
        assert_eq!(synset_bytes(&a.synset), synset_bytes(&b.synset), "{}", method.name());
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.losses.len(), 3);
        assert!(a.losses.iter().all(|l| l.is_finite()));
        assert_eq!(a.synset.len(), 6);
        let other = DistillConfig { seed: 9, ..cfg };
        let c = distill::<f32>(&other, &ds, Some(&g), Some(&buffer), None).unwrap();
        assert_ne!(synset_bytes(&c.synset), synset_bytes(&a.synset));
    }
}

#[test]
fn zero_learning_rate_leaves_the_set_unchanged() {
    let ds = data();
    let g = Generator::<f64>::random(tiny_gen(3)).unwrap();
    for space in [Space::Pixel, Space::F(1)] {
        let mut cfg = config(Method::Dm, space);
        cfg.step.latent_lr = 0.0;
        let init = init_synset(&cfg, &ds, Some(&g)).unwrap();
        let out = distill(&cfg, &ds, Some(&g), None, None).unwrap();
        assert_eq!(synset_bytes(&out.synset), synset_bytes(&init));
    }
}

#[test]
fn style_codes_step_at_a_tenth_of_the_latent_rate() {
    let ds = data();
    let g = Generator::<f64>::random(tiny_gen(3)).unwrap();
    let syn = init_synset(&config(Method::Dm, Space::F(1)), &ds, Some(&g)).unwrap();
    let ones: Vec<Tensor<f64>> = syn.optimized().iter().map(|t| Tensor::new(t.shape(), vec![1.0; t.numel()]).unwrap()).collect();
    let step = StepConfig {
        latent_lr: 0.5,
        alpha_lr: 0.0,
        momentum: 0.0,
        optimize_alpha: false,
        clamp_pixels: false,
    };
    let next = latent_sgd_step(&syn, &ones, None, &step, &mut MomentumState::default()).unwrap();
    let moved: Vec<f64> = syn
        .optimized()
        .iter()
        .zip(next.optimized())
        .map(|(a, b)| a.values()[0] - b.values()[0])
        .collect();
    assert!((moved[0] - 0.5).abs() < 1e-12);
    for m in &moved[1..] {
        assert!((m - 0.5 * STYLE_LR_SCALE).abs() < 1e-12, "{moved:?}");
    }
    assert_eq!(next.alpha, syn.alpha);
}

#[test]
fn momentum_accumulates_and_alpha_stays_positive() {
    let syn = SynSet {
        space: Space::Pixel,
        ipc: 1,
        classes: 2,
        latents: glad::microstyle::LatentBatch {
            cut: 0,
            features: Tensor::<f64>::zeros(&[2, 1, 2, 2]),
            styles: vec![],
        },
        generator_hash: None,
        alpha: 0.01,
    };
    let g = vec![Tensor::new(&[2, 1, 2, 2], vec![1.0; 8]).unwrap()];
    let step = StepConfig {
        latent_lr: 1.0,
        alpha_lr: 1.0,
        momentum: 0.5,
        optimize_alpha: true,
        clamp_pixels: true,
    };
    let mut state = MomentumState::default();
    let s1 = latent_sgd_step(&syn, &g, Some(5.0), &step, &mut state).unwrap();
    assert_eq!(s1.latents.features.values()[0], -1.0);
    assert_eq!(s1.alpha, glad::engine::ALPHA_FLOOR);
    let free = StepConfig { clamp_pixels: false, ..step };
    let s2 = latent_sgd_step(&s1, &g, Some(0.0), &free, &mut state).unwrap();
    assert_eq!(s2.latents.features.values()[0], -2.5);
    assert!(latent_sgd_step(&syn, &g, None, &step, &mut MomentumState::default()).is_err());
}

#[test]
fn augmentation_draws_are_shared_during_distillation() {
    let ds = data();
    let capture: Capture = Arc::new(Mutex::new(Vec::new()));
    let mut cfg = config(Method::Dm, Space::Pixel);
    cfg.aug = AugSettings::default();
    distill::<f32>(&cfg, &ds, None, None, Some(capture.clone())).unwrap();
    let log = capture.lock().unwrap();
    assert_eq!(log.len(), 2 * 3 * 3);
    for pair in log.chunks(2) {
        assert_eq!(pair[0].0, pair[1].0);
        assert_eq!(pair[0].2, pair[1].2);
        assert_ne!(pair[0].1, pair[1].1);
    }
}

#[test]
fn misconfigured_runs_fail_before_work_starts() {
    let ds = data();
    let g = Generator::<f32>::random(tiny_gen(3)).unwrap();
    let cfg = config(Method::Mtt, Space::Pixel);
    assert!(matches!(distill::<f32>(&cfg, &ds, None, None, None), Err(Error::Config(_))));
    let cfg = config(Method::Dm, Space::F(1));
    assert!(matches!(distill::<f32>(&cfg, &ds, None, None, None), Err(Error::Config(_))));
    let cfg = config(Method::Dm, Space::F(4));
    assert!(distill::<f32>(&cfg, &ds, Some(&g), None, None).is_err());
    let wrong = Generator::<f32>::random(tiny_gen(4)).unwrap();
    assert!(distill::<f32>(&config(Method::Dm, Space::WPlus), &ds, Some(&wrong), None, None).is_err());
    let mut cfg = config(Method::Dm, Space::Pixel);
    cfg.ipc = 0;
    assert!(distill::<f32>(&cfg, &ds, None, None, None).is_err());
}

#[test]
fn rendering_checks_the_generator_hash() {
    let ds = data();
    let g = Generator::<f64>::random(tiny_gen(3)).unwrap();
    let other = Generator::<f64>::random(GenSpec { seed: 2, ..tiny_gen(3) }).unwrap();
    let syn = init_synset(&config(Method::Dm, Space::WPlus), &ds, Some(&g)).unwrap();
    syn.check_generator(Some(&g)).unwrap();
    assert!(syn.check_generator(Some(&other)).is_err());
    assert!(syn.check_generator(None).is_err());
    assert_eq!(syn.render(Some(&g)).unwrap().shape(), &[6, 3, 16, 16]);
    assert_eq!(syn.labels(), vec![0, 0, 1, 1, 2, 2]);
}
