use glad::microstyle::{gaussian, GenLatent, GenSpec, Generator, InitMode, LatentBatch};
use glad::tensor::{finite_diff_gradient, rel_error};
use glad::{backward, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(classes: usize, seed: u64) -> GenSpec {
    GenSpec {
        z_dim: 4,
        w_dim: 5,
        blocks: 3,
        base_size: 2,
        base_channels: 8,
        out_size: 16,
        image_channels: 3,
        classes,
        seed,
    }
}

#[test]
fn desk_spec_is_valid_and_bad_specs_are_rejected() {
    GenSpec::desk(10, 0).validate().unwrap();
    assert!(GenSpec { blocks: 1, base_size: 16, ..tiny(2, 0) }.validate().is_err());
    assert!(GenSpec { out_size: 32, ..tiny(2, 0) }.validate().is_err());
    assert!(Generator::<f64>::random(tiny(1, 0)).is_err());
}

#[test]
fn mapping_is_deterministic_and_class_conditioned() {
    let g = Generator::<f64>::random(tiny(3, 1)).unwrap();
    let z = gaussian::<f64>(&mut ChaCha8Rng::seed_from_u64(2), &[4]);
    let a = g.map_latent(0, &z).unwrap();
    assert_eq!(a.shape(), &[5]);
    assert!(a.bit_eq(&g.map_latent(0, &z).unwrap()));
    assert!(!a.bit_eq(&g.map_latent(1, &z).unwrap()));
    assert!(g.map_latent(3, &z).is_err());
}

#[test]
fn latents_have_the_documented_shapes() {
    let spec = tiny(2, 3);
    let g = Generator::<f64>::random(spec.clone()).unwrap();
    let z = gaussian::<f64>(&mut ChaCha8Rng::seed_from_u64(4), &[4]);
    for cut in 0..=spec.blocks {
        let l = g.partial_forward(1, &z, cut).unwrap();
        assert_eq!(l.styles.len(), spec.blocks - cut);
        assert_eq!(l.feature.shape(), &spec.feature_shape(cut));
    }
    assert!(g.partial_forward(0, &z, spec.blocks + 1).is_err());
    let full = g.partial_forward(0, &z, spec.blocks).unwrap();
    assert_eq!(full.feature.shape(), &[3, 16, 16]);
    assert!(g.synth_from(&full).unwrap().bit_eq(&full.feature));
}

#[test]
fn every_cut_reproduces_the_full_pass_bit_for_bit() {
    let spec = GenSpec::desk(10, 7);
    let g = Generator::<f32>::random(spec.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = gaussian::<f32>(&mut rng, &[3, spec.z_dim]);
    let classes = [0, 4, 9];
    let full = g.forward_batch(&classes, &z).unwrap();
    assert_eq!(full.shape(), &[3, 3, 32, 32]);
    assert!(full.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    for cut in 0..=spec.blocks {
        let lat = g.partial_forward_batch(&classes, &z, cut).unwrap();
        assert!(g.synth_batch(&lat).unwrap().bit_eq(&full), "cut {cut}");
    }
}

#[test]
fn degrees_of_freedom_grow_past_wplus() {
    let spec = GenSpec::desk(10, 0);
    let wplus = spec.blocks * spec.w_dim;
    for cut in 1..=spec.blocks {
        assert!(spec.latent_dof(cut) > wplus, "cut {cut}");
    }
}

#[test]
fn synthesis_gradients_match_finite_differences() {
    let g = Generator::<f64>::random(tiny(2, 9)).unwrap();
    let z = gaussian::<f64>(&mut ChaCha8Rng::seed_from_u64(10), &[2, 4]);
    let lat = g.partial_forward_batch(&[0, 1], &z, 1).unwrap();
    let styles = lat.styles.clone();
    let f_feature = |x: &Tensor<f64>| {
        g.synth_batch(&LatentBatch { cut: 1, features: x.clone(), styles: styles.clone() })?.mean()
    };
    let leaf = lat.features.leaf();
    let grad = backward(&f_feature(&leaf).unwrap(), &[&leaf], false).unwrap().into_vec().remove(0);
    let fd = finite_diff_gradient(|x| f_feature(x)?.item(), &lat.features, 1e-6).unwrap();
    assert!(rel_error(grad.values(), fd.values()) < 1e-4);

    let f_style = |s: &Tensor<f64>| {
        let mut st = styles.clone();
        st[0] = s.clone();
        g.synth_batch(&LatentBatch { cut: 1, features: lat.features.clone(), styles: st })?.mean()
    };
    let leaf = styles[0].leaf();
    let grad = backward(&f_style(&leaf).unwrap(), &[&leaf], false).unwrap().into_vec().remove(0);
    let fd = finite_diff_gradient(|s| f_style(s)?.item(), &styles[0], 1e-6).unwrap();
    assert!(rel_error(grad.values(), fd.values()) < 1e-4);
}

#[test]
fn feedforward_latents_are_independent_generator_outputs() {
    let g = Generator::<f64>::random(tiny(2, 11)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let lat = g.init_latents(InitMode::FeedForward, 1, 3, 2, 0, &mut rng).unwrap();
    let parts: Vec<GenLatent<f64>> = lat.split().unwrap();
    assert_eq!(parts.len(), 3);
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(!parts[i].feature.bit_eq(&parts[j].feature));
        }
    }
    assert!(g.init_latents(InitMode::FeedForward, 1, 0, 2, 0, &mut rng).is_err());
}

#[test]
fn gaussian_init_reproduces_the_feedforward_moments() {
    let g = Generator::<f64>::random(tiny(2, 13)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let m = 10_000;
    let lat = g.init_latents(InitMode::Gaussian, 0, m, 1, m, &mut rng).unwrap();
    let (mean, var) = g.feature_moments(0, 1, m, &mut rng).unwrap();
    let d = mean.len();
    let mut sm = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for row in lat.features.values().chunks_exact(d) {
        for (j, v) in row.iter().enumerate() {
            sm[j] += v;
            sq[j] += v * v;
        }
    }
    let sm: Vec<f64> = sm.iter().map(|s| s / m as f64).collect();
    let sv: Vec<f64> = sq.iter().zip(&sm).map(|(q, mu)| q / m as f64 - mu * mu).collect();
    let rel = |a: &[f64], b: &[f64]| {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        (num / b.iter().map(|y| y * y).sum::<f64>()).sqrt()
    };
    assert!(rel(&sm, &mean) < 0.05, "mean {}", rel(&sm, &mean));
    assert!(rel(&sv, &var) < 0.05, "variance {}", rel(&sv, &var));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stack_split_roundtrips(seed in any::<u64>(), cut in 0usize..=3, n in 1usize..4) {
        let g = Generator::<f64>::random(tiny(2, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lat = g.init_latents(InitMode::FeedForward, 0, n, cut, 0, &mut rng).unwrap();
        let back = LatentBatch::stack(&lat.split().unwrap()).unwrap();
        prop_assert!(back.features.bit_eq(&lat.features));
        prop_assert_eq!(back.styles.len(), lat.styles.len());
        for (a, b) in back.styles.iter().zip(&lat.styles) {
            prop_assert!(a.bit_eq(b));
        }
    }
}
