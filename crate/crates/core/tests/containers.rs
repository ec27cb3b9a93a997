use glad::datakit::{dataset_bytes, dataset_from_bytes, load_dataset, save_dataset, Dataset};
use glad::engine::{generator_hash, load_synset, save_synset, synset_bytes, synset_from_bytes, Space, SynSet};
use glad::experts::{buffer_bytes, buffer_from_bytes, load_buffer, save_buffer, TrajBuffer};
use glad::genweights::{generator_bytes, generator_from_bytes, load_generator, save_generator};
use glad::microstyle::{GenSpec, Generator, InitMode, LatentBatch};
use glad::nets::{NetSpec, ParamVector};
use glad::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_gen(classes: usize, seed: u64) -> GenSpec {
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

fn random_dataset(seed: u64, classes: usize, channels: usize, size: usize, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset {
        classes,
        channels,
        size,
        pixels: (0..n * channels * size * size).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        labels: (0..n).map(|_| rng.gen_range(0..classes as u16)).collect(),
        train_count: rng.gen_range(0..=n),
        class_names: (0..classes).map(|c| format!("class-{c}-{}", rng.gen::<u16>())).collect(),
        mean: (0..channels).map(|_| rng.gen()).collect(),
        std: (0..channels).map(|_| rng.gen()).collect(),
    }
}

fn random_buffer(seed: u64, trajectories: usize, epochs: usize) -> TrajBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetSpec::convnet(1, 2, 4, 1, 3);
    let trajectories = (0..trajectories)
        .map(|_| {
            (0..=epochs)
                .map(|_| ParamVector::new((0..spec.param_count()).map(|_| rng.gen_range(-3.0..3.0)).collect(), spec.layout()).unwrap())
                .collect()
        })
        .collect();
    TrajBuffer {
        spec,
        epochs,
        interval: 1,
        trajectories,
    }
}

fn random_synset(seed: u64, space: Space, ipc: usize) -> SynSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 2;
    let g = Generator::<f64>::random(tiny_gen(classes, seed)).unwrap();
    let latents = match space {
        Space::Pixel => {
            let n = classes * ipc;
            LatentBatch {
                cut: 0,
                features: Tensor::new(&[n, 3, 16, 16], (0..n * 768).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
                styles: vec![],
            }
        }
        _ => {
            let mut parts = Vec::new();
            for c in 0..classes {
                parts.extend(g.init_latents(InitMode::FeedForward, c, ipc, space.cut(), 0, &mut rng).unwrap().split().unwrap());
            }
            LatentBatch::stack(&parts).unwrap()
        }
    };
    SynSet {
        space,
        ipc,
        classes,
        latents,
        generator_hash: (space != Space::Pixel).then(|| generator_hash(&g)),
        alpha: rng.gen_range(1e-4..0.1),
    }
}

fn spaces() -> impl Strategy<Value = Space> {
    prop_oneof![Just(Space::Pixel), Just(Space::WPlus), (0usize..=3).prop_map(Space::F)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dataset_files_roundtrip_byte_exact(
        seed in any::<u64>(),
        classes in 2usize..6,
        rgb in any::<bool>(),
        size in 1usize..6,
        n in 0usize..12,
    ) {
        let ds = random_dataset(seed, classes, if rgb { 3 } else { 1 }, size, n);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(std::fs::read(&path).unwrap(), dataset_bytes(&back));
    }

    #[test]
    fn expert_buffer_files_roundtrip_byte_exact(seed in any::<u64>(), count in 1usize..4, epochs in 1usize..5) {
        let b = random_buffer(seed, count, epochs);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("experts.bin");
        save_buffer(&b, &path).unwrap();
        let back = load_buffer(&path).unwrap();
        prop_assert_eq!(&back, &b);
        prop_assert_eq!(std::fs::read(&path).unwrap(), buffer_bytes(&back).unwrap());
    }

    #[test]
    fn generator_files_roundtrip_byte_exact(seed in any::<u64>(), classes in 2usize..5) {
        let g = Generator::<f64>::random(tiny_gen(classes, seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.bin");
        save_generator(&g, &path).unwrap();
        let back: Generator<f64> = load_generator(&path).unwrap();
        prop_assert_eq!(&back.spec, &g.spec);
        prop_assert_eq!(std::fs::read(&path).unwrap(), generator_bytes(&back));
        prop_assert_eq!(generator_hash(&back), generator_hash(&g));
    }

    #[test]
    fn synset_files_roundtrip_byte_exact(seed in any::<u64>(), space in spaces(), ipc in 1usize..3) {
        let s = random_synset(seed, space, ipc);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synset.bin");
        save_synset(&s, &path).unwrap();
        let back: SynSet<f64> = load_synset(&path).unwrap();
        prop_assert_eq!(back.space, s.space);
        prop_assert_eq!(back.labels(), s.labels());
        prop_assert_eq!(back.generator_hash, s.generator_hash);
        prop_assert_eq!(std::fs::read(&path).unwrap(), synset_bytes(&back));
    }
}

#[test]
fn containers_reject_wrong_magic_and_truncation() {
    let data = dataset_bytes(&random_dataset(1, 3, 1, 4, 5));
    let traj = buffer_bytes(&random_buffer(2, 1, 2)).unwrap();
    let gen = generator_bytes(&Generator::<f64>::random(tiny_gen(2, 3)).unwrap());
    let syn = synset_bytes(&random_synset(4, Space::F(1), 1));

    assert!(dataset_from_bytes(&traj).is_err());
    assert!(buffer_from_bytes(&data).is_err());
    assert!(generator_from_bytes::<f64>(&syn).is_err());
    assert!(synset_from_bytes::<f64>(&gen).is_err());

    assert!(dataset_from_bytes(&data[..data.len() - 1]).is_err());
    assert!(buffer_from_bytes(&traj[..traj.len() - 3]).is_err());
    assert!(generator_from_bytes::<f64>(&gen[..gen.len() - 8]).is_err());
    assert!(synset_from_bytes::<f64>(&syn[..syn.len() - 1]).is_err());

    let mut extra = syn.clone();
    extra.push(0);
    assert!(synset_from_bytes::<f64>(&extra).is_err());
}

#[test]
fn f32_synset_survives_an_f64_file() {
    let s64 = random_synset(9, Space::WPlus, 2);
    let s32: SynSet<f32> = synset_from_bytes(&synset_bytes(&s64)).unwrap();
    let again: SynSet<f32> = synset_from_bytes(&synset_bytes(&s32)).unwrap();
    assert_eq!(synset_bytes(&again), synset_bytes(&s32));
}
