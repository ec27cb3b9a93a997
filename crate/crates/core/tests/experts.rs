use glad::datakit::{gen_glyph_dataset, Split};
use glad::experts::{buffer_bytes, buffer_from_bytes, load_buffer, save_buffer, train_expert, train_experts, ExpertHyper, HEADER_LEN};
use glad::nets::{cross_entropy_loss, forward_logits, NetSpec, ParamVector};

fn train_loss(spec: &NetSpec, p: &ParamVector<f64>, ds: &glad::datakit::Dataset) -> f64 {
    let (x, y) = ds.split_tensor::<f64>(Split::Train);
    cross_entropy_loss(&forward_logits(spec, &p.to_tensor(), &x).unwrap(), &y).unwrap().item().unwrap()
}

#[test]
fn default_hyperparameters_give_sixteen_snapshots() {
    let h = ExpertHyper::default();
    assert_eq!((h.epochs, h.lr, h.batch), (15, 0.01, 256));
    let ds = gen_glyph_dataset(2, 5, 16, 0).unwrap();
    let spec = NetSpec::convnet(1, 2, 16, 3, 2);
    let snaps = train_expert::<f32>(&ds, &spec, &h, 0).unwrap();
    assert_eq!(snaps.len(), 16);
}

#[test]
fn zero_learning_rate_freezes_every_snapshot() {
    let ds = gen_glyph_dataset(3, 5, 16, 1).unwrap();
    let spec = NetSpec::convnet(2, 4, 16, 3, 3);
    let h = ExpertHyper { epochs: 3, lr: 0.0, batch: 4 };
    let snaps = train_expert::<f64>(&ds, &spec, &h, 2).unwrap();
    assert!(snaps.iter().all(|s| *s == snaps[0]));
}

#[test]
fn training_lowers_the_loss_for_every_seed() {
    let ds = gen_glyph_dataset(10, 10, 16, 3).unwrap();
    let spec = NetSpec::convnet(2, 16, 16, 3, 10);
    let h = ExpertHyper { epochs: 6, lr: 0.01, batch: 16 };
    let buffer = train_experts::<f64>(&ds, &spec, &h, 3, 4).unwrap();
    buffer.validate().unwrap();
    for t in &buffer.trajectories {
        let first = train_loss(&spec, &t[0], &ds);
        let last = train_loss(&spec, t.last().unwrap(), &ds);
        assert!(last < first, "{first} -> {last}");
    }
    assert_ne!(buffer.trajectories[0][0], buffer.trajectories[1][0]);
}

#[test]
fn training_is_deterministic() {
    let ds = gen_glyph_dataset(3, 5, 16, 5).unwrap();
    let spec = NetSpec::convnet(2, 4, 16, 3, 3);
    let h = ExpertHyper { epochs: 2, lr: 0.01, batch: 4 };
    assert_eq!(train_expert::<f32>(&ds, &spec, &h, 6).unwrap(), train_expert::<f32>(&ds, &spec, &h, 6).unwrap());
}

#[test]
fn file_size_follows_the_layout_and_corruption_is_caught() {
    let ds = gen_glyph_dataset(3, 5, 16, 7).unwrap();
    let spec = NetSpec::convnet(2, 4, 16, 3, 3);
    let h = ExpertHyper { epochs: 2, lr: 0.01, batch: 4 };
    let buffer = train_experts::<f64>(&ds, &spec, &h, 2, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("experts.bin");
    save_buffer(&buffer, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), HEADER_LEN + 2 * 3 * spec.param_count() * 8);
    assert_eq!(load_buffer(&path).unwrap(), buffer);

    let mut bad = bytes.clone();
    bad[0] ^= 0xFF;
    assert!(buffer_from_bytes(&bad).unwrap_err().to_string().contains("magic"));
    let mut bad_version = bytes.clone();
    bad_version[8] = 99;
    assert!(buffer_from_bytes(&bad_version).is_err());
    assert!(buffer_from_bytes(&bytes[..HEADER_LEN + 5]).is_err());

    let mut broken = buffer.clone();
    broken.trajectories[1].pop();
    assert!(buffer_bytes(&broken).is_err());
}
