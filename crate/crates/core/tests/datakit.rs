use glad::datakit::{export_image_grid, gen_glyph_dataset, load_dataset, save_dataset, Split};
use glad::Tensor;

#[test]
fn pixels_lie_in_range_and_stats_match_the_train_split() {
    let ds = gen_glyph_dataset(10, 10, 16, 3).unwrap();
    assert!(ds.pixels.iter().all(|p| (-1.0..=1.0).contains(p)));
    let hw = 16 * 16;
    for c in 0..3 {
        let vals: Vec<f64> = (0..ds.train_count)
            .flat_map(|i| ds.pixels[(i * 3 + c) * hw..(i * 3 + c + 1) * hw].iter().map(|&v| v as f64))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((mean - ds.mean[c]).abs() < 1e-9);
        assert!((std - ds.std[c]).abs() < 1e-9);
    }
}

#[test]
fn splits_are_balanced_and_disjoint() {
    let ds = gen_glyph_dataset(4, 10, 16, 0).unwrap();
    let train = ds.indices(Split::Train);
    let val = ds.indices(Split::Val);
    assert_eq!(train.len(), 32);
    assert_eq!(val.len(), 8);
    assert!(train.iter().all(|i| !val.contains(i)));
    for c in 0..4 {
        assert_eq!(ds.class_indices(Split::Train, c).len(), 8);
        assert_eq!(ds.class_indices(Split::Val, c).len(), 2);
    }
}

#[test]
fn seeds_change_the_images_but_not_the_layout() {
    let a = gen_glyph_dataset(3, 4, 16, 1).unwrap();
    let b = gen_glyph_dataset(3, 4, 16, 2).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_ne!(a.pixels, b.pixels);
}

#[test]
fn classes_are_separable_by_nearest_centroid() {
    let ds = gen_glyph_dataset(10, 40, 32, 0).unwrap();
    let d = ds.image_len();
    let mut centroids = vec![vec![0.0f64; d]; 10];
    let mut counts = [0usize; 10];
    for i in ds.indices(Split::Train) {
        let l = ds.labels[i] as usize;
        counts[l] += 1;
        for (acc, &p) in centroids[l].iter_mut().zip(&ds.pixels[i * d..(i + 1) * d]) {
            *acc += p as f64;
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let val = ds.indices(Split::Val);
    let correct = val
        .iter()
        .filter(|&&i| {
            let x = &ds.pixels[i * d..(i + 1) * d];
            let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let best = (0..10).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == ds.labels[i] as usize
        })
        .count();
    assert!(correct as f64 / val.len() as f64 > 0.2, "{correct}/{}", val.len());
}

#[test]
fn invalid_requests_are_rejected() {
    assert!(gen_glyph_dataset(1, 10, 32, 0).is_err());
    assert!(gen_glyph_dataset(11, 10, 32, 0).is_err());
    assert!(gen_glyph_dataset(10, 10, 24, 0).is_err());
    assert!(gen_glyph_dataset(10, 1, 32, 0).is_err());
}

#[test]
fn files_and_grids_are_written() {
    let ds = gen_glyph_dataset(2, 5, 16, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    save_dataset(&ds, &path).unwrap();
    assert_eq!(&std::fs::read(&path).unwrap()[..8], b"GLADDATA");
    assert_eq!(load_dataset(&path).unwrap(), ds);

    let images: Tensor<f32> = ds.batch(&[0, 1, 2]);
    let grid = dir.path().join("g.ppm");
    export_image_grid(&images, &grid, 2).unwrap();
    let bytes = std::fs::read(&grid).unwrap();
    let header = b"P6\n38 38\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 38 * 38 * 3);
    assert!(load_dataset(&dir.path().join("missing.bin")).is_err());
}
