use super::*;
use proptest::prelude::*;
use std::collections::BTreeSet;

#[test]
fn synth_noise_zero_makes_identical_samples() {
    let ds = synth_shapes(3, 4, 16, 0.0, 1).unwrap();
    for class in 0..3 {
        let idx = ds.indices_of_class(class);
        for &i in &idx[1..] {
            assert_eq!(ds.image(idx[0]), ds.image(i));
        }
    }
}

#[test]
fn synth_is_bit_identical_per_seed() {
    let a = synth_shapes(4, 5, 12, 0.2, 99).unwrap();
    let b = synth_shapes(4, 5, 12, 0.2, 99).unwrap();
    for i in 0..a.len() {
        assert_eq!(a.image(i), b.image(i));
        assert_eq!(a.label(i), b.label(i));
    }
    assert_eq!(a.source(), b.source());
}

#[test]
fn synth_rejects_degenerate_requests() {
    assert!(synth_shapes(1, 4, 16, 0.1, 0).is_err());
    assert!(synth_shapes(3, 4, 2, 0.1, 0).is_err());
    assert!(synth_shapes(3, 0, 16, 0.1, 0).is_err());
    assert!(synth_shapes(3, 4, 16, 1.5, 0).is_err());
}

#[test]
fn linear_probe_separates_two_synthetic_classes() {
    // Plain logistic regression on raw pixels, written with bare loops so
    // it does not depend on the tensor engine.
    let ds = synth_shapes(2, 30, 12, 0.15, 7).unwrap();
    let dim = 12 * 12;
    let mut weights = vec![0.0f64; dim];
    let mut bias = 0.0f64;
    let lr = 0.5;
    for _ in 0..300 {
        let mut gw = vec![0.0f64; dim];
        let mut gb = 0.0;
        for i in 0..ds.len() {
            let target = ds.label(i) as f64;
            let z: f64 = ds.image(i).iter().zip(&weights).map(|(&x, &w)| x * w).sum::<f64>() + bias;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - target;
            for (g, &x) in gw.iter_mut().zip(ds.image(i)) {
                *g += err * x;
            }
            gb += err;
        }
        let scale = lr / ds.len() as f64;
        for (w, g) in weights.iter_mut().zip(&gw) {
            *w -= scale * g;
        }
        bias -= scale * gb;
    }
    let correct = (0..ds.len())
        .filter(|&i| {
            let z: f64 =
                ds.image(i).iter().zip(&weights).map(|(&x, &w)| x * w).sum::<f64>() + bias;
            (z > 0.0) as usize == ds.label(i)
        })
        .count();
    let accuracy = correct as f64 / ds.len() as f64;
    assert!(accuracy > 0.9, "linear probe accuracy {accuracy}");
}

#[test]
fn image_dir_loads_sorted_classes() {
    let dir = tempfile::tempdir().unwrap();
    for (class, v) in [("b", 200u8), ("a", 30u8)] {
        let class_dir = dir.path().join(class);
        std::fs::create_dir(&class_dir).unwrap();
        for i in 0..3 {
            let img = image::GrayImage::from_pixel(10, 10, image::Luma([v + i as u8]));
            img.save(class_dir.join(format!("img{i}.png"))).unwrap();
        }
    }
    let ds = load_image_dir(dir.path(), (1, 8, 8)).unwrap();
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.class_count(), 2);
    assert_eq!(ds.class_names(), &["a".to_string(), "b".to_string()]);
    // class a sorts first and its pixels are darker
    assert!(ds.image(0).iter().sum::<f64>() < ds.image(3).iter().sum::<f64>());
    assert!(ds.image(0).iter().all(|&v| (0.0..=1.0).contains(&v)));

    let reload = load_image_dir(dir.path(), (1, 8, 8)).unwrap();
    for i in 0..ds.len() {
        assert_eq!(ds.image(i), reload.image(i));
    }
}

#[test]
fn corrupt_image_error_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let class_dir = dir.path().join("a");
    std::fs::create_dir(&class_dir).unwrap();
    std::fs::write(class_dir.join("broken.png"), b"not a png").unwrap();
    let err = load_image_dir(dir.path(), (1, 8, 8)).unwrap_err();
    match err {
        Error::Corrupt(msg) => assert!(msg.contains("broken.png"), "{msg}"),
        other => panic!("expected Corrupt, got {other:?}"),
    }
}

#[test]
fn empty_class_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    assert!(load_image_dir(dir.path(), (1, 8, 8)).is_err());
}

#[test]
fn overlap_filter_drops_matching_names_and_redensifies() {
    let ds = synth_shapes(10, 2, 8, 0.0, 0).unwrap();
    let filtered = filter_overlap(&ds, &["ring-s".to_string()]).unwrap();
    assert_eq!(filtered.class_count(), 9);
    assert_eq!(filtered.len(), 18);
    let ids: BTreeSet<usize> = (0..filtered.len()).map(|i| filtered.label(i)).collect();
    assert_eq!(ids, (0..9).collect());
    assert!(!filtered.class_names().contains(&"ring-s".to_string()));
}

#[test]
fn overlap_filter_with_no_overlap_keeps_everything() {
    let ds = synth_shapes(4, 3, 8, 0.0, 0).unwrap();
    let filtered = filter_overlap(&ds, &["no-such-class".to_string()]).unwrap();
    assert_eq!(filtered.class_count(), 4);
    assert_eq!(filtered.len(), ds.len());
}

#[test]
fn overlap_filter_rejects_total_overlap() {
    let ds = synth_shapes(2, 3, 8, 0.0, 0).unwrap();
    let names = ds.class_names().to_vec();
    assert!(filter_overlap(&ds, &names).is_err());
}

#[test]
fn split_is_a_stratified_partition() {
    let ds = synth_shapes(3, 10, 8, 0.1, 5).unwrap();
    let (train, test) = split(&ds, 0.5, 17).unwrap();
    assert_eq!(train.len(), 15);
    assert_eq!(test.len(), 15);
    for class in 0..3 {
        assert_eq!(train.indices_of_class(class).len(), 5);
        assert_eq!(test.indices_of_class(class).len(), 5);
    }
    // partition: every original image appears exactly once across the halves
    let mut seen: Vec<&[f64]> = (0..train.len())
        .map(|i| train.image(i))
        .chain((0..test.len()).map(|i| test.image(i)))
        .collect();
    let mut original: Vec<&[f64]> = (0..ds.len()).map(|i| ds.image(i)).collect();
    let key = |im: &&[f64]| im.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    seen.sort_by_key(key);
    original.sort_by_key(key);
    assert_eq!(seen, original);

    let (train2, _) = split(&ds, 0.5, 17).unwrap();
    for i in 0..train.len() {
        assert_eq!(train.image(i), train2.image(i));
    }
}

#[test]
fn split_rejects_singleton_classes() {
    let ds = Dataset::new(
        vec![vec![0.0; 4], vec![1.0; 4], vec![0.5; 4]],
        vec![0, 0, 1],
        vec!["a".into(), "b".into()],
        (1, 2, 2),
        "test".into(),
    )
    .unwrap();
    assert!(split(&ds, 0.5, 0).is_err());
}

#[test]
fn stream_epoch_covers_every_sample_once() {
    let ds = synth_shapes(2, 11, 8, 0.1, 3).unwrap();
    let mut stream = BatchStream::new(&ds, 4, 2, 9).unwrap();
    // 22 samples, batch 4 -> 5 full batches plus a short batch of 2 (kept)
    assert_eq!(stream.batches_per_epoch(), 6);
    for epoch in 0..3 {
        let mut seen = Vec::new();
        for _ in 0..stream.batches_per_epoch() {
            assert_eq!(stream.epoch(), epoch);
            let (batch, labels) = stream.next_batch().unwrap();
            assert_eq!(batch.shape()[0], labels.len());
            seen.extend(labels);
        }
        assert_eq!(seen.len(), 22);
    }
}

#[test]
fn stream_drops_short_tail_below_minimum() {
    let ds = synth_shapes(2, 5, 8, 0.1, 3).unwrap();
    // 10 samples, batch 4, min 2: tail of 2 kept
    let stream = BatchStream::new(&ds, 4, 2, 0).unwrap();
    assert_eq!(stream.batches_per_epoch(), 3);
    // 10 samples, batch 3, min 2: tail of 1 dropped
    let mut stream = BatchStream::new(&ds, 3, 2, 0).unwrap();
    assert_eq!(stream.batches_per_epoch(), 3);
    let mut count = 0;
    for _ in 0..3 {
        let (batch, _) = stream.next_batch().unwrap();
        count += batch.shape()[0];
    }
    assert_eq!(count, 9);
    assert_eq!(stream.epoch(), 1, "tail was dropped, next batch starts epoch 1");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stream_epochs_are_permutations(
        per_class in 3usize..8,
        batch in 2usize..6,
        seed in 0u64..1000,
    ) {
        let ds = synth_shapes(2, per_class, 8, 0.05, seed).unwrap();
        let mut stream = BatchStream::new(&ds, batch, 1, seed).unwrap();
        let mut label_counts = vec![0usize; 2];
        for _ in 0..stream.batches_per_epoch() {
            let (_, labels) = stream.next_batch().unwrap();
            for l in labels {
                label_counts[l] += 1;
            }
        }
        // min_batch 1 keeps every sample: exactly one appearance each
        prop_assert_eq!(label_counts, vec![per_class, per_class]);
    }
}
