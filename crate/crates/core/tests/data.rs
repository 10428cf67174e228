use std::fs;
use std::path::Path;

use proptest::prelude::*;
use snn_workbench::data::{
    load_cifar10_binary, load_cifar10_file, load_idx, load_idx_dir, save_cifar10_file, save_idx, synth_blobs_with,
    synth_rate_patterns,
};
use snn_workbench::Error;

fn be(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

/// Ten 4x3 images written byte by byte in IDX layout.
fn idx_fixture(dir: &Path, prefix: &str) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    for v in [0x0000_0803u32, 10, 4, 3] {
        img.extend(be(v));
    }
    img.extend((0..120u32).map(|i| (i * 37 % 256) as u8));
    let mut lab = Vec::new();
    for v in [0x0000_0801u32, 10] {
        lab.extend(be(v));
    }
    lab.extend((0..10u8).map(|i| i % 4));
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), &img).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), &lab).unwrap();
    (img, lab)
}

#[test]
fn idx_parses_and_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = idx_fixture(dir.path(), "train");
    let ds = load_idx(
        &dir.path().join("train-images-idx3-ubyte"),
        &dir.path().join("train-labels-idx1-ubyte"),
        4,
    )
    .unwrap();
    assert_eq!(ds.images.shape(), &[10, 1, 4, 3]);
    assert_eq!(ds.labels, vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1]);
    assert_eq!(ds.images.data()[1], 37.0 / 255.0);
    assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let (i2, l2) = (dir.path().join("copy-images"), dir.path().join("copy-labels"));
    save_idx(&ds, &i2, &l2).unwrap();
    assert_eq!(fs::read(&i2).unwrap(), img);
    assert_eq!(fs::read(&l2).unwrap(), lab);
}

#[test]
fn idx_dir_picks_up_optional_test_split() {
    let dir = tempfile::tempdir().unwrap();
    idx_fixture(dir.path(), "train");
    let (_, test) = load_idx_dir(dir.path(), 4).unwrap();
    assert!(test.is_none());
    idx_fixture(dir.path(), "t10k");
    let (train, test) = load_idx_dir(dir.path(), 4).unwrap();
    assert_eq!(train.len(), 10);
    assert_eq!(test.unwrap().len(), 10);
}

#[test]
fn idx_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = idx_fixture(dir.path(), "train");
    let (ip, lp) = (
        dir.path().join("train-images-idx3-ubyte"),
        dir.path().join("train-labels-idx1-ubyte"),
    );

    let mut bad = img.clone();
    bad[3] = 0x01;
    fs::write(&ip, &bad).unwrap();
    assert!(matches!(
        load_idx(&ip, &lp, 4),
        Err(Error::BadMagic { found: 0x0801, .. })
    ));

    fs::write(&ip, &img[..img.len() - 1]).unwrap();
    match load_idx(&ip, &lp, 4) {
        Err(Error::Truncated { expected, found, .. }) => assert_eq!((expected, found), (136, 135)),
        other => panic!("expected truncation, got {other:?}"),
    }

    fs::write(&ip, &img).unwrap();
    assert!(matches!(
        load_idx(&ip, &lp, 3),
        Err(Error::LabelOutOfRange {
            label: 3,
            classes: 3,
            ..
        })
    ));

    let mut short = lab.clone();
    short[7] = 9;
    fs::write(&lp, &short[..17]).unwrap();
    assert!(matches!(load_idx(&ip, &lp, 4), Err(Error::Input(_))));
}

fn cifar_fixture() -> Vec<u8> {
    let mut bytes = Vec::new();
    for r in 0..10u32 {
        bytes.push((r % 10) as u8);
        bytes.extend((0..3072u32).map(|i| ((i * 7 + r * 13) % 256) as u8));
    }
    bytes
}

#[test]
fn cifar_records_parse_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let raw = cifar_fixture();
    assert_eq!(raw.len(), 10 * (1 + 3072));
    let p = dir.path().join("data_batch_1.bin");
    fs::write(&p, &raw).unwrap();
    let ds = load_cifar10_file(&p).unwrap();
    assert_eq!(ds.images.shape(), &[10, 3, 32, 32]);
    assert_eq!(ds.labels, (0..10).collect::<Vec<_>>());
    // second record, green plane, first pixel: i = 1024
    assert_eq!(ds.image(1).data()[1024], ((1024 * 7 + 13) % 256) as f32 / 255.0);

    let q = dir.path().join("copy.bin");
    save_cifar10_file(&ds, &q).unwrap();
    assert_eq!(fs::read(&q).unwrap(), raw);

    fs::write(dir.path().join("test_batch.bin"), &raw[..3073 * 2]).unwrap();
    let (train, test) = load_cifar10_binary(dir.path()).unwrap();
    assert_eq!(train.len(), 10);
    assert_eq!(test.unwrap().len(), 2);
}

#[test]
fn cifar_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.bin");
    let raw = cifar_fixture();
    fs::write(&p, &raw[..3073 * 3 - 5]).unwrap();
    assert!(matches!(load_cifar10_file(&p), Err(Error::Truncated { .. })));
    let mut bad = raw.clone();
    bad[3073 * 4] = 10;
    fs::write(&p, &bad).unwrap();
    assert!(matches!(
        load_cifar10_file(&p),
        Err(Error::LabelOutOfRange { label: 10, .. })
    ));
    assert!(matches!(load_cifar10_binary(dir.path()), Err(Error::Input(_))));
}

#[test]
fn well_separated_blobs_are_linearly_separable() {
    // nearest class mean is a linear rule; at 10 sigma it never errs
    let ds = synth_blobs_with(5, 400, [2, 8, 8], 11, 10.0).unwrap();
    let dim = 2 * 64;
    let mut means = vec![vec![0.0f64; dim]; 5];
    let mut counts = [0usize; 5];
    for i in 0..ds.len() {
        counts[ds.labels[i]] += 1;
        for (m, &v) in means[ds.labels[i]].iter_mut().zip(ds.image(i).data()) {
            *m += v as f64;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let correct = (0..ds.len())
        .filter(|&i| {
            let x = ds.image(i);
            let d = |m: &Vec<f64>| {
                m.iter()
                    .zip(x.data())
                    .map(|(a, &b)| (a - b as f64).powi(2))
                    .sum::<f64>()
            };
            let best = (0..5).min_by(|&a, &b| d(&means[a]).total_cmp(&d(&means[b]))).unwrap();
            best == ds.labels[i]
        })
        .count();
    assert_eq!(correct, ds.len());
}

proptest! {
    #[test]
    fn split_is_a_seeded_partition(n in 0usize..60, frac in 0.0f64..1.0, seed in 0u64..100) {
        let ds = synth_rate_patterns(3, n, [1, 2, 2], 1).unwrap();
        let (a, b) = ds.split(frac, seed).unwrap();
        prop_assert_eq!(a.len() + b.len(), n);
        let (a2, b2) = ds.split(frac, seed).unwrap();
        prop_assert_eq!(&a.images, &a2.images);
        prop_assert_eq!(&b.labels, &b2.labels);
        // every image lands on exactly one side
        let mut seen: Vec<Vec<u32>> = a.images.data().chunks(4).chain(b.images.data().chunks(4))
            .map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
        let mut all: Vec<Vec<u32>> = ds.images.data().chunks(4).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
        seen.sort();
        all.sort();
        prop_assert_eq!(seen, all);
    }

    #[test]
    fn synthetic_labels_and_pixels_in_range(k in 2usize..8, n in 0usize..40, seed in 0u64..50) {
        for ds in [synth_rate_patterns(k, n, [2, 3, 3], seed).unwrap(), synth_blobs_with(k, n, [1, 4, 4], seed, 4.0).unwrap()] {
            prop_assert_eq!(ds.len(), n);
            prop_assert!(ds.labels.iter().all(|&l| l < k));
            prop_assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
