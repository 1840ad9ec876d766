use std::collections::HashSet;

use forec_core::dataset::{self, Dataset, DatasetMeta, Sampler};
use forec_core::pnm;
use forec_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn meta(train: usize, val: usize) -> DatasetMeta {
    DatasetMeta {
        height: 32,
        width: 32,
        object_classes: 3,
        seed: 0,
        train_ids: (0..train).collect(),
        val_ids: (train..train + val).collect(),
    }
}

#[test]
fn generation_is_deterministic_and_order_free() {
    let a = dataset::gen_shapes(24, 32, 48, 3, 11).unwrap();
    let b = dataset::gen_shapes(24, 32, 48, 3, 11).unwrap();
    assert_eq!(a, b);
    // Content depends only on (seed, id): a shorter run is a prefix.
    let prefix = dataset::gen_shapes(5, 32, 48, 3, 11).unwrap();
    assert_eq!(&a[..5], &prefix[..]);
    let other = dataset::gen_shapes(5, 32, 48, 3, 12).unwrap();
    assert_ne!(prefix, other);
}

#[test]
fn every_image_has_foreground_and_background() {
    for s in dataset::gen_shapes(200, 64, 64, 3, 5).unwrap() {
        assert!(s.label.iter().any(|&l| l == 0), "sample {}", s.id);
        assert!(s.label.iter().any(|&l| l != 0), "sample {}", s.id);
        assert!(s.label.iter().all(|&l| l <= 3));
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn foreground_fraction_within_fixture_bounds() {
    let samples = dataset::gen_shapes(1000, 64, 64, 3, 0).unwrap();
    let frac: f64 = samples
        .iter()
        .map(|s| s.label.iter().filter(|&&l| l != 0).count() as f64 / s.label.len() as f64)
        .sum::<f64>()
        / samples.len() as f64;
    assert!((0.05..=0.45).contains(&frac), "{frac}");
}

#[test]
fn rotated_classes_are_generated() {
    let samples = dataset::gen_shapes(100, 64, 64, 6, 2).unwrap();
    let seen: HashSet<u8> = samples.iter().flat_map(|s| s.label.iter().copied()).collect();
    assert_eq!(seen, (0..=6).collect());
    assert!(dataset::gen_shapes(1, 64, 64, 9, 0).is_err());
    assert!(dataset::gen_shapes(1, 16, 64, 3, 0).is_err());
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::generate(6, 2, 32, 32, 3, 4).unwrap();
    data.save(dir.path()).unwrap();
    assert!(dir.path().join("images/0007.ppm").is_file());
    assert!(dir.path().join("labels/0000.pgm").is_file());
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.meta, data.meta);
    for (a, b) in data.samples.iter().zip(&back.samples) {
        assert_eq!(a.label, b.label);
        assert!(a.image.max_abs_diff(&b.image) <= 1.0 / 510.0 + 1e-7);
    }
}

#[test]
fn ramp_image_bytes() {
    let img = Tensor::new([3, 2, 2], vec![0.0f32, 0.2, 0.2, 0.4, 0.2, 0.4, 0.4, 0.6, 0.4, 0.6, 0.6, 0.8]).unwrap();
    let bytes = pnm::encode_ppm(&img).unwrap();
    let payload = &bytes[bytes.len() - 12..];
    // Interleaved RGB, pixel p = (r, r + 0.2, r + 0.4) scaled to 255.
    assert_eq!(payload, &[0, 51, 102, 51, 102, 153, 51, 102, 153, 102, 153, 204]);
    assert!(pnm::encode_ppm(&Tensor::zeros([3, 2, 2])).unwrap()[bytes.len() - 12..].iter().all(|&b| b == 0));
}

#[test]
fn malformed_files_are_rejected() {
    assert!(pnm::decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
    assert!(pnm::decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    assert!(pnm::decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
    assert!(pnm::decode_pgm(b"P5\n# comment\n1 1\n255\n\x07").is_ok());
}

#[test]
fn partition_examples() {
    let p = dataset::partition(&meta(256, 64), 1.0 / 16.0, 0).unwrap();
    assert_eq!((p.labeled.len(), p.unlabeled.len(), p.validation.len()), (16, 240, 64));
    assert_eq!(p.ratio, "1/16");
    let full = dataset::partition(&meta(256, 64), 1.0, 0).unwrap();
    assert!(full.unlabeled.is_empty());
    let other = dataset::partition(&meta(256, 64), 1.0 / 16.0, 1).unwrap();
    assert_ne!(p.labeled, other.labeled);
    assert_eq!(p.labeled.len(), other.labeled.len());
    assert!(dataset::partition(&meta(0, 2), 0.5, 0).is_err());
    assert!(dataset::partition(&meta(8, 2), 0.0, 0).is_err());
}

#[test]
fn small_pools_repeat_and_empty_pools_error() {
    let p = dataset::partition(&meta(32, 4), 2.0 / 32.0, 0).unwrap();
    assert_eq!(p.labeled.len(), 2);
    let mut s = Sampler::new(&p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (l, u) = s.sample_batch(4, &mut rng).unwrap();
    assert_eq!((l.len(), u.len()), (4, 4));
    assert!(l.iter().collect::<HashSet<_>>().len() <= 2);

    let full = dataset::partition(&meta(32, 4), 1.0, 0).unwrap();
    let mut s = Sampler::new(&full).unwrap();
    assert!(s.sample_batch(4, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_are_disjoint_and_cover(train in 1usize..200, val in 0usize..20, frac in 0.01f64..=1.0, seed in any::<u64>()) {
        let m = meta(train, val);
        match dataset::partition(&m, frac, seed) {
            Ok(p) => {
                prop_assert_eq!(p.labeled.len(), (frac * train as f64 - 1e-9).ceil() as usize);
                let l: HashSet<_> = p.labeled.iter().collect();
                let u: HashSet<_> = p.unlabeled.iter().collect();
                let v: HashSet<_> = p.validation.iter().collect();
                prop_assert!(l.is_disjoint(&u) && l.is_disjoint(&v) && u.is_disjoint(&v));
                let train_set: HashSet<_> = m.train_ids.iter().collect();
                prop_assert_eq!(l.union(&u).copied().collect::<HashSet<_>>(), train_set);
            }
            Err(_) => prop_assert_eq!((frac * train as f64 - 1e-9).ceil() as usize, 0),
        }
    }

    #[test]
    fn epoch_draws_do_not_repeat(pool in 8usize..80, b in 1usize..8, seed in any::<u64>()) {
        let p = dataset::partition(&meta(pool + 1, 0), 1.0 / (pool + 1) as f64, seed).unwrap();
        let mut s = Sampler::new(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = p.unlabeled.len() / b;
        let mut seen = HashSet::new();
        for _ in 0..steps {
            for id in s.unlabeled(b, &mut rng).unwrap() {
                prop_assert!(seen.insert(id), "id {} repeated", id);
            }
        }
    }

    #[test]
    fn ppm_round_trip_error_is_half_a_step(values in prop::collection::vec(0.0f32..=1.0, 3 * 4 * 5)) {
        let img = Tensor::new([3, 4, 5], values).unwrap();
        let back = pnm::decode_ppm(&pnm::encode_ppm(&img).unwrap()).unwrap();
        prop_assert!(img.max_abs_diff(&back) <= 1.0 / 510.0 + 1e-7);
    }
}
