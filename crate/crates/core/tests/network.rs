use forec_core::checkpoint::{self, Checkpoint};
use forec_core::ops;
use forec_core::tape::Tape;
use forec_core::{AuxHead, Error, Network, NetworkConfig, Role, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> NetworkConfig {
    NetworkConfig {
        base_width: 6,
        latent_width: 5,
        ..NetworkConfig::default()
    }
}

fn random_input(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, 3, h, w], |_| rng.random_range(0.0..1.0))
}

#[test]
fn builds_are_deterministic_and_teacher_copies_shared_parts() {
    let (s1, t1) = Network::build(small(), AuxHead::Reconstruction, 9).unwrap();
    let (s2, _) = Network::build(small(), AuxHead::Reconstruction, 9).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(t1.role(), Role::Teacher);
    assert_eq!(t1.aux(), AuxHead::None);
    for (name, t) in t1.named() {
        assert_eq!(s1.param(name).unwrap(), t, "{name}");
    }
    assert!(t1.names().iter().all(|n| !n.starts_with("rec.")));
    let (s3, _) = Network::build(small(), AuxHead::Reconstruction, 10).unwrap();
    assert_ne!(s1, s3);
}

#[test]
fn decoder_shapes_differ_only_in_the_last_layer() {
    let cfg = NetworkConfig {
        num_classes: 4,
        latent_width: 16,
        ..NetworkConfig::default()
    };
    let layout = Network::layout(cfg, AuxHead::Reconstruction).unwrap();
    let shape = |n: &str| layout.iter().find(|(k, _)| k == n).map(|(_, s)| s.clone());
    assert_eq!(shape("seg.head.weight"), Some(vec![4, 16, 1, 1]));
    assert_eq!(shape("rec.head.weight"), Some(vec![3, 16, 1, 1]));
    assert_eq!(shape("rec.head.bias"), None);
    for s in 0..cfg.stages {
        let name = format!("{s}.weight");
        assert_eq!(shape(&format!("seg.{name}")), shape(&format!("rec.{name}")));
    }
}

#[test]
fn default_checkpoint_tensor_count() {
    // 2 stages × 2 convs × (weight, bias) in the encoder, 2 stages + head with
    // bias in the segmentation decoder, 2 stages + bias-free head in the
    // reconstruction decoder: 8 + 6 + 5.
    let (s, _) = Network::build(NetworkConfig::default(), AuxHead::Reconstruction, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    checkpoint::save_checkpoint(&s, &path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().tensors.len(), 19);
}

#[test]
fn forward_shapes_and_errors() {
    let (s, t) = Network::build(small(), AuxHead::Reconstruction, 1).unwrap();
    let x = random_input(2, 8, 12, 0);
    assert_eq!(s.forward_seg(&x).unwrap().shape(), &[2, 4, 8, 12]);
    let (z, rec) = s.forward_rec(&x).unwrap();
    assert_eq!(rec.shape(), &[2, 3, 8, 12]);
    assert_eq!(z.z.shape(), &[2, 5, 8, 12]);
    assert!(rec.all_finite());
    assert!(matches!(t.forward_rec(&x), Err(Error::NoReconstructionDecoder)));
    assert!(matches!(s.forward_seg(&random_input(1, 6, 8, 0)), Err(Error::Shape { .. })));
    assert_eq!(s.forward_seg(&x).unwrap(), s.forward_seg(&x).unwrap());
}

#[test]
fn segmentation_and_reconstruction_share_one_encoder_pass() {
    let (s, _) = Network::build(small(), AuxHead::Reconstruction, 2).unwrap();
    let x = random_input(1, 8, 8, 3);
    let mut tape = Tape::new();
    let fv = s.forward_on_tape(&mut tape, &x, true).unwrap();
    assert_eq!(tape.value(fv.logits), &s.forward_seg(&x).unwrap());
    assert_eq!(tape.value(fv.aux.unwrap().1), &s.forward_rec(&x).unwrap().1);
    let convs = tape.op_kinds().iter().filter(|k| **k == "conv2d").count();
    // Encoder once, then two decoders of stages + head each.
    assert_eq!(convs, 2 * small().stages + 2 * (small().stages + 1));
}

#[test]
fn single_latent_slice_is_the_reconstruction() {
    let cfg = NetworkConfig {
        latent_width: 1,
        ..small()
    };
    let (mut s, _) = Network::build(cfg, AuxHead::Reconstruction, 4).unwrap();
    let i = s.param_index("rec.head.weight").unwrap();
    s.params_mut()[i] = Tensor::full([3, 1, 1, 1], 1.0);
    let (z, rec) = s.forward_rec(&random_input(1, 8, 8, 5)).unwrap();
    for c in 0..3 {
        assert_eq!(&rec.data()[c * 64..(c + 1) * 64], z.z.data());
    }
}

#[test]
fn ema_examples() {
    let (s, t) = Network::build(small(), AuxHead::None, 0).unwrap();
    let (mut other, _) = Network::build(small(), AuxHead::None, 1).unwrap();
    let mut t1 = t.clone();
    t1.ema_update(&other, 1.0).unwrap();
    assert_eq!(t1.params(), t.params());
    t1.ema_update(&other, 0.0).unwrap();
    assert_eq!(t1.params(), other.params());

    for p in other.params_mut() {
        p.data_mut().fill(0.0);
    }
    let mut ones = t.clone();
    for p in ones.params_mut() {
        p.data_mut().fill(1.0);
    }
    ones.ema_update(&other, 0.99).unwrap();
    assert!(ones.params().iter().all(|p| p.data().iter().all(|&v| v == 0.99f32)));
    assert!(ones.ema_update(&s, 1.5).is_err());
}

#[test]
fn one_pixel_descent() {
    let (mut s, _) = Network::build(small(), AuxHead::None, 6).unwrap();
    let x = random_input(1, 8, 8, 7);
    let mut labels = vec![ops::IGNORE; 64];
    labels[27] = 2;
    let loss = |net: &Network| {
        let logits = net.forward_seg(&x).unwrap();
        ops::softmax_ce(&logits, &labels).unwrap().loss
    };
    let before = loss(&s);
    let mut tape = Tape::new();
    let fv = s.forward_on_tape(&mut tape, &x, false).unwrap();
    let out = ops::softmax_ce(tape.value(fv.logits), &labels).unwrap();
    let shapes: Vec<&[usize]> = s.params().iter().map(|p| p.shape()).collect();
    let grads = tape.backward(vec![(fv.logits, out.grad)]).unwrap().dense(&shapes);
    for (p, g) in s.params_mut().iter_mut().zip(&grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= 1e-3 * gv;
        }
    }
    assert!(loss(&s) < before);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let (s, t) = Network::build(small(), AuxHead::Reconstruction, 3).unwrap();
    let ck = Checkpoint::from_pair(&s, &t, 42, [7; 32]);
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(&buf[..]).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.student().unwrap(), s);
    assert_eq!(back.teacher().unwrap(), t);
    assert_eq!(back.eval_network().unwrap().params(), t.params());

    let mut bad = buf.clone();
    bad[0] ^= 0xff;
    assert!(matches!(Checkpoint::read_from(&bad[..]), Err(Error::BadMagic)));
    let mut bad = buf.clone();
    bad[8] = 2;
    assert!(matches!(Checkpoint::read_from(&bad[..]), Err(Error::UnsupportedVersion(2))));
    assert!(matches!(Checkpoint::read_from(&buf[..buf.len() - 5]), Err(Error::Truncated)));

    let mut missing = ck.clone();
    missing.tensors.retain(|(n, _)| n != "seg.head.bias");
    assert!(missing.student().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn latent_sum_identity(seed in any::<u64>(), input_seed in any::<u64>()) {
        let (s, _) = Network::build(small(), AuxHead::Reconstruction, seed).unwrap();
        let x = random_input(2, 8, 8, input_seed);
        let (z, rec) = s.forward_rec(&x).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let sum = z.weighted_sum(n, c);
                let out = &rec.data()[(n * 3 + c) * 64..(n * 3 + c + 1) * 64];
                for (a, b) in sum.iter().zip(out) {
                    prop_assert!((a - *b as f64).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn ema_is_convex_and_contracts(seed in any::<u64>(), alpha in 0.0f64..1.0) {
        let (_, t) = Network::build(small(), AuxHead::None, seed).unwrap();
        let (s2, _) = Network::build(small(), AuxHead::None, seed.wrapping_add(1)).unwrap();
        let mut t1 = t.clone();
        t1.ema_update(&s2, alpha).unwrap();
        for ((old, new), st) in t.params().iter().zip(t1.params()).zip(s2.params()) {
            for ((&o, &n), &v) in old.data().iter().zip(new.data()).zip(st.data()) {
                prop_assert!(n >= o.min(v) - 1e-6 && n <= o.max(v) + 1e-6);
                prop_assert!(((n - v).abs() as f64) <= alpha * (o - v).abs() as f64 + 1e-6);
            }
        }
    }
}
