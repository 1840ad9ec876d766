use std::collections::HashSet;

use forec_core::metrics::ConfusionMatrix;
use forec_core::ops::IGNORE;
use proptest::prelude::*;

/// Per-class IoU from explicit pixel-index sets.
fn set_oracle(pred: &[u8], gt: &[u8], classes: usize) -> Vec<Option<f64>> {
    (0..classes as u8)
        .map(|c| {
            let p: HashSet<usize> = (0..pred.len()).filter(|&i| gt[i] != IGNORE && pred[i] == c).collect();
            let g: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
            let union = p.union(&g).count();
            (union > 0).then(|| p.intersection(&g).count() as f64 / union as f64)
        })
        .collect()
}

fn maps(len: usize, classes: u8) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (
        prop::collection::vec(0..classes, len),
        prop::collection::vec(prop_oneof![9 => 0..classes, 1 => Just(IGNORE)], len),
    )
}

#[test]
fn spec_examples() {
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
    assert_eq!([cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)], [1, 0, 1, 2]);
    let r = cm.miou().unwrap();
    assert!((r.mean - 0.5833).abs() < 1e-4);

    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&[1, 0, 1], &[0, 1, 0]).unwrap();
    assert_eq!(cm.miou().unwrap().mean, 0.0);

    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&[2, 1], &[IGNORE, IGNORE]).unwrap();
    assert_eq!(cm.total(), 0);
    assert!(cm.miou().is_err());
    assert!(cm.accumulate(&[3], &[0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_set_oracle(classes in 2u8..=4, (pred, gt) in (2u8..=4).prop_flat_map(|c| maps(64, c))) {
        let c = classes.max(*pred.iter().chain(gt.iter().filter(|&&g| g != IGNORE)).max().unwrap() + 1) as usize;
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&pred, &gt).unwrap();
        prop_assert_eq!(cm.total(), gt.iter().filter(|&&g| g != IGNORE).count() as u64);
        let oracle = set_oracle(&pred, &gt, c);
        match cm.miou() {
            Ok(r) => {
                prop_assert_eq!(&r.per_class, &oracle);
                let present: Vec<f64> = oracle.iter().flatten().copied().collect();
                prop_assert_eq!(r.mean, present.iter().sum::<f64>() / present.len() as f64);
            }
            Err(_) => prop_assert!(oracle.iter().all(Option::is_none)),
        }
    }

    #[test]
    fn class_permutation_permutes_iou((pred, gt) in maps(48, 4), perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle()) {
        let map = |v: &[u8]| -> Vec<u8> { v.iter().map(|&x| if x == IGNORE { IGNORE } else { perm[x as usize] }).collect() };
        let mut a = ConfusionMatrix::new(4);
        a.accumulate(&pred, &gt).unwrap();
        let mut b = ConfusionMatrix::new(4);
        b.accumulate(&map(&pred), &map(&gt)).unwrap();
        if let (Ok(ra), Ok(rb)) = (a.miou(), b.miou()) {
            for k in 0..4 {
                prop_assert_eq!(ra.per_class[k], rb.per_class[perm[k] as usize]);
            }
            prop_assert!((ra.mean - rb.mean).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulation_order_is_irrelevant(images in prop::collection::vec(maps(16, 3), 1..6)) {
        let mut forward = ConfusionMatrix::new(3);
        for (p, g) in &images {
            forward.accumulate(p, g).unwrap();
        }
        let mut backward = ConfusionMatrix::new(3);
        for (p, g) in images.iter().rev() {
            let mut one = ConfusionMatrix::new(3);
            one.accumulate(p, g).unwrap();
            backward.merge(&one).unwrap();
        }
        prop_assert_eq!(forward, backward);
    }
}
