use std::collections::HashSet;

use dualseg::metrics::{ConfusionMatrix, MetricsReport};
use dualseg::{Error, LabelMask, IGNORE};
use num_rational::Ratio;
use proptest::prelude::*;

const K: usize = 5;

fn arb_pair() -> impl Strategy<Value = (LabelMask, LabelMask)> {
    (1usize..=16, 1usize..=16).prop_flat_map(|(h, w)| {
        let gt = prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, 3, 4, IGNORE]), h * w);
        let pred = prop::collection::vec(0u8..K as u8, h * w);
        (gt, pred).prop_map(move |(g, p)| (LabelMask::new(h, w, p).unwrap(), LabelMask::new(h, w, g).unwrap()))
    })
}

fn matrix(pairs: &[(LabelMask, LabelMask)]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(K);
    for (p, g) in pairs {
        cm.accumulate(p, g, IGNORE).unwrap();
    }
    cm
}

/// Pixel sets per class, scored directly.
fn set_scores(pairs: &[(LabelMask, LabelMask)], k: u8) -> Option<(f64, f64)> {
    let mut pred = HashSet::new();
    let mut gt = HashSet::new();
    for (n, (p, g)) in pairs.iter().enumerate() {
        for (i, (&pv, &gv)) in p.data().iter().zip(g.data()).enumerate() {
            if gv == IGNORE {
                continue;
            }
            if pv == k {
                pred.insert((n, i));
            }
            if gv == k {
                gt.insert((n, i));
            }
        }
    }
    let inter = pred.intersection(&gt).count() as f64;
    let union = pred.union(&gt).count() as f64;
    if union == 0.0 {
        return None;
    }
    Some((inter / union, 2.0 * inter / (pred.len() + gt.len()) as f64))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn agrees_with_set_oracle(pairs in prop::collection::vec(arb_pair(), 1..4)) {
        let cm = matrix(&pairs);
        let iou = cm.iou_per_class();
        let dice = cm.dice_per_class();
        let mut defined = Vec::new();
        for k in 0..K {
            match set_scores(&pairs, k as u8) {
                None => prop_assert!(iou[k].is_none() && dice[k].is_none()),
                Some((i, d)) => {
                    prop_assert!((iou[k].unwrap() - i).abs() < 1e-12);
                    prop_assert!((dice[k].unwrap() - d).abs() < 1e-12);
                    defined.push(i);
                }
            }
        }
        if defined.is_empty() {
            prop_assert!(matches!(cm.miou(true), Err(Error::EmptyEvaluation)));
        } else {
            let mean = defined.iter().sum::<f64>() / defined.len() as f64;
            prop_assert!((cm.miou(true).unwrap() - mean).abs() < 1e-12);
        }
        let scored = pairs.iter().flat_map(|(_, g)| g.data()).filter(|&&v| v != IGNORE).count();
        prop_assert_eq!(cm.total(), scored as u64);
    }

    #[test]
    fn dice_iou_identity_is_exact(pairs in prop::collection::vec(arb_pair(), 1..3)) {
        let cm = matrix(&pairs);
        for k in 0..K {
            if let (Some(i), Some(d)) = (cm.iou_exact(k), cm.dice_exact(k)) {
                prop_assert_eq!(d, Ratio::from_integer(2) * i / (Ratio::from_integer(1) + i));
                let (fi, fd) = (cm.iou_per_class()[k].unwrap(), cm.dice_per_class()[k].unwrap());
                prop_assert!((fd - 2.0 * fi / (1.0 + fi)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merging_equals_joint_accumulation(a in prop::collection::vec(arb_pair(), 1..3), b in prop::collection::vec(arb_pair(), 1..3), c in prop::collection::vec(arb_pair(), 1..3)) {
        let (ma, mb, mc) = (matrix(&a), matrix(&b), matrix(&c));
        let joint = matrix(&[a, b, c].concat());
        let left = ma.merge(&mb).unwrap().merge(&mc).unwrap();
        let right = ma.merge(&mb.merge(&mc).unwrap()).unwrap();
        prop_assert_eq!(&left, &joint);
        prop_assert_eq!(&right, &joint);
        prop_assert_eq!(ma.merge(&mb).unwrap(), mb.merge(&ma).unwrap());
        prop_assert_eq!(ma.merge(&ConfusionMatrix::new(K)).unwrap(), ma.clone());
        if let Ok(m) = joint.miou(false) {
            prop_assert_eq!(left.miou(false).unwrap(), m);
        }
    }
}

#[test]
fn two_by_two_example() {
    let gt = LabelMask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let pred = LabelMask::new(2, 2, vec![0, 1, 1, 1]).unwrap();
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &gt, IGNORE).unwrap();
    assert_eq!(cm.counts(), &[1, 1, 0, 2]);
    assert_eq!(cm.iou_exact(0), Some(Ratio::new(1, 2)));
    assert_eq!(cm.iou_exact(1), Some(Ratio::new(2, 3)));
    assert_eq!(cm.dice_exact(1), Some(Ratio::new(4, 5)));
    assert!((cm.miou(true).unwrap() - 7.0 / 12.0).abs() < 1e-12);
    assert!((cm.miou(false).unwrap() - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn ignore_and_range() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&LabelMask::filled(2, 2, 1), &LabelMask::filled(2, 2, IGNORE), IGNORE).unwrap();
    assert_eq!(cm.total(), 0);
    assert!(matches!(cm.miou(true), Err(Error::EmptyEvaluation)));
    let r = cm.accumulate(&LabelMask::filled(1, 1, 3), &LabelMask::filled(1, 1, 0), IGNORE);
    assert!(matches!(r, Err(Error::LabelOutOfRange { label: 3, .. })));
    assert!(cm.merge(&ConfusionMatrix::new(4)).is_err());
}

#[test]
fn report_marks_undefined_classes() {
    let mut cm = ConfusionMatrix::new(3);
    let m = LabelMask::new(1, 2, vec![0, 2]).unwrap();
    cm.accumulate(&m, &m, IGNORE).unwrap();
    let names = ["background", "liver", "hook"];
    let report = MetricsReport::from_matrix(&cm, |k| names[k].to_string(), true, serde_json::Value::Null).unwrap();
    assert!(!report.per_class[1].defined);
    assert_eq!(report.miou, 1.0);
    let csv = report.to_csv();
    assert!(csv.starts_with("id,name,iou,dice\n"));
    assert!(csv.lines().any(|l| l.starts_with("1,liver,")));
}
