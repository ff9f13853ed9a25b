mod common;

use common::{rel_err, rng, softmax_channels};
use dualseg::autograd::Graph;
use dualseg::loss::{
    combined_loss, combined_loss_node, cross_entropy_loss, tversky_index, tversky_loss, LossConfig,
};
use dualseg::params::uniform_tensor;
use dualseg::{LabelMask, Tensor, IGNORE};
use proptest::prelude::*;

/// Random normalized probabilities `[1, k, h, w]` and a target using every class.
fn instance(k: usize, h: usize, w: usize, seed: u64) -> (Tensor<f64>, Vec<LabelMask>) {
    let logits = uniform_tensor(&[1, k, h, w], -3.0, 3.0, &mut rng(seed));
    let target = LabelMask::from_fn(h, w, |r, c| ((r * 7 + c * 3 + seed as usize) % k) as u8);
    (softmax_channels(&logits), vec![target])
}

fn all_losses(p: &Tensor<f64>, t: &[LabelMask], cfg: &LossConfig) -> [f64; 3] {
    [
        tversky_loss(p, t, cfg).unwrap(),
        cross_entropy_loss(p, t, cfg).unwrap(),
        combined_loss(p, t, cfg).unwrap(),
    ]
}

fn one_hot(t: &LabelMask, k: usize) -> Tensor<f64> {
    let (h, w) = t.size();
    Tensor::from_fn(&[1, k, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let y = t.data()[p];
        if y == IGNORE {
            if c == 0 { 1.0 } else { 0.0 }
        } else if y as usize == c {
            1.0
        } else {
            0.0
        }
    })
}

/// Applies a pixel permutation to every channel.
fn permute_pixels(p: &Tensor<f64>, t: &LabelMask, perm: &[usize]) -> (Tensor<f64>, LabelMask) {
    let (_, k, h, w) = p.dims4().unwrap();
    let hw = h * w;
    let pp = Tensor::from_fn(&[1, k, h, w], |i| p.data()[(i / hw) * hw + perm[i % hw]]);
    let tt = LabelMask::new(h, w, perm.iter().map(|&j| t.data()[j]).collect()).unwrap();
    (pp, tt)
}

fn arb_cfg() -> impl Strategy<Value = LossConfig> {
    (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(a, b, l)| LossConfig {
        alpha: a,
        beta: b,
        lambda_combined: l,
        ..LossConfig::default()
    })
}

#[test]
fn gradient_wrt_logits_matches_central_differences() {
    let (k, h, w) = (3, 16, 16);
    let logits = uniform_tensor::<f64>(&[1, k, h, w], -2.0, 2.0, &mut rng(42));
    let (_, target) = instance(k, h, w, 1);
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let x = g.param(logits.clone());
    let (loss, _) = combined_loss_node(&mut g, x, &target, &cfg).unwrap();
    let grads = g.backward(loss);
    let analytic = grads.get_slice(x).unwrap();
    let f = |l: &Tensor<f64>| combined_loss(&softmax_channels(l), &target, &cfg).unwrap();
    let step = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..logits.numel() {
        let mut plus = logits.clone();
        plus.data_mut()[i] += step;
        let mut minus = logits.clone();
        minus.data_mut()[i] -= step;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * step);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn values_stay_in_range(k in 2usize..5, h in 1usize..9, w in 1usize..9, seed in 0u64..10_000, cfg in arb_cfg()) {
        let (p, t) = instance(k, h, w, seed);
        for c in 0..k {
            let ti = tversky_index(&p, &t, c, &cfg).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ti), "index {ti}");
        }
        for v in all_losses(&p, &t, &cfg) {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
    }

    #[test]
    fn correct_one_hot_scores_zero(k in 2usize..5, h in 1usize..9, w in 1usize..9, seed in 0u64..10_000, cfg in arb_cfg()) {
        let (_, t) = instance(k, h, w, seed);
        let mut t = t;
        t[0].data_mut()[0] = IGNORE;
        for v in all_losses(&one_hot(&t[0], k), &t, &cfg) {
            prop_assert!(v.abs() < 1e-5, "loss {v}");
        }
    }

    #[test]
    fn wrong_prediction_scores_positive(k in 2usize..5, h in 1usize..9, w in 1usize..9, seed in 0u64..10_000) {
        let cfg = LossConfig::default();
        let (_, t) = instance(k, h, w, seed);
        let shifted = LabelMask::new(h, w, t[0].data().iter().map(|&v| ((v as usize + 1) % k) as u8).collect()).unwrap();
        for v in all_losses(&one_hot(&shifted, k), &t, &cfg) {
            prop_assert!(v > 1e-5);
        }
    }

    #[test]
    fn invariant_under_pixel_permutation(k in 2usize..5, h in 1usize..7, w in 1usize..7, seed in 0u64..10_000, cfg in arb_cfg()) {
        let (p, t) = instance(k, h, w, seed);
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % (h * w));
        let (pp, tt) = permute_pixels(&p, &t[0], &perm);
        let a = all_losses(&p, &t, &cfg);
        let b = all_losses(&pp, &[tt], &cfg);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ignored_pixels_do_not_matter(k in 2usize..5, h in 2usize..8, w in 2usize..8, seed in 0u64..10_000, cfg in arb_cfg()) {
        let (p, t) = instance(k, h, w, seed);
        let mut t = t;
        let hw = h * w;
        for i in (0..hw).filter(|i| (i + seed as usize) % 3 == 0) {
            t[0].data_mut()[i] = IGNORE;
        }
        let base = all_losses(&p, &t, &cfg);
        // overwrite the prediction at ignored pixels with an arbitrary distribution
        let other = softmax_channels(&uniform_tensor(&[1, k, h, w], -5.0, 5.0, &mut rng(seed + 1)));
        let mixed = Tensor::from_fn(&[1, k, h, w], |i| {
            if t[0].data()[i % hw] == IGNORE { other.data()[i] } else { p.data()[i] }
        });
        let after = all_losses(&mixed, &t, &cfg);
        for (x, y) in base.iter().zip(&after) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn half_weights_give_dice(k in 2usize..5, h in 1usize..9, w in 1usize..9, seed in 0u64..10_000) {
        let cfg = LossConfig { alpha: 0.5, beta: 0.5, smooth: 1e-12, ..LossConfig::default() };
        let (p, t) = instance(k, h, w, seed);
        let hw = h * w;
        for c in 0..k {
            // soft Dice written out directly
            let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
            for i in 0..hw {
                let pi = p.data()[c * hw + i];
                let yi = if t[0].data()[i] as usize == c { 1.0 } else { 0.0 };
                inter += pi * yi;
                psum += pi;
                ysum += yi;
            }
            let dice = 2.0 * inter / (psum + ysum);
            let ti = tversky_index(&p, &t, c, &cfg).unwrap();
            prop_assert!((ti - dice).abs() < 1e-9, "index {ti} dice {dice}");
        }
    }
}

#[test]
fn uniform_two_class_prediction_matches_dice_oracle() {
    let (h, w) = (4, 4);
    let t = vec![LabelMask::from_fn(h, w, |_, c| u8::from(c >= 2))];
    let p = Tensor::<f64>::full(&[1, 2, h, w], 0.5);
    let cfg = LossConfig { alpha: 0.5, beta: 0.5, ..LossConfig::default() };
    // each class: 8 target pixels, predicted mass 8, overlap 4
    let dice = 2.0 * 4.0 / (8.0 + 8.0);
    let loss = tversky_loss(&p, &t, &cfg).unwrap();
    assert!((loss - (1.0 - dice)).abs() < 1e-6);
}

#[test]
fn heavier_false_negative_weight_raises_loss() {
    // prediction misses half of class 1
    let t = vec![LabelMask::from_fn(4, 4, |r, _| u8::from(r < 2))];
    let p = Tensor::from_fn(&[1, 2, 4, 4], |i| {
        let (c, px) = (i / 16, i % 16);
        let hit = px < 4;
        match (c, hit) {
            (1, true) => 0.9,
            (1, false) => 0.1,
            (0, true) => 0.1,
            _ => 0.9,
        }
    });
    let at = |beta| tversky_loss(&p, &t, &LossConfig { beta, ..LossConfig::default() }).unwrap();
    assert!(at(0.1) < at(0.5) && at(0.5) < at(0.9));
}

#[test]
fn mixing_extremes_reduce_to_single_terms() {
    let (p, t) = instance(3, 6, 5, 9);
    let base = LossConfig::default();
    assert_eq!(combined_loss(&p, &t, &base.with_lambda(1.0)).unwrap(), tversky_loss(&p, &t, &base).unwrap());
    assert_eq!(combined_loss(&p, &t, &base.with_lambda(0.0)).unwrap(), cross_entropy_loss(&p, &t, &base).unwrap());
}

#[test]
fn half_probability_cross_entropy_is_ln_two() {
    let t = vec![LabelMask::from_fn(3, 3, |r, c| ((r + c) % 2) as u8)];
    let p = Tensor::full(&[1, 2, 3, 3], 0.5);
    let ce = cross_entropy_loss(&p, &t, &LossConfig::default()).unwrap();
    assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn fully_ignored_target() {
    let t = vec![LabelMask::filled(2, 2, IGNORE)];
    let p = Tensor::<f64>::full(&[1, 2, 2, 2], 0.5);
    let cfg = LossConfig::default();
    assert_eq!(cross_entropy_loss(&p, &t, &cfg).unwrap(), 0.0);
    assert!((tversky_index(&p, &t, 1, &cfg).unwrap() - 1.0).abs() < 1e-12);
}
