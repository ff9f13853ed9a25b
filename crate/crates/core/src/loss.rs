//! Combined Tversky + cross-entropy objective.
//!
//! All functions take per-pixel class probabilities `[b, k, h, w]` and one
//! [`LabelMask`] per batch item. Tversky counts are soft, so every loss here
//! has an analytic gradient with respect to the probabilities.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::{LabelMask, IGNORE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight on false positives in the Tversky index.
    pub alpha: f64,
    /// Weight on false negatives in the Tversky index.
    pub beta: f64,
    /// Share of the Tversky term in the combined loss.
    pub lambda_combined: f64,
    pub ignore_index: u8,
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            lambda_combined: 0.7,
            ignore_index: IGNORE,
            smooth: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.alpha) || !unit(self.beta) || !unit(self.lambda_combined) {
            return Err(Error::Config(format!(
                "loss weights must lie in [0,1]: alpha={} beta={} lambda={}",
                self.alpha, self.beta, self.lambda_combined
            )));
        }
        if !(self.smooth > 0.0) {
            return Err(Error::Config(format!(
                "loss smooth must be positive, got {}",
                self.smooth
            )));
        }
        Ok(())
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda_combined = lambda;
        self
    }
}

/// Soft true-positive / false-positive / false-negative mass for one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TverskyCounts<T> {
    pub tp: T,
    pub fp: T,
    pub fn_: T,
}

impl<T: Scalar> TverskyCounts<T> {
    /// `(tp + smooth) / (tp + alpha·fp + beta·fn + smooth)`
    pub fn index(&self, alpha: f64, beta: f64, smooth: f64) -> T {
        let s = T::of(smooth);
        (self.tp + s) / (self.tp + T::of(alpha) * self.fp + T::of(beta) * self.fn_ + s)
    }
}

fn check_inputs<T: Scalar>(probs: &Tensor<T>, targets: &[LabelMask], cfg: &LossConfig) -> Result<(usize, usize, usize, usize)> {
    let (b, k, h, w) = probs.dims4()?;
    if targets.len() != b {
        return Err(Error::Shape(format!(
            "{} targets for a batch of {b}",
            targets.len()
        )));
    }
    for t in targets {
        if t.size() != (h, w) {
            return Err(Error::Shape(format!(
                "target {:?} does not match probabilities {h}x{w}",
                t.size()
            )));
        }
        t.check_range(k, cfg.ignore_index)?;
    }
    Ok((b, k, h, w))
}

/// Soft counts of `class` over non-ignored pixels.
pub fn soft_counts<T: Scalar>(
    probs: &Tensor<T>,
    targets: &[LabelMask],
    class: usize,
    ignore: u8,
) -> Result<TverskyCounts<T>> {
    let (b, k, h, w) = probs.dims4()?;
    if class >= k {
        return Err(Error::Shape(format!("class {class} out of {k}")));
    }
    let hw = h * w;
    let p = probs.data();
    let mut c = TverskyCounts {
        tp: T::zero(),
        fp: T::zero(),
        fn_: T::zero(),
    };
    for (bi, t) in targets.iter().enumerate().take(b) {
        let plane = &p[(bi * k + class) * hw..(bi * k + class + 1) * hw];
        for (&pk, &y) in plane.iter().zip(t.data()) {
            if y == ignore {
                continue;
            }
            if y as usize == class {
                c.tp += pk;
                c.fn_ += T::one() - pk;
            } else {
                c.fp += pk;
            }
        }
    }
    Ok(c)
}

pub fn tversky_index<T: Scalar>(
    probs: &Tensor<T>,
    targets: &[LabelMask],
    class: usize,
    cfg: &LossConfig,
) -> Result<T> {
    check_inputs(probs, targets, cfg)?;
    let c = soft_counts(probs, targets, class, cfg.ignore_index)?;
    Ok(c.index(cfg.alpha, cfg.beta, cfg.smooth))
}

/// Classes that occur in a target or win the argmax at some non-ignored pixel.
pub fn scored_classes<T: Scalar>(probs: &Tensor<T>, targets: &[LabelMask], ignore: u8) -> Vec<usize> {
    let (_, k, h, w) = probs.dims4().expect("checked by caller");
    let hw = h * w;
    let p = probs.data();
    let mut present = vec![false; k];
    for (bi, t) in targets.iter().enumerate() {
        for (i, &y) in t.data().iter().enumerate() {
            if y == ignore {
                continue;
            }
            present[y as usize] = true;
            let mut best = 0;
            for c in 1..k {
                if p[(bi * k + c) * hw + i] > p[(bi * k + best) * hw + i] {
                    best = c;
                }
            }
            present[best] = true;
        }
    }
    (0..k).filter(|&c| present[c]).collect()
}

/// Mean of `1 − tversky_index` over [`scored_classes`]; zero when every pixel is ignored.
pub fn tversky_loss<T: Scalar>(probs: &Tensor<T>, targets: &[LabelMask], cfg: &LossConfig) -> Result<T> {
    check_inputs(probs, targets, cfg)?;
    let classes = scored_classes(probs, targets, cfg.ignore_index);
    if classes.is_empty() {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for &c in &classes {
        let counts = soft_counts(probs, targets, c, cfg.ignore_index)?;
        total += T::one() - counts.index(cfg.alpha, cfg.beta, cfg.smooth);
    }
    Ok(total / T::of_usize(classes.len()))
}

/// Mean of `−ln p[target]` over non-ignored pixels; zero when every pixel is ignored.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, targets: &[LabelMask], cfg: &LossConfig) -> Result<T> {
    let (_, k, h, w) = check_inputs(probs, targets, cfg)?;
    let hw = h * w;
    let p = probs.data();
    let floor = T::of(PROB_FLOOR);
    let mut total = T::zero();
    let mut n = 0usize;
    for (bi, t) in targets.iter().enumerate() {
        for (i, &y) in t.data().iter().enumerate() {
            if y == cfg.ignore_index {
                continue;
            }
            total -= p[(bi * k + y as usize) * hw + i].max(floor).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Ok(T::zero());
    }
    Ok(total / T::of_usize(n))
}

/// `lambda·tversky + (1 − lambda)·ce`
pub fn mix<T: Scalar>(lambda: f64, tversky: T, ce: T) -> T {
    T::of(lambda) * tversky + T::of(1.0 - lambda) * ce
}

pub fn combined_loss<T: Scalar>(probs: &Tensor<T>, targets: &[LabelMask], cfg: &LossConfig) -> Result<T> {
    let tv = tversky_loss(probs, targets, cfg)?;
    let ce = cross_entropy_loss(probs, targets, cfg)?;
    Ok(mix(cfg.lambda_combined, tv, ce))
}

/// Combined loss value and its gradient with respect to `probs`.
///
/// The set of scored classes is held fixed (it is piecewise constant in the
/// probabilities).
pub fn combined_loss_with_grad<T: Scalar>(
    probs: &Tensor<T>,
    targets: &[LabelMask],
    cfg: &LossConfig,
) -> Result<(T, Tensor<T>)> {
    let (b, k, h, w) = check_inputs(probs, targets, cfg)?;
    let hw = h * w;
    let p = probs.data();
    let mut grad = Tensor::zeros(probs.shape());
    let lambda = T::of(cfg.lambda_combined);
    let (alpha, beta, s) = (T::of(cfg.alpha), T::of(cfg.beta), T::of(cfg.smooth));

    // Tversky term
    let classes = scored_classes(probs, targets, cfg.ignore_index);
    let mut tv = T::zero();
    if !classes.is_empty() {
        let inv = T::one() / T::of_usize(classes.len());
        let g = grad.data_mut();
        for &c in &classes {
            let counts = soft_counts(probs, targets, c, cfg.ignore_index)?;
            let num = counts.tp + s;
            let den = counts.tp + alpha * counts.fp + beta * counts.fn_ + s;
            tv += T::one() - num / den;
            // d(num/den)/dp: positives see (den − num·(1 − beta))/den², negatives −num·alpha/den²
            let d_pos = (den - num * (T::one() - beta)) / (den * den);
            let d_neg = -(num * alpha) / (den * den);
            let lam_inv = lambda * inv;
            for (bi, t) in targets.iter().enumerate().take(b) {
                let off = (bi * k + c) * hw;
                for (i, &y) in t.data().iter().enumerate() {
                    if y == cfg.ignore_index {
                        continue;
                    }
                    let d = if y as usize == c { d_pos } else { d_neg };
                    g[off + i] -= lam_inv * d;
                }
            }
        }
        tv *= inv;
    }

    // Cross-entropy term
    let floor = T::of(PROB_FLOOR);
    let n = targets
        .iter()
        .map(|t| t.data().iter().filter(|&&y| y != cfg.ignore_index).count())
        .sum::<usize>();
    let mut ce = T::zero();
    if n > 0 {
        let inv_n = T::one() / T::of_usize(n);
        let w_ce = (T::one() - lambda) * inv_n;
        let g = grad.data_mut();
        for (bi, t) in targets.iter().enumerate() {
            for (i, &y) in t.data().iter().enumerate() {
                if y == cfg.ignore_index {
                    continue;
                }
                let idx = (bi * k + y as usize) * hw + i;
                let pt = p[idx];
                ce -= pt.max(floor).ln();
                if pt > floor {
                    g[idx] -= w_ce / pt;
                }
            }
        }
        ce *= inv_n;
    }
    Ok((mix(cfg.lambda_combined, tv, ce), grad))
}

/// Channel softmax of `logits` followed by the combined loss, recorded on `g`.
/// Returns `(loss, probs)`.
pub fn combined_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[LabelMask],
    cfg: &LossConfig,
) -> Result<(Var, Var)> {
    let probs = g.softmax(logits, 1)?;
    let (value, grad) = combined_loss_with_grad(g.value(probs), targets, cfg)?;
    let loss = g.objective(probs, value, grad)?;
    Ok((loss, probs))
}
