//! Scoring single heads or the fused pair on a dataset split.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::{derive_output, fuse_with_rule, morph_refine, FusionRule, Head, LabelRegistry, SegOutput};
use crate::mask::{LabelMask, BACKGROUND, IGNORE};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::model::SegModel;

/// Stacks sample images into `[b, 3, h, w]`.
pub fn batch_images<T: Scalar>(samples: &[&Sample<T>]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "frame {} is {:?}, batch expects {shape:?}",
                s.id,
                s.image.shape()
            )));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::from_vec(&[samples.len(), shape[0], shape[1], shape[2]], data)
}

/// Anything that produces head probabilities for a frame.
pub trait HeadPredictor<T> {
    fn head(&self) -> Head;
    fn predict(&self, sample: &Sample<T>) -> Result<SegOutput<T>>;
}

impl<T: Scalar> HeadPredictor<T> for SegModel<T> {
    fn head(&self) -> Head {
        self.spec.head
    }

    fn predict(&self, sample: &Sample<T>) -> Result<SegOutput<T>> {
        SegModel::predict(self, &batch_images(&[sample])?)
    }
}

/// Debug predictor returning the ground truth as one-hot probabilities.
/// Ignored pixels are predicted as background.
#[derive(Debug, Clone)]
pub struct GroundTruthInjector {
    pub head: Head,
    pub num_classes: usize,
}

impl<T: Scalar> HeadPredictor<T> for GroundTruthInjector {
    fn head(&self) -> Head {
        self.head
    }

    fn predict(&self, sample: &Sample<T>) -> Result<SegOutput<T>> {
        let mask = sample.mask(self.head);
        let (h, w) = mask.size();
        let k = self.num_classes;
        let mut probs = Tensor::zeros(&[1, k, h, w]);
        for (i, &v) in mask.data().iter().enumerate() {
            let c = if v == IGNORE { BACKGROUND } else { v } as usize;
            if c >= k {
                return Err(Error::LabelOutOfRange {
                    label: v,
                    num_classes: k,
                });
            }
            probs.data_mut()[c * h * w + i] = T::one();
        }
        derive_output(probs, self.head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Anatomy,
    Tool,
    Fused,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anatomy" => Ok(EvalMode::Anatomy),
            "tool" => Ok(EvalMode::Tool),
            "fused" => Ok(EvalMode::Fused),
            _ => Err(Error::Config(format!("unknown evaluation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub rule: FusionRule,
    /// Radius of the morphological clean-up after fusion; `None` skips it.
    pub refine_radius: Option<usize>,
    pub include_background: bool,
}

impl EvalOptions {
    pub fn new(mode: EvalMode) -> Self {
        Self {
            mode,
            rule: FusionRule::Priority,
            refine_radius: None,
            include_background: true,
        }
    }
}

/// Fused global label map for one frame.
pub fn fuse_sample<T: Scalar>(
    anat: &dyn HeadPredictor<T>,
    tool: &dyn HeadPredictor<T>,
    sample: &Sample<T>,
    registry: &LabelRegistry,
    rule: FusionRule,
    refine_radius: Option<usize>,
) -> Result<LabelMask> {
    let a = anat.predict(sample)?;
    let t = tool.predict(sample)?;
    let fused = fuse_with_rule(&t, &a, registry, rule)?.remove(0);
    match refine_radius {
        Some(r) => morph_refine(&fused, r),
        None => Ok(fused),
    }
}

/// Confusion matrix of one head over `samples`, on that head's label space.
pub fn head_confusion<T: Scalar>(
    model: &dyn HeadPredictor<T>,
    samples: &[Sample<T>],
    registry: &LabelRegistry,
) -> Result<ConfusionMatrix> {
    let head = model.head();
    let mut cm = ConfusionMatrix::new(registry.head_classes(head));
    for s in samples {
        let out = model.predict(s)?;
        cm.accumulate(&out.labels[0], s.mask(head), IGNORE)?;
    }
    Ok(cm)
}

/// Confusion matrix of the fused predictions on the global label space.
pub fn fused_confusion<T: Scalar>(
    anat: &dyn HeadPredictor<T>,
    tool: &dyn HeadPredictor<T>,
    samples: &[Sample<T>],
    registry: &LabelRegistry,
    rule: FusionRule,
    refine_radius: Option<usize>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(registry.num_global_classes());
    for s in samples {
        let pred = fuse_sample(anat, tool, s, registry, rule, refine_radius)?;
        let gt = registry.combine_ground_truth(&s.anat_mask, &s.tool_mask)?;
        cm.accumulate(&pred, &gt, IGNORE)?;
    }
    Ok(cm)
}

/// Confusion matrix of one head's predictions mapped to global ids and
/// scored against the combined ground truth.
pub fn head_on_global_confusion<T: Scalar>(
    model: &dyn HeadPredictor<T>,
    samples: &[Sample<T>],
    registry: &LabelRegistry,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(registry.num_global_classes());
    for s in samples {
        let out = model.predict(s)?;
        let pred = registry.mask_to_global(model.head(), &out.labels[0])?;
        let gt = registry.combine_ground_truth(&s.anat_mask, &s.tool_mask)?;
        cm.accumulate(&pred, &gt, IGNORE)?;
    }
    Ok(cm)
}

fn require<'a, T>(p: Option<&'a dyn HeadPredictor<T>>, head: Head) -> Result<&'a dyn HeadPredictor<T>> {
    let p = p.ok_or_else(|| Error::Config(format!("{head} predictor required")))?;
    if p.head() != head {
        return Err(Error::Config(format!("expected a {head} predictor, got {}", p.head())));
    }
    Ok(p)
}

/// Evaluates in `opts.mode`. Single modes need only the matching predictor.
pub fn evaluate<T: Scalar>(
    anat: Option<&dyn HeadPredictor<T>>,
    tool: Option<&dyn HeadPredictor<T>>,
    samples: &[Sample<T>],
    registry: &LabelRegistry,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let config = serde_json::to_value(opts)?;
    match opts.mode {
        EvalMode::Fused => {
            let cm = fused_confusion(
                require(anat, Head::Anatomy)?,
                require(tool, Head::Tool)?,
                samples,
                registry,
                opts.rule,
                opts.refine_radius,
            )?;
            MetricsReport::from_matrix(
                &cm,
                |k| registry.name(k as u8).unwrap_or("unused").to_string(),
                opts.include_background,
                config,
            )
        }
        EvalMode::Anatomy | EvalMode::Tool => {
            let head = if opts.mode == EvalMode::Anatomy {
                Head::Anatomy
            } else {
                Head::Tool
            };
            let cm = head_confusion(require(if head == Head::Anatomy { anat } else { tool }, head)?, samples, registry)?;
            MetricsReport::from_matrix(
                &cm,
                |k| {
                    registry
                        .to_global(head, k as u8)
                        .ok()
                        .and_then(|g| registry.name(g))
                        .unwrap_or("unused")
                        .to_string()
                },
                opts.include_background,
                config,
            )
        }
    }
}
