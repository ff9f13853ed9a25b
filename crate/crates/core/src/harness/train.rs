//! The training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{augment, load_dataset, read_registry, Sample, Split};
use crate::error::{Error, Result};
use crate::fusion::LabelRegistry;
use crate::loss::combined_loss_node;
use crate::mask::LabelMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::evaluate::{batch_images, head_confusion};
use super::model::{ModelSpec, SegModel};
use super::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
    pub lr: f64,
    pub param_hash: String,
}

/// Model, optimizer and step counter for one training run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: SegModel<T>,
    pub config: TrainConfig,
    opt: Adam<T>,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &TrainConfig, registry: &LabelRegistry) -> Result<Self> {
        config.validate()?;
        let mut spec = ModelSpec::new(
            config.encoder()?,
            config.instance,
            config.head_kind(),
            config.embed_dim,
            registry,
        );
        spec.zero_skip = config.zero_skip;
        Self::from_model(config, SegModel::new(spec, config.seed)?)
    }

    pub fn from_model(config: &TrainConfig, model: SegModel<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            opt: Adam::new(&model.params, config.weight_decay),
            model,
            config: config.clone(),
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step on a batch. Returns the loss before the update.
    ///
    /// A non-finite loss or gradient aborts before any parameter changes.
    pub fn train_step(&mut self, images: &Tensor<T>, targets: &[LabelMask]) -> Result<f64> {
        let mut g = Graph::new();
        let (logits, bound) = self.model.forward(&mut g, images, true)?;
        let (loss, _) = combined_loss_node(&mut g, logits, targets, &self.config.loss)?;
        let value = g.value(loss).data()[0].to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                step: self.step,
            });
        }
        let grads = g.backward(loss);
        let mut flat = Vec::with_capacity(self.model.params.len());
        for ((name, var), (pname, p)) in bound.iter().zip(self.model.params.iter()) {
            debug_assert_eq!(name, pname);
            let gv = grads
                .get_slice(*var)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); p.numel()]);
            if gv.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {name}"),
                    step: self.step,
                });
            }
            flat.push(gv);
        }
        let lr = self.config.lr_at(self.step);
        self.opt.step(&mut self.model.params, &flat, lr)?;
        self.step += 1;
        Ok(value)
    }
}

/// Random state for epoch `epoch`: `(shuffle, augmentation)`.
fn epoch_rngs(config: &TrainConfig, epoch: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle.set_stream(epoch as u64);
    let mut aug = ChaCha8Rng::seed_from_u64(config.seed ^ config.augmentation.seed.rotate_left(32));
    aug.set_stream((1 << 40) | epoch as u64);
    (shuffle, aug)
}

/// Checks the data before the first step.
fn check_samples<T: Scalar>(samples: &[Sample<T>], config: &TrainConfig, registry: &LabelRegistry) -> Result<()> {
    let k = registry.head_classes(config.instance);
    for s in samples {
        s.mask(config.instance).check_range(k, config.loss.ignore_index)?;
        let (c, h, w) = s.image.dims3()?;
        if c != 3 || s.mask(config.instance).size() != (h, w) {
            return Err(Error::Shape(format!("frame {} has inconsistent image and mask sizes", s.id)));
        }
        crate::encoder::check_input_size(h, w)?;
    }
    Ok(())
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Model at the epoch with the best validation mIoU (the last epoch if
    /// there is no validation data).
    pub best: SegModel<T>,
    pub best_epoch: usize,
    pub last: SegModel<T>,
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

/// Trains on in-memory samples.
pub fn train_on<T: Scalar>(
    config: &TrainConfig,
    registry: &LabelRegistry,
    train: &[Sample<T>],
    val: &[Sample<T>],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    check_samples(train, config, registry)?;
    check_samples(val, config, registry)?;

    let mut trainer = Trainer::new(config, registry)?;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, SegModel<T>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        let (mut shuffle, mut aug_rng) = epoch_rngs(config, epoch);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| augment(&train[i], &config.augmentation, &mut aug_rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample<T>> = batch.iter().collect();
            let images = batch_images(&refs)?;
            let targets: Vec<LabelMask> = batch.iter().map(|s| s.mask(config.instance).clone()).collect();
            total += trainer.train_step(&images, &targets)?;
            batches += 1;
        }
        let val_miou = if val.is_empty() {
            None
        } else {
            let cm = head_confusion(&trainer.model, val, registry)?;
            Some(cm.miou(config.include_background)?)
        };
        let entry = EpochLog {
            epoch,
            step: trainer.step_count(),
            train_loss: total / batches as f64,
            val_miou,
            lr: config.lr_at(trainer.step_count().saturating_sub(1)),
            param_hash: trainer.model.params.hash_hex(),
        };
        on_epoch(&entry);
        let score = val_miou.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b || val_miou.is_none()) {
            best = Some((score, epoch, trainer.model.clone()));
        }
        log.push(entry);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: trainer.model,
        log,
        steps: trainer.step,
    })
}

/// Trains from `config.dataset_root` and writes `best/`, `last/` and
/// `log.json` under `config.output_dir`.
pub fn train(config: &TrainConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome<f32>> {
    config.validate()?;
    let root = &config.dataset_root;
    let registry = read_registry(root)?;
    let heads = [config.instance];
    let train_set = load_dataset::<f32>(root, Split::Train, &registry, &heads)?;
    let val_set = load_dataset::<f32>(root, Split::Val, &registry, &heads)?;
    let outcome = train_on(config, &registry, &train_set, &val_set, on_epoch)?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = serde_json::to_value(config)?;
    let best_step = outcome.log[outcome.best_epoch - 1].step;
    Checkpoint::new(outcome.best.clone(), registry.clone(), echo.clone(), best_step, outcome.best_epoch)
        .save(&out.join("best"))?;
    Checkpoint::new(outcome.last.clone(), registry, echo, outcome.steps, config.epochs).save(&out.join("last"))?;
    write_json(&out.join("log.json"), &outcome.log)?;
    Ok(outcome)
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
