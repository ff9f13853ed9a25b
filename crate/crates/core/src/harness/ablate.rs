//! Loss-function comparison: Tversky only, cross-entropy only, and the mix.

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, read_registry, Sample, Split};
use crate::error::Result;
use crate::fusion::LabelRegistry;
use crate::scalar::Scalar;

use super::config::TrainConfig;
use super::evaluate::head_confusion;
use super::train::train_on;

/// `(row label, lambda)` for the three compared objectives.
pub fn ablation_arms(combined_lambda: f64) -> [(&'static str, f64); 3] {
    [
        ("tversky", 1.0),
        ("cross_entropy", 0.0),
        ("combined", combined_lambda),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub loss: String,
    pub lambda: f64,
    pub miou: f64,
    pub dice: f64,
    pub miou_per_seed: Vec<f64>,
    pub dice_per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, loss: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.loss == loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("loss,lambda,miou,dice\n");
        for r in &self.rows {
            s += &format!("{},{},{:.4},{:.4}\n", r.loss, r.lambda, r.miou, r.dice);
        }
        s
    }
}

/// Trains one run per arm and seed, scoring the best-validation model.
pub fn ablate_losses_on<T: Scalar>(
    config: &TrainConfig,
    seeds: &[u64],
    registry: &LabelRegistry,
    train: &[Sample<T>],
    val: &[Sample<T>],
    mut on_run: impl FnMut(&str, u64, f64),
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (label, lambda) in ablation_arms(config.loss.lambda_combined) {
        let mut mious = Vec::new();
        let mut dices = Vec::new();
        for &seed in seeds {
            let mut cfg = config.clone();
            cfg.seed = seed;
            cfg.loss = cfg.loss.with_lambda(lambda);
            let outcome = train_on(&cfg, registry, train, val, |_| {})?;
            let cm = head_confusion(&outcome.best, val, registry)?;
            let miou = cm.miou(cfg.include_background)?;
            on_run(label, seed, miou);
            mious.push(miou);
            dices.push(cm.mean_dice(cfg.include_background)?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        rows.push(AblationRow {
            loss: label.to_string(),
            lambda,
            miou: mean(&mious),
            dice: mean(&dices),
            miou_per_seed: mious,
            dice_per_seed: dices,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Loads `config.dataset_root` and runs [`ablate_losses_on`] in f32.
pub fn ablate_losses(config: &TrainConfig, seeds: &[u64], on_run: impl FnMut(&str, u64, f64)) -> Result<AblationReport> {
    config.validate()?;
    let root = &config.dataset_root;
    let registry = read_registry(root)?;
    let heads = [config.instance];
    let train = load_dataset::<f32>(root, Split::Train, &registry, &heads)?;
    let val = load_dataset::<f32>(root, Split::Val, &registry, &heads)?;
    ablate_losses_on(config, seeds, &registry, &train, &val, on_run)
}
