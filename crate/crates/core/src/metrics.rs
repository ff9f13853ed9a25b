//! Confusion-matrix scoring: per-class IoU and Dice and their means.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMask;

/// Square count matrix; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Shape(format!(
                "{} counts for {num_classes} classes",
                counts.len()
            )));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k * self.num_classes..(k + 1) * self.num_classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|g| self.get(g, k)).sum()
    }

    /// Tallies every pixel whose ground truth is not `ignore_index`.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask, ignore_index: u8) -> Result<()> {
        if pred.size() != gt.size() {
            return Err(Error::Shape(format!(
                "prediction {:?} and ground truth {:?} differ in size",
                pred.size(),
                gt.size()
            )));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == ignore_index {
                continue;
            }
            for label in [g, p] {
                if label as usize >= k {
                    return Err(Error::LabelOutOfRange {
                        label,
                        num_classes: k,
                    });
                }
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge_from(&mut self, other: &Self) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.merge_from(other)?;
        Ok(out)
    }

    /// Exact IoU of class `k`; `None` when the class is absent from both.
    pub fn iou_exact(&self, k: usize) -> Option<Ratio<u64>> {
        let tp = self.get(k, k);
        let denom = self.row_sum(k) + self.col_sum(k) - tp;
        (denom > 0).then(|| Ratio::new(tp, denom))
    }

    /// Exact Dice of class `k`; `None` when the class is absent from both.
    pub fn dice_exact(&self, k: usize) -> Option<Ratio<u64>> {
        let denom = self.row_sum(k) + self.col_sum(k);
        (denom > 0).then(|| Ratio::new(2 * self.get(k, k), denom))
    }

    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|k| self.iou_exact(k).map(ratio_f64))
            .collect()
    }

    pub fn dice_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|k| self.dice_exact(k).map(ratio_f64))
            .collect()
    }

    /// Mean IoU over defined classes.
    pub fn miou(&self, include_background: bool) -> Result<f64> {
        mean_defined(&self.iou_per_class(), include_background)
    }

    /// Mean Dice over defined classes.
    pub fn mean_dice(&self, include_background: bool) -> Result<f64> {
        mean_defined(&self.dice_per_class(), include_background)
    }
}

pub fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn mean_defined(values: &[Option<f64>], include_background: bool) -> Result<f64> {
    let skip = usize::from(!include_background);
    let defined: Vec<f64> = values.iter().skip(skip).flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub id: usize,
    pub name: String,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub total: u64,
    pub ground_truth: Vec<u64>,
    pub predicted: Vec<u64>,
}

/// Scores for one evaluation, ready for JSON or CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassScore>,
    pub miou: f64,
    pub mean_dice: f64,
    pub include_background: bool,
    pub pixel_counts: PixelCounts,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn from_matrix(
        cm: &ConfusionMatrix,
        name_of: impl Fn(usize) -> String,
        include_background: bool,
        config: serde_json::Value,
    ) -> Result<Self> {
        let iou = cm.iou_per_class();
        let dice = cm.dice_per_class();
        let per_class = (0..cm.num_classes())
            .map(|k| ClassScore {
                id: k,
                name: name_of(k),
                iou: iou[k],
                dice: dice[k],
                defined: iou[k].is_some(),
            })
            .collect();
        let k = cm.num_classes();
        Ok(Self {
            per_class,
            miou: cm.miou(include_background)?,
            mean_dice: cm.mean_dice(include_background)?,
            include_background,
            pixel_counts: PixelCounts {
                total: cm.total(),
                ground_truth: (0..k).map(|c| cm.row_sum(c)).collect(),
                predicted: (0..k).map(|c| cm.col_sum(c)).collect(),
            },
            config,
        })
    }

    /// One row per class plus a closing mean row; undefined scores are blank.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        let mut s = String::from("id,name,iou,dice\n");
        for c in &self.per_class {
            let _ = writeln!(s, "{},{},{},{}", c.id, c.name, cell(c.iou), cell(c.dice));
        }
        let _ = writeln!(s, ",mean,{:.4},{:.4}", self.miou, self.mean_dice);
        s
    }
}
