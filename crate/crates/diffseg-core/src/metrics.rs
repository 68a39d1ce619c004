//! Segmentation quality metrics with don't-care exclusion.
//!
//! Everything derives from a single [`ConfusionMatrix`] accumulated over
//! (prediction, ground-truth) mask pairs: accuracy, per-class IoU/Dice/
//! precision/recall, mean IoU, mean Dice, and F1 under three averaging modes.
//!
//! Presence rules, since absent classes would otherwise poison the means:
//! mean IoU averages over classes **present in the ground truth**; mean Dice
//! and macro-F1 average over classes present in the ground truth or the
//! prediction. Classes absent from both sides are excluded everywhere and
//! reported as `null` in the per-class vector.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::SegmentationMask;

/// Pixel tallies: `counts[(t, p)]` counts pixels with ground truth `t`
/// predicted as `p`. Ground-truth don't-care pixels are tracked separately in
/// `ignored_pixels` and never enter `counts`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    num_classes: usize,
    ignore_index: u32,
    ignored_pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_index: u32) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Parameter(format!(
                "confusion matrix needs at least 2 classes, got {num_classes}"
            )));
        }
        if (ignore_index as usize) < num_classes {
            return Err(Error::Parameter(format!(
                "ignore index {ignore_index} collides with class ids 0..{num_classes}"
            )));
        }
        Ok(ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
            num_classes,
            ignore_index,
            ignored_pixels: 0,
        })
    }

    /// Matrix built directly from known counts (rows = truth); test and
    /// report-table convenience.
    pub fn from_counts(counts: Array2<u64>, ignore_index: u32) -> Result<Self> {
        let (r, c) = counts.dim();
        if r != c {
            return Err(Error::Shape(format!("confusion matrix must be square, got {r}×{c}")));
        }
        if (ignore_index as usize) < r {
            return Err(Error::Parameter(format!(
                "ignore index {ignore_index} collides with class ids 0..{r}"
            )));
        }
        Ok(ConfusionMatrix { counts, num_classes: r, ignore_index, ignored_pixels: 0 })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn ignored_pixels(&self) -> u64 {
        self.ignored_pixels
    }

    /// Total counted (non-ignore) pixels.
    pub fn counted_pixels(&self) -> u64 {
        self.counts.sum()
    }

    /// Tallies one prediction/ground-truth pair.
    ///
    /// Ground-truth don't-care pixels are only counted in `ignored_pixels`.
    /// Predictions must be real class ids — the head never emits the ignore
    /// id, and this guards that contract.
    pub fn accumulate(&mut self, pred: &SegmentationMask, truth: &SegmentationMask) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(Error::Shape(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.dims(),
                truth.dims()
            )));
        }
        if pred.num_classes != self.num_classes || truth.num_classes != self.num_classes {
            return Err(Error::Parameter(format!(
                "mask class counts ({}, {}) do not match confusion matrix ({})",
                pred.num_classes, truth.num_classes, self.num_classes
            )));
        }
        for (&p, &t) in pred.classes.iter().zip(truth.classes.iter()) {
            if t == truth.ignore_index {
                self.ignored_pixels += 1;
                continue;
            }
            if (p as usize) >= self.num_classes {
                return Err(Error::Parameter(format!(
                    "prediction contains {p}, outside class range 0..{}",
                    self.num_classes
                )));
            }
            self.counts[(t as usize, p as usize)] += 1;
        }
        Ok(())
    }

    /// Adds another matrix's tallies; merging per-image matrices in any order
    /// or grouping gives the same result as one sequential accumulation.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Parameter(format!(
                "cannot merge confusion matrices of {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        self.counts += &other.counts;
        self.ignored_pixels += other.ignored_pixels;
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts.row(c).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        self.counts.column(c).sum()
    }

    /// Class appears in the ground truth.
    pub fn present_in_truth(&self, c: usize) -> bool {
        self.row_sum(c) > 0
    }

    /// Class appears in the ground truth or the prediction.
    pub fn present(&self, c: usize) -> bool {
        self.row_sum(c) + self.col_sum(c) > 0
    }
}

/// Averaging mode for the reported F1 score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    /// Unweighted mean of per-class F1 over present classes (default).
    Macro,
    /// Global pooled F1; for single-label pixels this equals accuracy.
    Micro,
    /// Mean of per-class F1 weighted by ground-truth support.
    Weighted,
}

impl std::str::FromStr for F1Average {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(F1Average::Macro),
            "micro" => Ok(F1Average::Micro),
            "weighted" => Ok(F1Average::Weighted),
            other => Err(Error::Config(format!(
                "unknown F1 averaging '{other}' (expected macro, micro or weighted)"
            ))),
        }
    }
}

/// Knobs for [`report_with`].
#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub f1_average: F1Average,
    /// Class ids excluded from the mean-Dice aggregate (e.g. a catch-all
    /// "other" class); per-class values are still reported.
    pub dice_excluded_classes: Vec<usize>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { f1_average: F1Average::Macro, dice_excluded_classes: Vec::new() }
    }
}

/// Per-class overlap scores; only produced for present classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Aggregate metrics over an accumulated confusion matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub mean_dice: f64,
    pub miou: f64,
    pub f1: f64,
    /// Indexed by class id; `None` for classes absent from both truth and
    /// prediction.
    pub per_class: Vec<Option<ClassMetrics>>,
}

/// [`report_with`] under default options (macro F1, no Dice exclusions).
pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    report_with(cm, &ReportOptions::default())
}

/// Computes the aggregate report: accuracy = trace/total, IoU_c =
/// TP/(TP+FP+FN), Dice_c = 2TP/(2TP+FP+FN), and the presence-filtered means
/// described in the module docs.
pub fn report_with(cm: &ConfusionMatrix, opts: &ReportOptions) -> Result<MetricsReport> {
    let total = cm.counted_pixels();
    if total == 0 {
        return Err(Error::Degenerate(
            "metrics are undefined: no non-ignore pixels were accumulated".into(),
        ));
    }
    let k = cm.num_classes();
    let trace: u64 = (0..k).map(|c| cm.counts[(c, c)]).sum();
    let accuracy = trace as f64 / total as f64;

    let mut per_class: Vec<Option<ClassMetrics>> = Vec::with_capacity(k);
    for c in 0..k {
        if !cm.present(c) {
            per_class.push(None);
            continue;
        }
        let tp = cm.counts[(c, c)] as f64;
        let fp = cm.col_sum(c) as f64 - tp;
        let fn_ = cm.row_sum(c) as f64 - tp;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        per_class.push(Some(ClassMetrics {
            iou: tp / (tp + fp + fn_),
            dice: 2.0 * tp / (2.0 * tp + fp + fn_),
            precision,
            recall,
        }));
    }

    let truth_classes: Vec<usize> = (0..k).filter(|&c| cm.present_in_truth(c)).collect();
    let miou = truth_classes
        .iter()
        .map(|&c| per_class[c].as_ref().unwrap().iou)
        .sum::<f64>()
        / truth_classes.len() as f64;

    let dice_classes: Vec<usize> = (0..k)
        .filter(|&c| cm.present(c) && !opts.dice_excluded_classes.contains(&c))
        .collect();
    let mean_dice = if dice_classes.is_empty() {
        0.0
    } else {
        dice_classes
            .iter()
            .map(|&c| per_class[c].as_ref().unwrap().dice)
            .sum::<f64>()
            / dice_classes.len() as f64
    };

    let f1 = match opts.f1_average {
        F1Average::Macro => {
            let present: Vec<usize> = (0..k).filter(|&c| cm.present(c)).collect();
            present
                .iter()
                .map(|&c| {
                    let m = per_class[c].as_ref().unwrap();
                    f1_of(m.precision, m.recall)
                })
                .sum::<f64>()
                / present.len() as f64
        }
        // Single-label per pixel: pooled TP = trace, pooled FP = pooled FN.
        F1Average::Micro => accuracy,
        F1Average::Weighted => {
            let support: u64 = truth_classes.iter().map(|&c| cm.row_sum(c)).sum();
            truth_classes
                .iter()
                .map(|&c| {
                    let m = per_class[c].as_ref().unwrap();
                    cm.row_sum(c) as f64 / support as f64 * f1_of(m.precision, m.recall)
                })
                .sum()
        }
    };

    Ok(MetricsReport { accuracy, mean_dice, miou, f1, per_class })
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}
