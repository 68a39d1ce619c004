//! Segmentation-head training: class weighting, weighted cross-entropy, and
//! the optimizer loop.
//!
//! The backbone never appears here — training consumes pre-extracted feature
//! maps (stored as `f32` to halve resident memory; math runs in `f64`), so
//! backbone immutability holds by construction and is additionally verified
//! end-to-end by hashing its weights around a training run.
//!
//! Class weights follow the imbalance-correcting rule `w_c = 1 − N_c/N` over
//! the training split's non-ignore pixel counts; the don't-care class weighs
//! exactly zero by exclusion. The loss is the mean over non-ignore pixels of
//! `w_target · (−log softmax(logits)_target)`; a batch averages the per-image
//! losses.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{predict_mask, ClassScores, SegmentationHead, SegmentationMask};
use crate::metrics::{report, ConfusionMatrix, MetricsReport};
use crate::nn::Adam;
use crate::tensor::stream_rng;

/// Per-class loss weights derived from training-split pixel counts.
///
/// `weights[c] = 1 − pixel_counts[c] / total`; the ignore class carries an
/// implicit weight of zero because ignored pixels never enter the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub pixel_counts: Vec<u64>,
    pub total: u64,
}

impl ClassWeights {
    /// All-ones weights (e.g. for datasets without a meaningful imbalance
    /// correction); turns the loss into plain cross-entropy.
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; num_classes],
            pixel_counts: vec![0; num_classes],
            total: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }
}

/// Counts non-ignore pixels per class over the training masks and applies
/// `w_c = 1 − N_c/N`.
///
/// A class that never occurs gets weight 1 (the formula's limit); a dataset
/// where only one class occurs yields weight 0 for it, which is logged as a
/// degenerate-weights warning. No non-ignore pixels at all is an error.
pub fn compute_class_weights(
    masks: &[SegmentationMask],
    num_classes: usize,
) -> Result<ClassWeights> {
    if masks.is_empty() {
        return Err(Error::Parameter("class weights need at least one mask".into()));
    }
    let mut counts = vec![0u64; num_classes];
    for mask in masks {
        if mask.num_classes != num_classes {
            return Err(Error::Parameter(format!(
                "mask has {} classes, expected {num_classes}",
                mask.num_classes
            )));
        }
        for &v in mask.classes.iter() {
            if v != mask.ignore_index {
                counts[v as usize] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Degenerate(
            "every training pixel is don't-care; class weights are undefined".into(),
        ));
    }
    if counts.iter().filter(|&&c| c > 0).count() == 1 {
        log::warn!("only one class present in the training masks; its loss weight is 0");
    }
    let weights = counts
        .iter()
        .map(|&c| 1.0 - c as f64 / total as f64)
        .collect();
    Ok(ClassWeights { weights, pixel_counts: counts, total })
}

/// Weighted cross-entropy: mean over non-ignore pixels of
/// `w_target · (−log softmax(logits)_target)`.
pub fn weighted_ce_loss(
    scores: &ClassScores,
    target: &SegmentationMask,
    weights: &ClassWeights,
) -> Result<f64> {
    ce_core(scores, target, weights, false).map(|(loss, _)| loss)
}

/// Loss plus its gradient w.r.t. the logits (already normalized by the
/// non-ignore pixel count, so it back-propagates the mean).
pub fn weighted_ce_loss_with_grad(
    scores: &ClassScores,
    target: &SegmentationMask,
    weights: &ClassWeights,
) -> Result<(f64, Array3<f64>)> {
    ce_core(scores, target, weights, true).map(|(loss, g)| (loss, g.unwrap()))
}

fn ce_core(
    scores: &ClassScores,
    target: &SegmentationMask,
    weights: &ClassWeights,
    want_grad: bool,
) -> Result<(f64, Option<Array3<f64>>)> {
    let (h, w, k) = scores.logits.dim();
    if target.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "scores {h}×{w} and target {:?} differ in shape",
            target.dims()
        )));
    }
    if target.num_classes != k || weights.num_classes() != k {
        return Err(Error::Parameter(format!(
            "class counts disagree: scores {k}, target {}, weights {}",
            target.num_classes,
            weights.num_classes()
        )));
    }
    let valid = target.valid_pixels();
    if valid == 0 {
        return Err(Error::Degenerate(
            "loss is undefined: every pixel is don't-care".into(),
        ));
    }
    let inv_n = 1.0 / valid as f64;
    let mut grad = want_grad.then(|| Array3::<f64>::zeros((h, w, k)));
    let mut loss = 0.0;
    let mut probs = vec![0.0f64; k];
    for y in 0..h {
        for x in 0..w {
            let t = target.classes[(y, x)];
            if t == target.ignore_index {
                continue;
            }
            let t = t as usize;
            let row = scores.logits.slice(ndarray::s![y, x, ..]);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..k {
                let e = (row[c] - m).exp();
                probs[c] = e;
                denom += e;
            }
            let wt = weights.weights[t];
            // −log softmax_t = log Σ exp(l − m) − (l_t − m)
            loss += wt * (denom.ln() - (row[t] - m));
            if let Some(g) = grad.as_mut() {
                let scale = wt * inv_n;
                for c in 0..k {
                    g[(y, x, c)] = scale * (probs[c] / denom - if c == t { 1.0 } else { 0.0 });
                }
            }
        }
    }
    Ok((loss * inv_n, grad))
}

/// Hyperparameters for a head-training run.
///
/// `timestep` and `block_selection` configure the upstream feature
/// extraction; they travel with the training config so a run is described by
/// one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub timestep: usize,
    pub block_selection: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            steps: 200,
            batch_size: 2,
            seed: 0,
            timestep: 50,
            block_selection: vec![
                "middle".into(),
                "up_1".into(),
                "up_2".into(),
                "up_3".into(),
                "up_4".into(),
            ],
        }
    }
}

/// One line of the training log: always step/loss/lr, plus validation
/// metrics when the step closed an epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

/// Closing summary: the last epoch is the default model-selection choice;
/// the best validation epoch is reported alongside for comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_loss: f64,
    pub last_epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_val_miou: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub summary: TrainSummary,
}

impl TrainingLog {
    /// Line-delimited JSON: one object per step record, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.steps {
            out.push_str(&serde_json::to_string(rec).expect("step record serializes"));
            out.push('\n');
        }
        out.push_str(
            &serde_json::to_string(&serde_json::json!({ "summary": self.summary }))
                .expect("summary serializes"),
        );
        out.push('\n');
        out
    }

    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn final_validation(&self) -> Option<&MetricsReport> {
        self.steps.iter().rev().find_map(|r| r.metrics.as_ref())
    }
}

/// Training corpus: per-image feature maps (f32 at rest) and their masks.
pub struct TrainSet<'a> {
    pub features: &'a [Array3<f32>],
    pub masks: &'a [SegmentationMask],
}

impl<'a> TrainSet<'a> {
    pub fn new(features: &'a [Array3<f32>], masks: &'a [SegmentationMask]) -> Result<Self> {
        if features.len() != masks.len() {
            return Err(Error::Parameter(format!(
                "{} feature maps but {} masks",
                features.len(),
                masks.len()
            )));
        }
        Ok(TrainSet { features, masks })
    }

    fn len(&self) -> usize {
        self.features.len()
    }
}

fn to_f64(x: &Array3<f32>) -> Array3<f64> {
    x.mapv(|v| v as f64)
}

/// Optimizes the head on `train` with Adam, logging per-step loss and, when
/// `val` is non-empty, per-epoch validation metrics (inference mode).
///
/// The image visit order is one seeded permutation cycled for the whole run,
/// so identical seeds give bit-identical logs and parameters. A non-finite
/// loss aborts with diagnostics rather than training onward from garbage.
pub fn train_head(
    head: &mut SegmentationHead,
    train: &TrainSet<'_>,
    val: &TrainSet<'_>,
    weights: &ClassWeights,
    config: &TrainConfig,
) -> Result<TrainingLog> {
    if train.len() == 0 {
        return Err(Error::Parameter("training set is empty".into()));
    }
    if config.steps == 0 || config.batch_size == 0 {
        return Err(Error::Parameter("steps and batch size must be positive".into()));
    }
    if val.len() == 0 {
        log::warn!("validation split is empty; per-epoch metrics will be skipped");
    }
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(config.seed, "batch-order"));

    let mut opt = Adam::new(config.learning_rate);
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let mut log_steps = Vec::with_capacity(config.steps);
    let mut best: Option<(usize, f64)> = None;
    let mut last_epoch = 0;
    let mut final_loss = f64::NAN;

    for step in 0..config.steps {
        for p in head.params_mut() {
            p.zero_grad();
        }
        let mut step_loss = 0.0;
        for j in 0..config.batch_size {
            let idx = order[(config.batch_size * step + j) % n];
            let x = to_f64(&train.features[idx]);
            let (scores, cache) = head.forward_train(&x)?;
            let (loss, mut dlogits) =
                weighted_ce_loss_with_grad(&scores, &train.masks[idx], weights)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at step {step} on image {idx} (lr {})",
                    config.learning_rate
                )));
            }
            let inv_bs = 1.0 / config.batch_size as f64;
            dlogits.mapv_inplace(|v| v * inv_bs);
            head.backward(&x, &cache, &dlogits);
            step_loss += loss * inv_bs;
        }
        opt.step(&mut head.params_mut());
        final_loss = step_loss;

        let mut record = StepRecord {
            step,
            loss: step_loss,
            lr: config.learning_rate,
            epoch: None,
            metrics: None,
        };
        if (step + 1) % steps_per_epoch == 0 {
            let epoch = (step + 1) / steps_per_epoch;
            last_epoch = epoch;
            record.epoch = Some(epoch);
            if val.len() > 0 {
                let metrics = evaluate_on(head, val)?;
                if best.is_none() || metrics.miou > best.unwrap().1 {
                    best = Some((epoch, metrics.miou));
                }
                record.metrics = Some(metrics);
            }
        }
        log_steps.push(record);
    }

    Ok(TrainingLog {
        steps: log_steps,
        summary: TrainSummary {
            final_loss,
            last_epoch,
            best_epoch: best.map(|(e, _)| e),
            best_val_miou: best.map(|(_, m)| m),
        },
    })
}

/// Inference-mode evaluation of the head over a feature/mask set.
pub fn evaluate_on(head: &mut SegmentationHead, set: &TrainSet<'_>) -> Result<MetricsReport> {
    let k = head.config.num_classes;
    let mut cm = ConfusionMatrix::new(k, k as u32)?;
    for (features, mask) in set.features.iter().zip(set.masks) {
        let scores = head.forward_eval(&to_f64(features))?;
        cm.accumulate(&predict_mask(&scores), mask)?;
    }
    report(&cm)
}
