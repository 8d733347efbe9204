//! Confusion matrices, per-class IoU / mIoU and the uncertainty-aware
//! cross-entropy kernel.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SegMask;
use crate::{ClassId, BACKGROUND, UNCERTAIN};

/// `(K+1) × (K+1)` pixel counts, rows ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    /// Empty matrix over labels `0..=max_class`.
    pub fn new(max_class: ClassId) -> Self {
        let n = usize::from(max_class) + 1;
        Self {
            num_classes: n,
            counts: vec![0; n * n],
            ignored: 0,
        }
    }

    /// Number of labels including background (`K + 1`).
    pub fn num_labels(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: ClassId, pred: ClassId) -> u64 {
        self.counts[usize::from(gt) * self.num_classes + usize::from(pred)]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total_counted(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-label and {}-label confusion matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }
}

/// Counts `(gt, pred)` pairs, skipping pixels where `gt == ignore`.
/// Predictions may not contain the uncertain value.
pub fn confusion(pred: &SegMask, gt: &SegMask, max_class: ClassId, ignore: u8) -> Result<ConfusionMatrix> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut cm = ConfusionMatrix::new(max_class);
    let n = cm.num_classes;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p == UNCERTAIN {
            return Err(Error::Contract("prediction contains uncertain pixels".into()));
        }
        if g == ignore {
            cm.ignored += 1;
            continue;
        }
        if p > max_class || g > max_class {
            return Err(Error::Contract(format!(
                "label {} exceeds the largest class {max_class}",
                p.max(g)
            )));
        }
        cm.counts[usize::from(g) * n + usize::from(p)] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// IoU for every class with a non-empty union.
    pub per_class: BTreeMap<ClassId, f64>,
    pub mean: f64,
}

/// Per-class `TP / (TP + FP + FN)` and their mean over classes with a
/// non-empty union. Background takes part unless `include_background` is off.
pub fn miou(cm: &ConfusionMatrix, include_background: bool) -> Result<MiouReport> {
    let n = cm.num_classes;
    let mut per_class = BTreeMap::new();
    for c in 0..n {
        if c == usize::from(BACKGROUND) && !include_background {
            continue;
        }
        let tp = cm.counts[c * n + c];
        let gt_total: u64 = cm.counts[c * n..(c + 1) * n].iter().sum();
        let pred_total: u64 = (0..n).map(|g| cm.counts[g * n + c]).sum();
        let union = gt_total + pred_total - tp;
        if union > 0 {
            per_class.insert(c as ClassId, tp as f64 / union as f64);
        }
    }
    if per_class.is_empty() {
        return Err(Error::UndefinedMean);
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MiouReport { per_class, mean })
}

/// Per-pixel class scores, `height × width × channels`, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub height: u32,
    pub width: u32,
    pub channels: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    /// Sum divided by the number of counted pixels.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Same layout as the logits.
    pub gradient: Vec<f64>,
    pub counted_pixels: usize,
}

/// Softmax cross-entropy summed over pixels whose target is not uncertain,
/// with its gradient with respect to the logits.
pub fn uncertainty_ce(logits: &Logits, target: &SegMask, reduction: Reduction) -> Result<LossReport> {
    let pixels = logits.height as usize * logits.width as usize;
    let c = logits.channels;
    if (logits.width, logits.height) != (target.width(), target.height()) || logits.data.len() != pixels * c || c == 0 {
        return Err(Error::Shape(format!(
            "logits {}x{}x{} do not match target {}x{}",
            logits.height,
            logits.width,
            c,
            target.height(),
            target.width()
        )));
    }
    if let Some(bad) = logits.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {bad}")));
    }

    let mut loss = 0.0;
    let mut gradient = vec![0.0; logits.data.len()];
    let mut counted = 0;
    for (px, &label) in target.data().iter().enumerate() {
        if label == UNCERTAIN {
            continue;
        }
        let label = usize::from(label);
        if label >= c {
            return Err(Error::Contract(format!(
                "target label {label} outside {c} logit channels"
            )));
        }
        let scores = &logits.data[px * c..(px + 1) * c];
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let log_norm = max + norm.ln();
        loss += log_norm - scores[label];
        let grad = &mut gradient[px * c..(px + 1) * c];
        for (g, s) in grad.iter_mut().zip(scores) {
            *g = (s - log_norm).exp();
        }
        grad[label] -= 1.0;
        counted += 1;
    }
    if reduction == Reduction::Mean && counted > 0 {
        let scale = 1.0 / counted as f64;
        loss *= scale;
        gradient.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(LossReport {
        loss,
        gradient,
        counted_pixels: counted,
    })
}
