//! Evaluation metrics for reconstruction, classification and segmentation.

use crate::error::{Error, Result};

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} elements")));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`; `+∞` when identical.
pub fn psnr(clean: &[f64], reconstructed: &[f64]) -> Result<f64> {
    check_len(clean.len(), reconstructed.len(), "psnr")?;
    let mse = clean
        .iter()
        .zip(reconstructed)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / clean.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Per-sample class probabilities with their true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredLabelSet {
    classes: usize,
    scores: Vec<f64>,
    labels: Vec<usize>,
}

impl ScoredLabelSet {
    /// `scores` is row-major `[labels.len(), classes]`; rows must sum to 1 within 1e-5.
    pub fn new(scores: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Contract(format!("need at least 2 classes, got {classes}")));
        }
        check_len(scores.len(), labels.len() * classes, "scored label set")?;
        for (i, row) in scores.chunks(classes).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!("score row {i} sums to {s}")));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!("label {l} ≥ class count {classes}")));
        }
        Ok(ScoredLabelSet {
            classes,
            scores,
            labels,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.classes..(i + 1) * self.classes]
    }

    /// Argmax class per sample (first maximum on ties).
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub precision: f64,
    pub f_score: f64,
    pub auc: f64,
    /// Classes excluded from the macro averages, with the reason.
    pub warnings: Vec<String>,
}

/// Area under the ROC curve via the Mann–Whitney statistic, ties counted ½.
///
/// Returns `None` when either class is empty.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, so tied ranks stay integral.
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average; twice that is i + j + 2.
        let pos_in_group = order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        rank2_sum += pos_in_group * (i + j + 2) as u64;
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    // 2U = 2R − n_pos(n_pos+1); halves stay exact in f64.
    let u2 = rank2_sum - n_pos * (n_pos + 1);
    Some(u2 as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// Accuracy plus macro-averaged sensitivity, precision, F-score and one-vs-rest AUC.
pub fn classification_metrics(set: &ScoredLabelSet) -> Result<ClassificationMetrics> {
    if set.is_empty() {
        return Err(Error::Data("no samples to score".into()));
    }
    let preds = set.predictions();
    let correct = preds.iter().zip(set.labels()).filter(|(p, l)| p == l).count();
    let mut warnings = Vec::new();
    let (mut sens, mut prec, mut f, mut aucs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for c in 0..set.classes() {
        let support = set.labels().iter().filter(|&&l| l == c).count();
        if support == 0 {
            warnings.push(format!("class {c} absent from labels; excluded from macro averages"));
            continue;
        }
        let tp = preds
            .iter()
            .zip(set.labels())
            .filter(|(&p, &l)| p == c && l == c)
            .count() as f64;
        let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
        let recall = tp / support as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let f1 = if recall + precision > 0.0 {
            2.0 * recall * precision / (recall + precision)
        } else {
            0.0
        };
        sens.push(recall);
        prec.push(precision);
        f.push(f1);
        let scores: Vec<f64> = (0..set.len()).map(|i| set.row(i)[c]).collect();
        let positive: Vec<bool> = set.labels().iter().map(|&l| l == c).collect();
        match auc(&scores, &positive) {
            Some(a) => aucs.push(a),
            None => warnings.push(format!("class {c} has no negatives; excluded from AUC")),
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / set.len() as f64,
        sensitivity: mean(&sens),
        precision: mean(&prec),
        f_score: mean(&f),
        auc: mean(&aucs),
        warnings,
    })
}

/// Predicted probability map against a binary ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMaskPair<'a> {
    pub prediction: &'a [f64],
    pub ground_truth: &'a [f64],
    /// Predictions `≥ threshold` count as positive.
    pub threshold: f64,
}

impl<'a> BinaryMaskPair<'a> {
    pub fn new(prediction: &'a [f64], ground_truth: &'a [f64]) -> Result<Self> {
        check_len(prediction.len(), ground_truth.len(), "mask pair")?;
        if ground_truth.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("ground truth mask must be binary".into()));
        }
        Ok(BinaryMaskPair {
            prediction,
            ground_truth,
            threshold: 0.5,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentationMetrics {
    pub pixel_accuracy: f64,
    pub iou: f64,
    pub dice: f64,
}

/// Pixel accuracy, IoU and binarised Dice of the positive class. Two empty masks score 1.
pub fn segmentation_metrics(pair: &BinaryMaskPair<'_>) -> Result<SegmentationMetrics> {
    check_len(pair.prediction.len(), pair.ground_truth.len(), "segmentation metrics")?;
    let (mut inter, mut union, mut correct, mut pred_pos, mut gt_pos) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pair.prediction.iter().zip(pair.ground_truth) {
        let p = p >= pair.threshold;
        let g = g == 1.0;
        inter += (p && g) as usize;
        union += (p || g) as usize;
        correct += (p == g) as usize;
        pred_pos += p as usize;
        gt_pos += g as usize;
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let dice = if pred_pos + gt_pos == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (pred_pos + gt_pos) as f64
    };
    Ok(SegmentationMetrics {
        pixel_accuracy: correct as f64 / pair.prediction.len().max(1) as f64,
        iou,
        dice,
    })
}
