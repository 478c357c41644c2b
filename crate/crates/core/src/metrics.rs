//! Evaluation: confusion matrices, one-vs-rest classification metrics,
//! ROC/AUC, and attention-driven localization scored by intersection over
//! union.
//!
//! Per-class scores use one-vs-rest counts with unweighted macro averaging;
//! cells whose denominator is zero are reported as undefined and excluded
//! from the macro, with a flag so callers can surface the exclusion. The
//! plain multi-class accuracy (diagonal over total) is reported separately
//! since the one-vs-rest accuracy is a different quantity.

use ndarray::{Array2, ArrayViewD};

use crate::attention::summed_attention;
use crate::error::{Error, Result};
use crate::imgops::{self, PixelBox};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((k, k)),
        }
    }

    pub fn from_pairs(labels: &[usize], predictions: &[usize], k: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(k);
        for (&g, &p) in labels.iter().zip(predictions) {
            if g >= k || p >= k {
                return Err(Error::Data(format!(
                    "label/prediction pair ({g},{p}) out of range for {k} classes"
                )));
            }
            cm.counts[(g, p)] += 1;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.counts.nrows()
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[(truth, pred)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[(i, i)]).sum()
    }

    /// Fraction of samples on the diagonal.
    pub fn multiclass_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// One-vs-rest counts for a single class.
    pub fn binary_counts(&self, class: usize) -> BinaryCounts {
        let mut c = BinaryCounts::default();
        for g in 0..self.k() {
            for p in 0..self.k() {
                let n = self.counts[(g, p)];
                match (g == class, p == class) {
                    (true, true) => c.tp += n,
                    (true, false) => c.fn_ += n,
                    (false, true) => c.fp += n,
                    (false, false) => c.tn += n,
                }
            }
        }
        c
    }

    pub fn rows(&self) -> &Array2<u64> {
        &self.counts
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn acc(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sen(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn spc(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub counts: BinaryCounts,
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spc: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_acc: Option<f64>,
    pub macro_sen: Option<f64>,
    pub macro_spc: Option<f64>,
    pub macro_f1: Option<f64>,
    /// trace / total, distinct from the one-vs-rest macro accuracy
    pub multiclass_accuracy: f64,
    /// true when any per-class cell was undefined and left out of a macro
    pub undefined_excluded: bool,
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>, excluded: &mut bool) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => *excluded = true,
        }
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if cm.total() == 0 {
        return Err(Error::Data("metrics on an empty confusion matrix".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..cm.k())
        .map(|class| {
            let counts = cm.binary_counts(class);
            ClassMetrics {
                class,
                counts,
                acc: counts.acc(),
                sen: counts.sen(),
                spc: counts.spc(),
                f1: counts.f1(),
            }
        })
        .collect();
    let mut excluded = false;
    let macro_acc = macro_mean(per_class.iter().map(|c| c.acc), &mut excluded);
    let macro_sen = macro_mean(per_class.iter().map(|c| c.sen), &mut excluded);
    let macro_spc = macro_mean(per_class.iter().map(|c| c.spc), &mut excluded);
    let macro_f1 = macro_mean(per_class.iter().map(|c| c.f1), &mut excluded);
    Ok(MetricsReport {
        per_class,
        macro_acc,
        macro_sen,
        macro_spc,
        macro_f1,
        multiclass_accuracy: cm.multiclass_accuracy(),
        undefined_excluded: excluded,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RocCurve {
    /// Score at or above which a sample is called positive; starts at
    /// infinity for the (0,0) point.
    pub thresholds: Vec<f64>,
    /// (fpr, tpr) pairs aligned with `thresholds`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC over every distinct score with ties grouped, AUC by trapezoid rule.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(
            "ROC needs at least one positive and one negative sample".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score in ROC input".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut thresholds = vec![f64::INFINITY];
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        // ties move together
        while i < order.len() && scores[order[i]] == score {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(score);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5)
        .sum();
    Ok(RocCurve {
        thresholds,
        points,
        auc,
    })
}

/// One-vs-rest AUC per class plus the macro mean over classes where the
/// curve is defined.
pub fn macro_auc(probs: &Array2<f64>, labels: &[usize]) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    let (n, k) = probs.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} score rows",
            labels.len()
        )));
    }
    let mut per_class = Vec::with_capacity(k);
    for class in 0..k {
        let scores: Vec<f64> = (0..n).map(|i| probs[(i, class)]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        per_class.push(match roc_auc(&scores, &positive) {
            Ok(curve) => Some(curve.auc),
            Err(Error::Data(_)) => None,
            Err(e) => return Err(e),
        });
    }
    let mut _flag = false;
    let mean = macro_mean(per_class.iter().copied(), &mut _flag);
    Ok((per_class, mean))
}

/// Pixel IoU of two boolean masks; 0 when both are empty.
pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "mask iou: shape mismatch");
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone)]
pub struct Localization {
    /// Min-max normalized heatmap upsampled to image resolution.
    pub heatmap: Array2<f32>,
    pub mask: Array2<bool>,
    /// Minimal rectangle enclosing the mask; None when the mask is empty.
    pub bbox: Option<PixelBox>,
    pub threshold: f32,
}

impl Localization {
    /// Box IoU against a ground-truth rectangle; an empty prediction scores 0.
    pub fn box_iou(&self, truth: &PixelBox) -> f64 {
        match &self.bbox {
            Some(b) => b.iou(truth),
            None => 0.0,
        }
    }
}

/// Localize one sample: sum the attention stack over maps, min-max
/// normalize, bilinearly upsample to the image size, and keep pixels at or
/// above the threshold. All-zero attention yields an empty mask by rule.
pub fn localize(
    stack: &ArrayViewD<'_, f32>,
    sample: usize,
    image_h: usize,
    image_w: usize,
    threshold: f32,
) -> Localization {
    let summed = summed_attention(stack, sample);
    let all_zero = summed.iter().all(|&v| v == 0.0);
    let normalized = imgops::min_max_normalize(&summed);
    let heatmap = imgops::resize_bilinear(&normalized, image_h, image_w);
    let mask = if all_zero {
        Array2::from_elem((image_h, image_w), false)
    } else {
        heatmap.mapv(|v| v >= threshold)
    };
    let bbox = imgops::mask_bbox(&mask);
    Localization {
        heatmap,
        mask,
        bbox,
        threshold,
    }
}
