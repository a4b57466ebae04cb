//! Hard-threshold evaluation metrics. Everything derives from per-sample
//! pixel confusion counts; ratios use one empty-denominator convention:
//! the value is 1 when the corresponding ideal (ground-truth) set is also
//! empty, 0 otherwise. With both masks empty every metric is 1.

use crate::element::Element;
use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    fn target_fg(&self) -> usize {
        self.true_pos + self.false_neg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    pub dice: f64,
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Dataset-level summary: per-sample means, with miou averaging the
/// two-class (foreground/background) IoU first within each sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub dice: f64,
    pub miou: f64,
    pub recall: f64,
    pub precision: f64,
    pub n_samples: usize,
    pub threshold: f64,
}

/// Pixel confusion counts with pred binarized at `threshold` (>= is
/// foreground, so threshold 0 predicts everything). Target binarity is the
/// caller's contract; anything >= 0.5 counts as foreground.
pub fn confusion<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    threshold: f64,
) -> Result<Confusion, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "confusion",
            a: pred.shape().to_string(),
            b: target.shape().to_string(),
        });
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        let p_fg = p.to_f64() >= threshold;
        let g_fg = g.to_f64() >= 0.5;
        match (p_fg, g_fg) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize, ideal_empty: bool) -> f64 {
    if den == 0 {
        if ideal_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// All five per-sample metrics from one confusion count. For dice, the IoUs
/// and recall an empty denominator already implies the ideal set is empty;
/// only precision can have empty predictions against a non-empty target.
pub fn metrics_from_confusion(c: &Confusion) -> SampleMetrics {
    SampleMetrics {
        dice: ratio(2 * c.true_pos, 2 * c.true_pos + c.false_pos + c.false_neg, true),
        iou_fg: ratio(c.true_pos, c.true_pos + c.false_pos + c.false_neg, true),
        iou_bg: ratio(c.true_neg, c.true_neg + c.false_pos + c.false_neg, true),
        recall: ratio(c.true_pos, c.true_pos + c.false_neg, true),
        precision: ratio(c.true_pos, c.true_pos + c.false_pos, c.target_fg() == 0),
    }
}

pub fn evaluate_pair<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    threshold: f64,
) -> Result<SampleMetrics, TensorError> {
    Ok(metrics_from_confusion(&confusion(pred, target, threshold)?))
}

/// Mean the per-sample metrics in index order.
pub fn aggregate(samples: &[SampleMetrics], threshold: f64) -> Result<MetricReport, TensorError> {
    if samples.is_empty() {
        return Err(TensorError::Contract {
            op: "aggregate",
            message: "metric aggregation needs at least one sample".into(),
        });
    }
    let n = samples.len() as f64;
    let mut dice = 0.0;
    let mut miou = 0.0;
    let mut recall = 0.0;
    let mut precision = 0.0;
    for s in samples {
        dice += s.dice;
        miou += (s.iou_fg + s.iou_bg) / 2.0;
        recall += s.recall;
        precision += s.precision;
    }
    Ok(MetricReport {
        dice: dice / n,
        miou: miou / n,
        recall: recall / n,
        precision: precision / n,
        n_samples: samples.len(),
        threshold,
    })
}
