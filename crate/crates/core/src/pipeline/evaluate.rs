use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneWeights, Head};
use crate::data::{Image, SegExample};
use crate::error::{Error, Result};
use crate::tokenizer::argmax_rows;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Segment,
}

impl Task {
    pub fn head(self) -> Head {
        match self {
            Task::Classify => Head::Cls,
            Task::Segment => Head::Seg,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Segment => "segment",
        }
    }
}

/// Fraction of positions where `pred == truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Per-class intersection-over-union and the mean over classes present in the
/// ground truth. Classes absent from the ground truth get `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn mean_iou(pred: &[usize], truth: &[usize], classes: usize) -> IouReport {
    let mut inter = vec![0usize; classes];
    let mut pred_n = vec![0usize; classes];
    let mut true_n = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p < classes {
            pred_n[p] += 1;
        }
        if t < classes {
            true_n[t] += 1;
        }
        if p == t && t < classes {
            inter[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            (true_n[c] > 0).then(|| inter[c] as f64 / (pred_n[c] + true_n[c] - inter[c]) as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    IouReport { per_class, miou }
}

/// Evaluation outcome of a fine-tuned checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalResult {
    Classify { accuracy: f64 },
    Segment { pixel_accuracy: f64, iou: IouReport },
}

impl EvalResult {
    /// Headline metric: accuracy or mIoU.
    pub fn score(&self) -> f64 {
        match self {
            EvalResult::Classify { accuracy } => *accuracy,
            EvalResult::Segment { iou, .. } => iou.miou,
        }
    }

    /// `(metric name, value)` pairs for logging.
    pub fn named(&self) -> Vec<(String, f64)> {
        match self {
            EvalResult::Classify { accuracy } => vec![("accuracy".into(), *accuracy)],
            EvalResult::Segment { pixel_accuracy, iou } => {
                let mut v = vec![("miou".into(), iou.miou), ("pixel_accuracy".into(), *pixel_accuracy)];
                for (c, x) in iou.per_class.iter().enumerate() {
                    if let Some(x) = x {
                        v.push((format!("iou_{c}"), *x));
                    }
                }
                v
            }
        }
    }
}

const EVAL_CHUNK: usize = 64;

pub fn predict_classes(weights: &BackboneWeights, images: &[Image]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        out.extend(argmax_rows(&weights.classify(chunk)?));
    }
    Ok(out)
}

/// Per-pixel argmax labels, concatenated over images.
pub fn predict_segments(weights: &BackboneWeights, images: &[Image]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for chunk in images.chunks(EVAL_CHUNK) {
        let (h, w) = (chunk[0].height, chunk[0].width);
        out.extend(argmax_rows(&weights.segment(chunk, (h, w))?));
    }
    Ok(out)
}

/// Evaluates `weights` on `dataset`; the attached head must match `task`.
pub fn evaluate(weights: &BackboneWeights, dataset: &[SegExample], task: Task) -> Result<EvalResult> {
    let found = weights.head();
    if found.map(|h| h.0) != Some(task.head()) {
        return Err(Error::TaskMismatch {
            requested: task.name().into(),
            found: found.map_or("none".into(), |(h, _)| format!("{h:?}").to_lowercase()),
        });
    }
    let images: Vec<Image> = dataset.iter().map(|e| e.image.clone()).collect();
    match task {
        Task::Classify => {
            let pred = predict_classes(weights, &images)?;
            let truth: Vec<usize> = dataset.iter().map(|e| e.label).collect();
            Ok(EvalResult::Classify {
                accuracy: accuracy(&pred, &truth),
            })
        }
        Task::Segment => {
            let classes = found.map_or(0, |h| h.1);
            let pred = predict_segments(weights, &images)?;
            let truth: Vec<usize> = dataset.iter().flat_map(|e| e.seg.iter().map(|&v| v as usize)).collect();
            Ok(EvalResult::Segment {
                pixel_accuracy: accuracy(&pred, &truth),
                iou: mean_iou(&pred, &truth, classes),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn perfect_predictions() {
        let t = vec![0, 1, 2, 2, 1];
        assert_eq!(accuracy(&t, &t), 1.0);
        assert_eq!(mean_iou(&t, &t, 4).miou, 1.0);
        assert_eq!(mean_iou(&t, &t, 4).per_class[3], None);
    }

    #[test]
    fn disjoint_class_has_zero_iou() {
        let truth = vec![0, 0, 1, 1];
        let pred = vec![1, 1, 0, 0];
        let r = mean_iou(&pred, &truth, 2);
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0)]);
        assert_eq!(r.miou, 0.0);
    }

    #[test]
    fn hand_iou() {
        let truth = vec![0, 0, 1, 1, 1];
        let pred = vec![0, 1, 1, 1, 0];
        let r = mean_iou(&pred, &truth, 3);
        assert_eq!(r.per_class[0], Some(1.0 / 3.0));
        assert_eq!(r.per_class[1], Some(0.5));
        assert!((r.miou - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn random_guessing_is_near_chance() {
        let (n, c) = (20_000, 5);
        let mut rng = substream(3, "eval", 0);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let p = 1.0 / c as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((accuracy(&pred, &truth) - p).abs() < 3.0 * sigma);
    }
}
