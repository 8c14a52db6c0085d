use serde::{Deserialize, Serialize};

use crate::arch::Model;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::Batch;

/// `counts[a·C + b]` = pixels of true class `a` predicted as `b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} truth pixels vs {} predictions", truth.len(), pred.len()),
            ));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= self.classes || p >= self.classes {
                return Err(Error::invalid(
                    "confusion",
                    format!("class ({t}, {p}) outside 0..{}", self.classes),
                ));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from both
    /// prediction and truth.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over the classes that occur in prediction or truth; 0 for an
    /// empty matrix.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        correct as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
    pub pixels: u64,
    pub confusion: ConfusionMatrix,
}

impl EvalMetrics {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        EvalMetrics {
            miou: confusion.miou(),
            per_class_iou: confusion.per_class_iou(),
            pixel_accuracy: confusion.pixel_accuracy(),
            pixels: confusion.total(),
            confusion,
        }
    }
}

/// Per-pixel argmax over channels of B×C×H×W logits; ties go to the lower index.
pub fn argmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (b, c, h, w) = logits.dims4("argmax")?;
    let plane = h * w;
    let d = logits.data();
    let mut out = vec![0usize; b * plane];
    for bi in 0..b {
        let base = bi * c * plane;
        for j in 0..plane {
            let mut best = 0;
            for ch in 1..c {
                if d[base + ch * plane + j] > d[base + best * plane + j] {
                    best = ch;
                }
            }
            out[bi * plane + j] = best;
        }
    }
    Ok(out)
}

/// Eval-mode final predictions over `samples`, in batches of `batch`.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[Sample], batch: usize) -> Result<EvalMetrics> {
    let mut cm = ConfusionMatrix::new(model.config().seg_classes);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let b = Batch::<T>::from_samples(&refs)?;
        let logits = model.predict(&b.images)?;
        cm.add(&b.mask, &argmax_channels(&logits)?)?;
    }
    Ok(EvalMetrics::from_confusion(cm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_one() {
        let mut cm = ConfusionMatrix::new(4);
        let t = [0, 1, 2, 3, 1, 1];
        cm.add(&t, &t).unwrap();
        assert_eq!(cm.miou(), 1.0);
        assert_eq!(cm.total(), 6);
    }

    #[test]
    fn complement_is_zero() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 1, 1, 0], &[1, 0, 0, 1]).unwrap();
        assert_eq!(cm.per_class_iou(), vec![Some(0.0), Some(0.0)]);
        assert_eq!(cm.miou(), 0.0);
    }

    #[test]
    fn absent_classes_excluded() {
        let mut cm = ConfusionMatrix::new(4);
        cm.add(&[0, 0, 1, 1], &[0, 0, 1, 0]).unwrap();
        assert_eq!(cm.iou(3), None);
        let expected = (2.0 / 3.0 + 0.5) / 2.0;
        assert!((cm.miou() - expected).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_take_first() {
        let t = Tensor::<f64>::from_f64(&[1, 3, 1, 2], &[1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t).unwrap(), vec![0, 1]);
    }
}
