//! Confusion-matrix accounting and mean intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `counts[truth * classes + pred]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::dim(
                "accumulate",
                format!("{} predictions for {} labels", pred.len(), truth.len()),
            ));
        }
        let l = self.classes;
        if let Some(&bad) = pred.iter().chain(truth).find(|&&v| v as usize >= l) {
            return Err(Error::Label {
                label: bad as usize,
                classes: l,
            });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize * l + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim(
                "merge",
                format!("{} vs {} classes", self.classes, other.classes),
            ));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let l = self.classes;
        (0..l)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..l).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..l).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.iou().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::State("mIoU of an empty confusion matrix".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let tp: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        tp as f64 / self.total().max(1) as f64
    }
}

/// Per-pixel arg-max over the class axis of `[B, L, H, W]` logits, laid out
/// `[B, H, W]`. Ties go to the lowest class index.
pub fn argmax_labels<E: Element>(logits: &Tensor<E>) -> Result<Vec<u8>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] > u8::MAX as usize + 1 {
        return Err(Error::dim("argmax", format!("expected [B,L,H,W] logits, got {s:?}")));
    }
    let (l, hw) = (s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(s[0] * hw);
    for b in 0..s[0] {
        for i in 0..hw {
            let mut best = 0;
            for c in 1..l {
                if d[(b * l + c) * hw + i] > d[(b * l + best) * hw + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_two_by_two() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(cm.counts(), &[1, 0, 1, 2]);
        let iou = cm.iou();
        assert_eq!(iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(cm.iou()[2], None);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn empty_matrix_has_no_miou() {
        assert!(ConfusionMatrix::new(3).miou().is_err());
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(cm.accumulate(&[2], &[0]), Err(Error::Label { label: 2, .. })));
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let (p, t) = ([0u8, 1, 2, 2, 1], [0u8, 2, 2, 1, 1]);
        let mut joint = ConfusionMatrix::new(3);
        joint.accumulate(&p, &t).unwrap();
        let mut a = ConfusionMatrix::new(3);
        a.accumulate(&p[..2], &t[..2]).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.accumulate(&p[2..], &t[2..]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, joint);
    }

    #[test]
    fn argmax_picks_largest_logit() {
        let t = Tensor::new([1, 3, 1, 2], vec![0.0f32, 5.0, 1.0, 0.0, 0.5, 9.0]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap(), vec![1, 2]);
    }
}
