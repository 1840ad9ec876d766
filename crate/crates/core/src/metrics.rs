//! Confusion-matrix segmentation metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops::IGNORE;

/// `C×C` pixel counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    /// Per-class IoU; `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub pixel_accuracy: f64,
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

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth map pair. Ignored ground-truth pixels
    /// are skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "accumulate",
                format!("{} predictions vs {} labels", pred.len(), gt.len()),
            ));
        }
        let c = self.classes;
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == IGNORE {
                continue;
            }
            if p as usize >= c {
                return Err(Error::Label {
                    value: p,
                    pixel: i,
                    classes: c,
                });
            }
            if g as usize >= c {
                return Err(Error::Label {
                    value: g,
                    pixel: i,
                    classes: c,
                });
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(
                "merge",
                format!("{} vs {} classes", self.classes, other.classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `IoU_c = TP / (TP + FP + FN)`; zero-union classes are left out of the mean.
    pub fn miou(&self) -> Result<IouReport> {
        let c = self.classes;
        let mut per_class = Vec::with_capacity(c);
        for k in 0..c {
            let tp = self.get(k, k);
            let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
            let col: u64 = (0..c).map(|j| self.get(j, k)).sum();
            let union = row + col - tp;
            per_class.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::NoEvaluableClasses);
        }
        let diag: u64 = (0..c).map(|k| self.get(k, k)).sum();
        Ok(IouReport {
            mean: present.iter().sum::<f64>() / present.len() as f64,
            pixel_accuracy: diag as f64 / self.total() as f64,
            per_class,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_example() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(cm.counts, vec![1, 0, 1, 2]);
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.mean - 0.583_333_333_333_333_4).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 2, 2], &[0, 2, 2]).unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.per_class[1], None);

        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 0, 1], &[0, 1, 0]).unwrap();
        assert_eq!(cm.miou().unwrap().mean, 0.0);
    }

    #[test]
    fn ignored_pixels_and_errors() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1], &[IGNORE, IGNORE]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.miou(), Err(Error::NoEvaluableClasses)));
        assert!(cm.accumulate(&[2], &[0]).is_err());
    }
}
