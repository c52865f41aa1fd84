//! Confusion-matrix segmentation scores.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IGNORE_LABEL: i64 = -1;

/// Square count matrix, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    pub num_classes: usize,
    pub ignore_label: i64,
    counts: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self::with_ignore(num_classes, IGNORE_LABEL)
    }

    pub fn with_ignore(num_classes: usize, ignore_label: i64) -> Self {
        Self {
            num_classes,
            ignore_label,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn matrix(&self) -> Array2<u64> {
        Array2::from_shape_vec((self.num_classes, self.num_classes), self.counts.clone()).unwrap()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn class(&self, v: i64, what: &str) -> Result<usize> {
        if v >= 0 && (v as usize) < self.num_classes {
            Ok(v as usize)
        } else {
            Err(Error::Metric(format!("illegal {what} class {v} (classes: {})", self.num_classes)))
        }
    }

    /// Adds every pixel whose ground truth is not the ignore label. On error
    /// the accumulator is left unchanged.
    pub fn update(&mut self, pred: ArrayView2<i64>, gt: ArrayView2<i64>) -> Result<()> {
        self.update_slices(
            pred.as_standard_layout().as_slice().unwrap(),
            gt.as_standard_layout().as_slice().unwrap(),
            pred.shape() == gt.shape(),
        )
    }

    /// Flat variant of [`Self::update`].
    pub fn update_flat(&mut self, pred: &[i64], gt: &[i64]) -> Result<()> {
        self.update_slices(pred, gt, pred.len() == gt.len())
    }

    fn update_slices(&mut self, pred: &[i64], gt: &[i64], same_shape: bool) -> Result<()> {
        if !same_shape {
            return Err(Error::Metric("prediction and ground truth shapes differ".into()));
        }
        let mut delta = vec![0u64; self.counts.len()];
        for (&p, &t) in pred.iter().zip(gt) {
            if t == self.ignore_label {
                continue;
            }
            let t = self.class(t, "ground-truth")?;
            let p = self.class(p, "predicted")?;
            delta[t * self.num_classes + p] += 1;
        }
        for (c, d) in self.counts.iter_mut().zip(delta) {
            *c += d;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Metric("cannot merge accumulators of different class counts".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, fp, fn)` of class `c`.
    pub fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let k = self.num_classes;
        let tp = self.count(c, c);
        let col: u64 = (0..k).map(|g| self.count(g, c)).sum();
        let row: u64 = (0..k).map(|p| self.count(c, p)).sum();
        (tp, col - tp, row - tp)
    }

    pub fn compute(&self) -> Result<MetricReport> {
        if self.total() == 0 {
            return Err(Error::Metric("no pixels counted".into()));
        }
        let mut iou = Vec::with_capacity(self.num_classes);
        let mut dice = Vec::with_capacity(self.num_classes);
        for c in 0..self.num_classes {
            let (tp, fp, fn_) = self.tp_fp_fn(c);
            let union = tp + fp + fn_;
            if union == 0 {
                iou.push(None);
                dice.push(None);
            } else {
                iou.push(Some(tp as f64 / union as f64));
                dice.push(Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64));
            }
        }
        Ok(MetricReport {
            miou: mean_defined(&iou),
            mdice: mean_defined(&dice),
            iou_per_class: iou,
            dice_per_class: dice,
            pixels: self.total(),
            per_image_miou: Vec::new(),
        })
    }
}

fn mean_defined(v: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = v.iter().flatten().copied().collect();
    if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Scores derived from a confusion matrix. Classes absent from both
/// prediction and ground truth are `None` and excluded from the means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou_per_class: Vec<Option<f64>>,
    pub dice_per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub mdice: f64,
    pub pixels: u64,
    /// `(image id, mIoU)` pairs.
    pub per_image_miou: Vec<(String, f64)>,
}

/// Accumulates a global matrix plus one matrix per image.
#[derive(Debug, Clone)]
pub struct Evaluator {
    global: ConfusionAccumulator,
    per_image: Vec<(String, f64)>,
}

impl Evaluator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            global: ConfusionAccumulator::new(num_classes),
            per_image: Vec::new(),
        }
    }

    pub fn add_image(&mut self, id: &str, pred: ArrayView2<i64>, gt: ArrayView2<i64>) -> Result<()> {
        let mut acc = ConfusionAccumulator::with_ignore(self.global.num_classes, self.global.ignore_label);
        acc.update(pred, gt)?;
        self.global.merge(&acc)?;
        if acc.total() > 0 {
            self.per_image.push((id.to_string(), acc.compute()?.miou));
        }
        Ok(())
    }

    pub fn accumulator(&self) -> &ConfusionAccumulator {
        &self.global
    }

    pub fn finish(&self) -> Result<MetricReport> {
        let mut report = self.global.compute()?;
        report.per_image_miou = self.per_image.clone();
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn counting_oracle() {
        let gt = array![[1, 1, 1, 1], [1, 1, 1, 1], [0, 0, 0, 0], [0, 0, 0, 0]];
        let pred = array![[1, 1, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 0, 0]];
        let mut acc = ConfusionAccumulator::new(2);
        acc.update(pred.view(), gt.view()).unwrap();
        assert_eq!(acc.matrix(), array![[6, 2], [2, 6]]);
        let r = acc.compute().unwrap();
        assert_eq!(r.iou_per_class[1], Some(0.6));
        assert_eq!(r.dice_per_class[1], Some(0.75));
    }

    #[test]
    fn ignore_and_empty() {
        let gt = Array2::from_elem((3, 3), IGNORE_LABEL);
        let pred = Array2::zeros((3, 3));
        let mut acc = ConfusionAccumulator::new(2);
        acc.update(pred.view(), gt.view()).unwrap();
        assert_eq!(acc.total(), 0);
        assert!(acc.compute().is_err());
    }

    #[test]
    fn illegal_class_leaves_accumulator_unchanged() {
        let mut acc = ConfusionAccumulator::new(2);
        let gt = array![[0, 1], [1, 2]];
        let pred = array![[0, 1], [1, 1]];
        assert!(acc.update(pred.view(), gt.view()).is_err());
        assert_eq!(acc.total(), 0);
    }

    #[test]
    fn absent_class_excluded_from_means() {
        let gt = array![[0, 0], [0, 0]];
        let mut acc = ConfusionAccumulator::new(2);
        acc.update(gt.view(), gt.view()).unwrap();
        let r = acc.compute().unwrap();
        assert_eq!(r.iou_per_class, vec![Some(1.0), None]);
        assert_eq!(r.miou, 1.0);

        let pred = Array2::zeros((2, 2));
        let gt = array![[1, 0], [0, 0]];
        let mut acc = ConfusionAccumulator::new(2);
        acc.update(pred.view(), gt.view()).unwrap();
        assert_eq!(acc.compute().unwrap().iou_per_class[1], Some(0.0));
    }
}
