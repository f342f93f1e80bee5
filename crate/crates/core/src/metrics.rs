//! Confusion matrices and mean intersection-over-union.

use std::io::Write;

use crate::error::{bail, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
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

    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            bail!(Contract, "prediction has {} pixels, ground truth {}", pred.len(), gt.len());
        }
        let c = self.classes;
        if let Some(v) = pred.iter().chain(gt).find(|&&v| v as usize >= c) {
            bail!(Contract, "class {v} outside 0..{c}");
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            bail!(Contract, "merging {}-class and {}-class matrices", self.classes, other.classes);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` where the class has an empty union.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            bail!(UndefinedMetric, "mIoU of an empty confusion matrix");
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            bail!(UndefinedMetric, "accuracy of an empty confusion matrix");
        }
        let diag: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        Ok(diag as f64 / total as f64)
    }

    /// `class,iou` rows (empty iou for absent classes) and a `miou` row.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "class,iou")?;
        for (k, iou) in self.class_iou().into_iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "{k},{v}")?,
                None => writeln!(out, "{k},")?,
            }
        }
        writeln!(out, "miou,{}", self.miou()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 0, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 0, 1, 2));
        let ious = cm.class_iou();
        assert_eq!(ious, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_and_disjoint() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
        for k in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.get(k, j) > 0, k == j);
            }
        }
        let mut d = ConfusionMatrix::new(2);
        d.accumulate(&[1, 1, 0], &[0, 0, 1]).unwrap();
        assert_eq!(d.miou().unwrap(), 0.0);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(6);
        cm.accumulate(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(ConfusionMatrix::new(2).miou(), Err(crate::Error::UndefinedMetric(_))));
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(cm.accumulate(&[0], &[0, 1]), Err(crate::Error::Contract(_))));
        assert!(matches!(cm.accumulate(&[2], &[0]), Err(crate::Error::Contract(_))));
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn csv_report() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 0, 1], &[0, 1, 1, 1]).unwrap();
        let mut out = Vec::new();
        cm.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "class,iou");
        assert_eq!(lines[1], "0,0.5");
        assert_eq!(lines[3], "2,");
        assert!(lines[4].starts_with("miou,0.58333"));
    }
}
