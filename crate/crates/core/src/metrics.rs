//! Confusion-matrix metrics with "changed" as the positive class. Ratios with a
//! zero denominator are `None` rather than 0.

use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{EhctError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Pixel counts of `pred` against `gt`; both flat binary masks of equal length.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(EhctError::Validation(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fp += 1,
            (0, 1) => cm.fn_ += 1,
            (0, 0) => cm.tn += 1,
            _ => return Err(EhctError::Validation(format!("non-binary mask values ({p}, {g})"))),
        }
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn precision(cm: &ConfusionMatrix) -> Option<f64> {
    ratio(cm.tp, cm.tp + cm.fp)
}

pub fn recall(cm: &ConfusionMatrix) -> Option<f64> {
    ratio(cm.tp, cm.tp + cm.fn_)
}

pub fn oa(cm: &ConfusionMatrix) -> Option<f64> {
    ratio(cm.tp + cm.tn, cm.total())
}

pub fn iou(cm: &ConfusionMatrix) -> Option<f64> {
    ratio(cm.tp, cm.tp + cm.fn_ + cm.fp)
}

/// IoU of the background class.
pub fn background_iou(cm: &ConfusionMatrix) -> Option<f64> {
    ratio(cm.tn, cm.tn + cm.fn_ + cm.fp)
}

/// Harmonic mean; undefined if either input is or if both are zero.
pub fn f1(p: Option<f64>, r: Option<f64>) -> Option<f64> {
    let (p, r) = (p?, r?);
    (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
}

/// Mean of the defined entries; `None` when there are none.
pub fn miou(ious: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = ious.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    /// Mean of per-image change IoUs (images with an undefined IoU are skipped).
    pub miou: Option<f64>,
    pub oa: Option<f64>,
    /// Mean of the change and background IoUs of the summed matrix.
    pub two_class_miou: Option<f64>,
    pub region_count: usize,
    pub confusion: ConfusionMatrix,
    pub per_image_iou: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn from_matrices(cms: &[ConfusionMatrix]) -> Self {
        let total: ConfusionMatrix = cms.iter().copied().sum();
        let per_image_iou: Vec<Option<f64>> = cms.iter().map(iou).collect();
        let (p, r) = (precision(&total), recall(&total));
        let two = match (iou(&total), background_iou(&total)) {
            (Some(a), Some(b)) => Some((a + b) / 2.0),
            _ => None,
        };
        Self {
            precision: p,
            recall: r,
            f1: f1(p, r),
            iou: iou(&total),
            miou: miou(&per_image_iou),
            oa: oa(&total),
            two_class_miou: two,
            region_count: cms.len(),
            confusion: total,
            per_image_iou,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Confusion matrices are summed over all pairs before any ratio is taken.
pub fn evaluate_dataset(preds: &[Vec<u8>], gts: &[Vec<u8>]) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(EhctError::Validation(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let cms = preds.iter().zip(gts).map(|(p, g)| confusion(p, g)).collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_matrices(&cms))
}

impl fmt::Display for MetricReport {
    /// Aligned table with percentages at two decimals; `n/a` marks undefined values.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", v * 100.0));
        let rows = [
            ("Precision", self.precision),
            ("Recall", self.recall),
            ("F1", self.f1),
            ("IoU", self.iou),
            ("MIoU", self.miou),
            ("OA", self.oa),
            ("MIoU(2-class)", self.two_class_miou),
        ];
        writeln!(f, "{:<14} {:>8}", "metric", "%")?;
        for (name, v) in rows {
            writeln!(f, "{:<14} {:>8}", name, pct(v))?;
        }
        write!(
            f,
            "{:<14} {:>8}\n(tp={} fp={} fn={} tn={})",
            "images", self.region_count, self.confusion.tp, self.confusion.fp, self.confusion.fn_, self.confusion.tn
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let cm = ConfusionMatrix { tp: 50, fp: 50, fn_: 0, tn: 0 };
        assert_eq!(precision(&cm), Some(0.5));
        assert_eq!(recall(&ConfusionMatrix::default()), None);
        let v = f1(Some(0.8), Some(0.6)).unwrap();
        assert!((v - 0.685_714_285_714_285_7).abs() < 1e-12);
        assert_eq!(miou(&[Some(1.0)]), Some(1.0));
        assert_eq!(miou(&[Some(0.0), Some(1.0)]), Some(0.5));
        assert_eq!(miou(&[]), None);
    }

    #[test]
    fn confusion_extremes_and_errors() {
        let ones = vec![1u8; 10];
        assert_eq!(confusion(&ones, &ones).unwrap(), ConfusionMatrix { tp: 10, ..Default::default() });
        let gt: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
        let comp: Vec<u8> = gt.iter().map(|v| 1 - v).collect();
        let cm = confusion(&comp, &gt).unwrap();
        assert_eq!((cm.tp, cm.tn), (0, 0));
        assert!(confusion(&[1, 0], &[1]).is_err());
        assert!(confusion(&[2], &[1]).is_err());
    }

    #[test]
    fn summed_counts_example() {
        let preds = vec![vec![1, 1], vec![0, 0]];
        let gts = vec![vec![1, 0], vec![1, 0]];
        let r = evaluate_dataset(&preds, &gts).unwrap();
        assert_eq!(r.confusion, ConfusionMatrix { tp: 1, fp: 1, fn_: 1, tn: 1 });
        assert_eq!((r.precision, r.recall, r.oa), (Some(0.5), Some(0.5), Some(0.5)));
        assert!((r.iou.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let single = evaluate_dataset(&[vec![1, 0]], &[vec![1, 0]]).unwrap();
        for v in [single.precision, single.recall, single.f1, single.iou, single.miou, single.oa, single.two_class_miou]
        {
            assert_eq!(v, Some(1.0));
        }
        assert!(evaluate_dataset(&preds, &gts[..1]).is_err());
    }

    #[test]
    fn table_has_two_decimals() {
        let r = evaluate_dataset(&[vec![1, 1, 0]], &[vec![1, 0, 0]]).unwrap();
        let s = r.to_string();
        assert!(s.contains("Precision         50.00"), "{s}");
        assert!(s.contains("Recall           100.00"), "{s}");
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
