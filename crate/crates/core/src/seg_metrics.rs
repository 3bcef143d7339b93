//! Dataset-level intersection over union.
//!
//! Counts are accumulated over every evaluated image before the ratio is
//! taken. Pixels whose ground truth is [`IGNORE_LABEL`] are skipped. A class
//! that never occurs in either prediction or ground truth has an undefined
//! IOU and does not enter the mean.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::tensor_store::{LabelMask, IGNORE_LABEL};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction is {pred_w}x{pred_h}, ground truth is {gt_w}x{gt_h}")]
    ShapeMismatch {
        pred_w: usize,
        pred_h: usize,
        gt_w: usize,
        gt_h: usize,
    },
    #[error("label {label} is out of range for {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: usize },
    #[error("no class has a defined IOU")]
    EmptyState,
    #[error("cannot merge states over {0} and {1} classes")]
    ClassCountMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionState {
    pub num_classes: usize,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionState {
    pub fn new(num_classes: usize) -> Self {
        ConfusionState {
            num_classes,
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    /// Adds the counters of a partial state.
    pub fn merge(&mut self, other: &ConfusionState) -> Result<(), MetricsError> {
        if other.num_classes != self.num_classes {
            return Err(MetricsError::ClassCountMismatch(self.num_classes, other.num_classes));
        }
        for c in 0..self.num_classes {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        Ok(())
    }
}

/// Updates per-class TP/FP/FN with one image. A predicted [`IGNORE_LABEL`]
/// counts only as a miss of the ground-truth class.
pub fn confusion_accumulate(
    pred: &LabelMask,
    gt: &LabelMask,
    state: &mut ConfusionState,
) -> Result<(), MetricsError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(MetricsError::ShapeMismatch {
            pred_w: pred.width,
            pred_h: pred.height,
            gt_w: gt.width,
            gt_h: gt.height,
        });
    }
    let n = state.num_classes;
    let check = |label: u8| {
        if label != IGNORE_LABEL && label as usize >= n {
            Err(MetricsError::LabelOutOfRange {
                label,
                num_classes: n,
            })
        } else {
            Ok(())
        }
    };
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        check(p)?;
        check(g)?;
    }
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if g == IGNORE_LABEL {
            continue;
        }
        if p == g {
            state.tp[g as usize] += 1;
        } else {
            state.fn_[g as usize] += 1;
            if p != IGNORE_LABEL {
                state.fp[p as usize] += 1;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` marks an undefined class.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl Serialize for IouReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let per_class: std::collections::BTreeMap<String, Option<f64>> = self
            .per_class
            .iter()
            .enumerate()
            .map(|(c, v)| (format!("{c:02}"), *v))
            .collect();
        let mut s = serializer.serialize_struct("IouReport", 2)?;
        s.serialize_field("per_class", &per_class)?;
        s.serialize_field("miou", &self.miou)?;
        s.end()
    }
}

pub fn iou_report(state: &ConfusionState) -> Result<IouReport, MetricsError> {
    let per_class: Vec<Option<f64>> = (0..state.num_classes)
        .map(|c| {
            let denom = state.tp[c] + state.fp[c] + state.fn_[c];
            (denom > 0).then(|| state.tp[c] as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::EmptyState);
    }
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(IouReport { per_class, miou })
}

pub const PASCAL_CLASSES: [&str; 21] = [
    "bg", "aero", "bike", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow", "table",
    "dog", "horse", "mbike", "person", "plant", "sheep", "sofa", "train", "tv",
];

impl IouReport {
    /// One header row of class names and one row of percentages, mIOU last.
    pub fn to_table(&self) -> String {
        let names: Vec<String> = if self.per_class.len() == PASCAL_CLASSES.len() {
            PASCAL_CLASSES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.per_class.len()).map(|c| format!("c{c}")).collect()
        };
        let mut header = String::from("Method");
        let mut row = String::from("ours  ");
        for (name, v) in names.iter().zip(&self.per_class) {
            let cell = match v {
                Some(iou) => format!("{:.1}", iou * 100.0),
                None => "-".to_string(),
            };
            let width = name.len().max(cell.len()).max(5);
            let _ = write!(header, " | {name:>width$}");
            let _ = write!(row, " | {cell:>width$}");
        }
        let _ = write!(header, " | {:>5}", "mIOU");
        let _ = write!(row, " | {:>5.1}", self.miou * 100.0);
        format!("{header}\n{row}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, v: &[u8]) -> LabelMask {
        LabelMask::new(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let gt = mask(3, 1, &[0, 1, 2]);
        let mut s = ConfusionState::new(3);
        confusion_accumulate(&gt, &gt, &mut s).unwrap();
        assert!(s.fp.iter().chain(&s.fn_).all(|&c| c == 0));
        assert_eq!(iou_report(&s).unwrap().miou, 1.0);
    }

    #[test]
    fn all_ignore_is_a_no_op() {
        let gt = mask(2, 2, &[255; 4]);
        let pred = mask(2, 2, &[0, 1, 1, 0]);
        let mut s = ConfusionState::new(21);
        confusion_accumulate(&pred, &gt, &mut s).unwrap();
        assert_eq!(s, ConfusionState::new(21));
        assert_eq!(iou_report(&s), Err(MetricsError::EmptyState));
    }

    #[test]
    fn hand_counted_two_by_two() {
        let gt = mask(2, 2, &[0, 0, 1, 1]);
        let pred = mask(2, 2, &[0, 1, 1, 1]);
        let mut s = ConfusionState::new(21);
        confusion_accumulate(&pred, &gt, &mut s).unwrap();
        assert_eq!((s.tp[0], s.fp[0], s.fn_[0]), (1, 0, 1));
        assert_eq!((s.tp[1], s.fp[1], s.fn_[1]), (2, 1, 0));
        let r = iou_report(&s).unwrap();
        assert_eq!(r.per_class[0], Some(0.5));
        assert_eq!(r.per_class[1], Some(2.0 / 3.0));
        assert!(r.per_class[2..].iter().all(Option::is_none));
        assert!((r.miou - 0.583_333_333_333).abs() < 1e-9);
    }

    #[test]
    fn shape_and_range_errors() {
        let mut s = ConfusionState::new(2);
        assert!(matches!(
            confusion_accumulate(&mask(2, 1, &[0, 0]), &mask(1, 2, &[0, 0]), &mut s),
            Err(MetricsError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            confusion_accumulate(&mask(1, 1, &[5]), &mask(1, 1, &[0]), &mut s),
            Err(MetricsError::LabelOutOfRange { label: 5, .. })
        ));
    }

    #[test]
    fn merge_adds_counters() {
        let mut a = ConfusionState::new(2);
        let mut b = ConfusionState::new(2);
        confusion_accumulate(&mask(2, 1, &[0, 1]), &mask(2, 1, &[0, 0]), &mut a).unwrap();
        confusion_accumulate(&mask(1, 1, &[1]), &mask(1, 1, &[1]), &mut b).unwrap();
        let mut whole = ConfusionState::new(2);
        confusion_accumulate(&mask(2, 1, &[0, 1]), &mask(2, 1, &[0, 0]), &mut whole).unwrap();
        confusion_accumulate(&mask(1, 1, &[1]), &mask(1, 1, &[1]), &mut whole).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, whole);
        assert!(a.merge(&ConfusionState::new(3)).is_err());
    }

    #[test]
    fn table_and_json_layout() {
        let r = IouReport {
            per_class: vec![Some(0.5), None, Some(1.0)],
            miou: 0.75,
        };
        let t = r.to_table();
        assert!(t.starts_with("Method |    c0 |    c1 |    c2 |  mIOU\n"));
        assert!(t.contains("|  50.0 |     - | 100.0 |  75.0"));
        let j = serde_json::to_value(&r).unwrap();
        assert_eq!(j["per_class"]["01"], serde_json::Value::Null);
        assert_eq!(j["miou"], 0.75);
    }
}
