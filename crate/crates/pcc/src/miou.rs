//! Segmentation scoring: confusion-matrix accumulation and mean IoU.

use serde::{Deserialize, Serialize};

use crate::error::{PccError, Result};
use crate::pseudo::PseudoLabelMap;

/// Streaming confusion matrix over (ground truth, prediction) label pairs.
pub struct ConfusionAccumulator {
    num_classes: usize,
    ignore_index: Option<u8>,
    /// row = ground-truth class, column = predicted class
    counts: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize, ignore_index: Option<u8>) -> Self {
        ConfusionAccumulator {
            num_classes,
            ignore_index,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &PseudoLabelMap, gt: &PseudoLabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(PccError::shape(format!(
                "prediction {}x{} does not match ground truth {}x{} for {}",
                pred.height, pred.width, gt.height, gt.width, gt.source_id
            )));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if Some(g) == self.ignore_index {
                continue;
            }
            if (g as usize) >= c {
                return Err(PccError::format(format!(
                    "{}: ground-truth label {g} outside the {c}-class vocabulary",
                    gt.source_id
                )));
            }
            if (p as usize) >= c {
                return Err(PccError::format(format!(
                    "{}: predicted label {p} outside the {c}-class vocabulary",
                    pred.source_id
                )));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> IoUReport {
        let c = self.num_classes;
        let mut per_class = Vec::with_capacity(c);
        for k in 0..c {
            let tp = self.counts[k * c + k];
            let row: u64 = (0..c).map(|j| self.counts[k * c + j]).sum();
            let col: u64 = (0..c).map(|i| self.counts[i * c + k]).sum();
            let union = row + col - tp;
            // a class absent from both prediction and ground truth has no
            // defined IoU and is left out of the mean
            per_class.push(if union == 0 { None } else { Some(tp as f64 / union as f64) });
        }
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean_iou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        IoUReport {
            num_classes: c,
            per_class_iou: per_class,
            mean_iou,
            confusion: self.counts.clone(),
            evaluated_pixels: self.counts.iter().sum(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IoUReport {
    pub num_classes: usize,
    /// Indexed by class; `None` when the class appears in neither prediction
    /// nor ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over the defined entries of `per_class_iou`.
    pub mean_iou: f64,
    /// Row-major `num_classes x num_classes`; rows are ground truth.
    pub confusion: Vec<u64>,
    pub evaluated_pixels: u64,
}

impl IoUReport {
    /// Aligned text table, one row per class plus the mean.
    pub fn text_table(&self, names: Option<&[String]>) -> String {
        let label = |k: usize| -> String {
            match names {
                Some(ns) if k < ns.len() => ns[k].clone(),
                _ => format!("class {k}"),
            }
        };
        let width = (0..self.num_classes)
            .map(|k| label(k).len())
            .chain(std::iter::once("mean IoU".len()))
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        for k in 0..self.num_classes {
            let iou = match self.per_class_iou[k] {
                Some(v) => format!("{v:.4}"),
                None => "  n/a ".to_string(),
            };
            out.push_str(&format!("{:<width$}  {}\n", label(k), iou));
        }
        out.push_str(&format!("{:<width$}  {:.4}\n", "mean IoU", self.mean_iou));
        out
    }
}

/// Score a single prediction against a single ground-truth map.
pub fn compute_miou(
    pred: &PseudoLabelMap,
    gt: &PseudoLabelMap,
    num_classes: usize,
    ignore_index: Option<u8>,
) -> Result<IoUReport> {
    let mut acc = ConfusionAccumulator::new(num_classes, ignore_index);
    acc.add(pred, gt)?;
    Ok(acc.report())
}
