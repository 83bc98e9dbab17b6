//! Confusion matrices, per-class IoU, and analytic decoder cost.

mod flops;

pub use flops::{conv_macs, count_flops, linear_macs, DecoderKind, FlopsConfig, FlopsReport, MitConfig};

use std::fmt::Write as _;

use crate::data::{class_name, LabelMap, IGNORE_ID};
use crate::error::{Error, Result};

/// `counts[g * C + p]` = pixels with truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::contract(
                "confusion",
                format!("cannot merge {} with {} classes", other.num_classes, self.num_classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Tallies every pixel whose truth is not ignored.
pub fn update_confusion(cm: &mut ConfusionMatrix, predicted: &LabelMap, truth: &LabelMap) -> Result<()> {
    if (predicted.height, predicted.width) != (truth.height, truth.width) {
        return Err(Error::contract(
            "update_confusion",
            format!(
                "prediction {}x{} vs truth {}x{}",
                predicted.height, predicted.width, truth.height, truth.width
            ),
        ));
    }
    let c = cm.num_classes;
    if let Some(p) = predicted.ids.iter().find(|&&p| p as usize >= c) {
        return Err(Error::contract("update_confusion", format!("predicted id {p} outside 0..{c}")));
    }
    if let Some(g) = truth.ids.iter().find(|&&g| g != IGNORE_ID && g as usize >= c) {
        return Err(Error::contract("update_confusion", format!("truth id {g} outside 0..{c}")));
    }
    for (&p, &g) in predicted.ids.iter().zip(&truth.ids) {
        if g != IGNORE_ID {
            cm.counts[g as usize * c + p as usize] += 1;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    /// `None` marks a class absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// IoU per class from the confusion matrix; classes with an empty union are
/// absent and left out of the mean.
pub fn iou_report(cm: &ConfusionMatrix) -> Result<IoUReport> {
    let c = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let fn_: u64 = (0..c).map(|p| cm.get(k, p)).sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|g| cm.get(g, k)).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Data("empty evaluation: no class occurs in truth or prediction".into()));
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IoUReport { per_class, miou })
}

impl IoUReport {
    /// Aligned two-row table in class-id order, percentages with two
    /// decimals; absent classes print as `-`.
    pub fn to_text(&self) -> String {
        let c = self.per_class.len();
        let cells: Vec<(String, String)> = self
            .per_class
            .iter()
            .enumerate()
            .map(|(k, v)| (class_name(k, c), v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x))))
            .chain([("mIoU".to_string(), format!("{:.2}", 100.0 * self.miou))])
            .collect();
        let mut head = String::new();
        let mut vals = String::new();
        for (name, val) in &cells {
            let width = name.len().max(val.len());
            let _ = write!(head, "{name:>width$} ");
            let _ = write!(vals, "{val:>width$} ");
        }
        format!("{}\n{}\n", head.trim_end(), vals.trim_end())
    }

    /// Header line of class names then one line of IoU fractions; absent
    /// classes are empty fields.
    pub fn to_csv(&self) -> String {
        let c = self.per_class.len();
        let names: Vec<String> = (0..c).map(|k| class_name(k, c)).chain(["miou".to_string()]).collect();
        let vals: Vec<String> = self
            .per_class
            .iter()
            .map(|v| v.map_or(String::new(), |x| format!("{x:.6}")))
            .chain([format!("{:.6}", self.miou)])
            .collect();
        format!("{}\n{}\n", names.join(","), vals.join(","))
    }
}
