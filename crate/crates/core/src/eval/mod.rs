//! Segmentation and detection metrics: DSC, object-wise matching under an
//! overlap rule, F1/recall/precision, DSC over true positives, and tumor
//! size statistics.

mod components;
mod report;
mod size;

pub use components::{component_boxes, connected_components, Connectivity, Labeling};
pub use report::{
    evaluate_dataset, format_table, Aggregate, CaseMetrics, EvalReport, MeanStd, TABLE_COLUMNS,
};
pub use size::{tumor_size_stats, TumorSize};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Dice similarity coefficient of two binary masks (nonzero = foreground).
/// Two empty masks score 1; exactly one empty mask scores 0.
pub fn dsc(pred: &Array3<f32>, gt: &Array3<f32>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(invalid!(
            "dsc shape mismatch: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        ));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (a, b) = (a != 0.0, b != 0.0);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    Ok(dice_from_counts(both, p, g))
}

pub(crate) fn dice_from_counts(intersection: usize, a: usize, b: usize) -> f64 {
    match (a, b) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * intersection as f64 / (a + b) as f64,
    }
}

/// Which size an overlap is normalized by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapDenominator {
    /// The component being judged (GT component for detection, predicted
    /// component for true/false-positive status).
    #[default]
    Own,
    /// The union of components on the other side that touch it.
    Counterpart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DscTpMode {
    /// One value per detected GT component.
    #[default]
    PerObject,
    /// One value per image that has at least one detection.
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub tp_threshold: f64,
    pub connectivity: Connectivity,
    pub detection_denominator: OverlapDenominator,
    pub prediction_denominator: OverlapDenominator,
    pub dsc_tp_mode: DscTpMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            tp_threshold: 0.25,
            connectivity: Connectivity::TwentySix,
            detection_denominator: OverlapDenominator::Own,
            prediction_denominator: OverlapDenominator::Own,
            dsc_tp_mode: DscTpMode::PerObject,
        }
    }
}

/// Detection outcome for one ground-truth component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMatch {
    pub gt_component: u32,
    pub predicted_components: Vec<u32>,
    pub overlap_fraction: f64,
    pub is_tp: bool,
}

/// True/false-positive status of one predicted component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedObject {
    pub component: u32,
    pub gt_components: Vec<u32>,
    pub overlap_fraction: f64,
    pub is_tp: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub gt: Vec<ObjectMatch>,
    pub predicted: Vec<PredictedObject>,
    pub gt_labels: Labeling,
    pub pred_labels: Labeling,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Labels both masks and decides, per component, whether the overlap with
/// the other mask reaches `tp_threshold` (inclusive).
pub fn match_objects(pred: &Array3<f32>, gt: &Array3<f32>, cfg: &MatchConfig) -> Result<Matching> {
    if pred.shape() != gt.shape() {
        return Err(invalid!(
            "match_objects shape mismatch: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        ));
    }
    let gt_labels = connected_components(gt, cfg.connectivity);
    let pred_labels = connected_components(pred, cfg.connectivity);
    let (ng, np) = (gt_labels.count, pred_labels.count);
    let gt_sizes = gt_labels.sizes();
    let pred_sizes = pred_labels.sizes();

    // pairwise intersection counts; component counts are small
    let mut inter = vec![0usize; ng * np];
    let mut pred_in_gt = vec![0usize; np]; // |p ∩ GT|
    let mut gt_in_pred = vec![0usize; ng]; // |g ∩ P|
    for (&g, &p) in gt_labels.labels.iter().zip(pred_labels.labels.iter()) {
        if g > 0 && p > 0 {
            inter[(g as usize - 1) * np + p as usize - 1] += 1;
            pred_in_gt[p as usize - 1] += 1;
            gt_in_pred[g as usize - 1] += 1;
        }
    }

    let gt_matches = (0..ng)
        .map(|g| {
            let touching: Vec<u32> = (0..np)
                .filter(|&p| inter[g * np + p] > 0)
                .map(|p| p as u32 + 1)
                .collect();
            let den = match cfg.detection_denominator {
                OverlapDenominator::Own => gt_sizes[g],
                OverlapDenominator::Counterpart => {
                    touching.iter().map(|&p| pred_sizes[p as usize - 1]).sum()
                }
            };
            let overlap_fraction = ratio(gt_in_pred[g], den);
            ObjectMatch {
                gt_component: g as u32 + 1,
                is_tp: !touching.is_empty() && overlap_fraction >= cfg.tp_threshold,
                predicted_components: touching,
                overlap_fraction,
            }
        })
        .collect();

    let predicted = (0..np)
        .map(|p| {
            let touching: Vec<u32> = (0..ng)
                .filter(|&g| inter[g * np + p] > 0)
                .map(|g| g as u32 + 1)
                .collect();
            let den = match cfg.prediction_denominator {
                OverlapDenominator::Own => pred_sizes[p],
                OverlapDenominator::Counterpart => {
                    touching.iter().map(|&g| gt_sizes[g as usize - 1]).sum()
                }
            };
            let overlap_fraction = ratio(pred_in_gt[p], den);
            PredictedObject {
                component: p as u32 + 1,
                is_tp: !touching.is_empty() && overlap_fraction >= cfg.tp_threshold,
                gt_components: touching,
                overlap_fraction,
            }
        })
        .collect();

    Ok(Matching {
        gt: gt_matches,
        predicted,
        gt_labels,
        pred_labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Per-case object-wise scores. A case with neither GT nor predicted
/// components scores 1 on everything; predictions without any GT score
/// precision 0, recall 1, F1 0.
pub fn object_metrics(m: &Matching) -> ObjectMetrics {
    let n_gt = m.gt.len();
    let n_pred = m.predicted.len();
    if n_gt == 0 && n_pred == 0 {
        return ObjectMetrics {
            f1: 1.0,
            recall: 1.0,
            precision: 1.0,
        };
    }
    let recall = if n_gt == 0 {
        1.0
    } else {
        ratio(m.gt.iter().filter(|g| g.is_tp).count(), n_gt)
    };
    let precision = ratio(m.predicted.iter().filter(|p| p.is_tp).count(), n_pred);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ObjectMetrics {
        f1,
        recall,
        precision,
    }
}

/// DSC restricted to detected objects. Per-object mode yields one value per
/// detected GT component (against the union of predicted components that
/// touch it); per-image mode yields a single value for the union of all
/// detected components, or nothing when there are none.
pub fn dsc_tp(m: &Matching, mode: DscTpMode) -> Vec<f64> {
    let detected: Vec<&ObjectMatch> = m.gt.iter().filter(|g| g.is_tp).collect();
    if detected.is_empty() {
        return Vec::new();
    }
    let gl = &m.gt_labels.labels;
    let pl = &m.pred_labels.labels;
    let count = |gts: &[u32], preds: &[u32]| {
        let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
        for (&g, &p) in gl.iter().zip(pl.iter()) {
            let in_g = g > 0 && gts.contains(&g);
            let in_p = p > 0 && preds.contains(&p);
            a += in_g as usize;
            b += in_p as usize;
            both += (in_g && in_p) as usize;
        }
        dice_from_counts(both, a, b)
    };
    match mode {
        DscTpMode::PerObject => detected
            .iter()
            .map(|g| count(&[g.gt_component], &g.predicted_components))
            .collect(),
        DscTpMode::PerImage => {
            let gts: Vec<u32> = detected.iter().map(|g| g.gt_component).collect();
            let mut preds: Vec<u32> = detected
                .iter()
                .flat_map(|g| g.predicted_components.iter().copied())
                .collect();
            preds.sort_unstable();
            preds.dedup();
            vec![count(&gts, &preds)]
        }
    }
}
