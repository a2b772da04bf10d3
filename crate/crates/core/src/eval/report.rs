use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{dsc, dsc_tp, match_objects, object_metrics, MatchConfig, ObjectMatch};
use crate::error::{invalid, Result};
use crate::volume::nifti::load_volume;
use crate::volume::DatasetManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub dsc: f64,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    /// DSC-TP values contributed by this case (empty without detections).
    pub dsc_tp: Vec<f64>,
    pub matches: Vec<ObjectMatch>,
}

impl CaseMetrics {
    pub fn compute(
        case_id: impl Into<String>,
        source: Option<String>,
        pred: &Array3<f32>,
        gt: &Array3<f32>,
        cfg: &MatchConfig,
    ) -> Result<CaseMetrics> {
        let m = match_objects(pred, gt, cfg)?;
        let om = object_metrics(&m);
        Ok(CaseMetrics {
            case_id: case_id.into(),
            source,
            dsc: dsc(pred, gt)?,
            f1: om.f1,
            recall: om.recall,
            precision: om.precision,
            dsc_tp: dsc_tp(&m, cfg.dsc_tp_mode),
            matches: m.gt,
        })
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cases: usize,
    pub dsc: Option<MeanStd>,
    pub dsc_tp: Option<MeanStd>,
    pub f1: Option<MeanStd>,
    pub recall: Option<MeanStd>,
    pub precision: Option<MeanStd>,
}

impl Aggregate {
    pub fn of<'a>(cases: impl IntoIterator<Item = &'a CaseMetrics>) -> Aggregate {
        let cases: Vec<&CaseMetrics> = cases.into_iter().collect();
        let col = |f: fn(&CaseMetrics) -> f64| {
            MeanStd::of(&cases.iter().map(|c| f(c)).collect::<Vec<_>>())
        };
        let tp: Vec<f64> = cases
            .iter()
            .flat_map(|c| c.dsc_tp.iter().copied())
            .collect();
        Aggregate {
            cases: cases.len(),
            dsc: col(|c| c.dsc),
            dsc_tp: MeanStd::of(&tp),
            f1: col(|c| c.f1),
            recall: col(|c| c.recall),
            precision: col(|c| c.precision),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: MatchConfig,
    pub cases: Vec<CaseMetrics>,
    pub overall: Aggregate,
    /// Aggregates per source tag; untagged cases fall under "untagged".
    pub subsets: BTreeMap<String, Aggregate>,
    pub missing: Vec<String>,
}

pub const UNTAGGED: &str = "untagged";
pub const TABLE_COLUMNS: [&str; 5] = ["DSC", "DSC-TP", "F1-score", "Recall", "Precision"];

impl EvalReport {
    pub fn from_cases(
        config: MatchConfig,
        cases: Vec<CaseMetrics>,
        missing: Vec<String>,
    ) -> EvalReport {
        let mut by_source: BTreeMap<String, Vec<&CaseMetrics>> = BTreeMap::new();
        for c in &cases {
            let tag = c.source.clone().unwrap_or_else(|| UNTAGGED.to_string());
            by_source.entry(tag).or_default().push(c);
        }
        let subsets = by_source
            .into_iter()
            .map(|(k, v)| (k, Aggregate::of(v)))
            .collect();
        EvalReport {
            overall: Aggregate::of(&cases),
            config,
            cases,
            subsets,
            missing,
        }
    }

    /// Plain-text table: one row for all cases and one per source subset,
    /// values in percent.
    pub fn table(&self) -> String {
        let mut rows = vec![("all".to_string(), &self.overall)];
        if self.subsets.len() > 1 {
            rows.extend(self.subsets.iter().map(|(k, v)| (k.clone(), v)));
        }
        format_table(&rows)
    }
}

fn cell(v: &Option<MeanStd>) -> String {
    match v {
        Some(m) => format!("{:.1} ± {:.1}", 100.0 * m.mean, 100.0 * m.std),
        None => "n/a".to_string(),
    }
}

/// Formats named aggregates as rows under the standard metric columns.
pub fn format_table(rows: &[(String, &Aggregate)]) -> String {
    let mut grid: Vec<Vec<String>> = vec![std::iter::once("".to_string())
        .chain(TABLE_COLUMNS.iter().map(|s| s.to_string()))
        .collect()];
    for (name, a) in rows {
        grid.push(vec![
            name.clone(),
            cell(&a.dsc),
            cell(&a.dsc_tp),
            cell(&a.f1),
            cell(&a.recall),
            cell(&a.precision),
        ]);
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in grid.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        let _ = writeln!(out, "| {} |", line.join(" | "));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        }
    }
    out
}

/// Scores every ground-truth case that has a mask against the prediction
/// with the same case id. Cases without a prediction or a GT mask are
/// listed in `missing` and excluded.
pub fn evaluate_dataset(
    pred: &DatasetManifest,
    gt: &DatasetManifest,
    cfg: &MatchConfig,
) -> Result<EvalReport> {
    let mut cases = Vec::new();
    let mut missing = Vec::new();
    for g in &gt.records {
        let (Some(gt_mask), Some(p)) = (g.mask_path.as_ref(), pred.get(&g.case_id)) else {
            log::warn!(
                "case {} has no prediction or no ground-truth mask; excluded",
                g.case_id
            );
            missing.push(g.case_id.clone());
            continue;
        };
        let Some(pred_mask) = p.mask_path.as_ref() else {
            log::warn!("prediction for {} has no mask_path; excluded", g.case_id);
            missing.push(g.case_id.clone());
            continue;
        };
        let gv = load_volume(gt.resolve(gt_mask))?;
        let pv = load_volume(pred.resolve(pred_mask))?;
        if gv.shape() != pv.shape() {
            return Err(invalid!(
                "case {}: prediction shape {:?} differs from ground truth {:?}",
                g.case_id,
                pv.shape(),
                gv.shape()
            ));
        }
        cases.push(CaseMetrics::compute(
            g.case_id.clone(),
            g.source.clone(),
            pv.data(),
            gv.data(),
            cfg,
        )?);
    }
    Ok(EvalReport::from_cases(*cfg, cases, missing))
}
