//! Manifest construction: extent filtering, patient-stratified splitting
//! and tumor-size balancing.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::eval::tumor_size_stats;
use crate::phantoms::box_volume_cm3;
use crate::volume::{load_volume, real_extent, DatasetManifest, Split, SupervisionKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub case_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub manifest: DatasetManifest,
    pub dropped: Vec<DroppedRecord>,
}

/// Keeps records whose Z extent lies in `[z_min_cm, z_max_cm]` (inclusive).
/// Unreadable images are dropped with the error as reason.
pub fn filter_by_extent(manifest: &DatasetManifest, z_min_cm: f64, z_max_cm: f64) -> FilterOutcome {
    let mut dropped = Vec::new();
    let kept = manifest.filtered(|r| {
        let reason = match load_volume(manifest.resolve(&r.image_path)) {
            Err(e) => format!("unreadable image: {e}"),
            Ok(v) => {
                let z_cm = real_extent(&v)[2] / 10.0;
                if (z_min_cm..=z_max_cm).contains(&z_cm) {
                    return true;
                }
                format!("Z extent {z_cm:.1} cm outside [{z_min_cm}, {z_max_cm}] cm")
            }
        };
        log::info!("dropping {}: {reason}", r.case_id);
        dropped.push(DroppedRecord {
            case_id: r.case_id.clone(),
            reason,
        });
        false
    });
    FilterOutcome {
        manifest: kept,
        dropped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub test_fraction: f64,
    /// Share of the non-test remainder that goes to validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.15,
            validation_fraction: 0.15,
            seed: 0,
        }
    }
}

/// Moves whole patients from `pool` into a new group until the group holds
/// `target` cases, skipping patients that would overshoot.
fn take_patients(pool: &mut Vec<(String, usize)>, target: usize) -> Vec<String> {
    let mut taken = Vec::new();
    let mut count = 0;
    pool.retain(|(p, n)| {
        if count + n <= target && count < target {
            count += n;
            taken.push(p.clone());
            false
        } else {
            true
        }
    });
    taken
}

/// Assigns train/validation/test per patient, deterministically for a seed.
pub fn split_dataset(manifest: &DatasetManifest, cfg: &SplitConfig) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&cfg.test_fraction) || !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(invalid!("split fractions must lie in [0, 1)"));
    }
    let mut per_patient: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &manifest.records {
        if r.patient_id.is_empty() {
            return Err(invalid!("case {} has no patient_id", r.case_id));
        }
        *per_patient.entry(&r.patient_id).or_default() += 1;
    }
    if per_patient.len() < 3 {
        return Err(invalid!(
            "splitting needs at least 3 patients, found {}",
            per_patient.len()
        ));
    }
    let mut pool: Vec<(String, usize)> = per_patient
        .into_iter()
        .map(|(p, n)| (p.to_string(), n))
        .collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let total = manifest.len();
    let test = take_patients(
        &mut pool,
        (cfg.test_fraction * total as f64).round() as usize,
    );
    let remaining: usize = pool.iter().map(|(_, n)| n).sum();
    let mut validation = take_patients(
        &mut pool,
        (cfg.validation_fraction * remaining as f64).round() as usize,
    );
    if pool.is_empty() {
        // keep at least one training patient
        if let Some(p) = validation.pop() {
            pool.push((p, 0));
        }
    }

    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    for p in &test {
        assignment.insert(p, Split::Test);
    }
    for p in &validation {
        assignment.insert(p, Split::Validation);
    }
    let mut out = manifest.clone();
    out.split = manifest
        .records
        .iter()
        .map(|r| {
            let s = assignment
                .get(r.patient_id.as_str())
                .copied()
                .unwrap_or(Split::Train);
            (r.case_id.clone(), s)
        })
        .collect();
    Ok(out)
}

/// Fills missing `tumor_volume_cm3` values: from the mask for strong and
/// pseudo records, from the box proxy (image spacing) for weak records.
pub fn populate_tumor_volumes(manifest: &DatasetManifest) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    for r in &mut out.records {
        if r.tumor_volume_cm3.is_some() {
            continue;
        }
        match (r.supervision_kind, &r.mask_path, &r.boxes) {
            (SupervisionKind::Weak, _, Some(boxes)) => {
                let spacing = load_volume(manifest.resolve(&r.image_path))?.spacing();
                r.tumor_volume_cm3 = Some(box_volume_cm3(boxes, spacing));
            }
            (_, Some(mask), _) => {
                let stats = tumor_size_stats(&load_volume(manifest.resolve(mask))?);
                r.tumor_volume_cm3 = Some(stats.iter().map(|s| s.volume_cm3).sum());
                r.tumor_diameter_mm = r
                    .tumor_diameter_mm
                    .or_else(|| stats.iter().map(|s| s.diameter_mm).reduce(f64::max));
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `round(max_count / count)` per bin, at least 1; empty bins get 1.
pub fn weights_from_bin_counts(counts: &[usize]) -> Vec<u32> {
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                1
            } else {
                ((max / c as f64).round() as u32).max(1)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceConfig {
    pub bins: usize,
    /// Also weight validation records by the train-split bins.
    pub include_validation: bool,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            bins: 4,
            include_validation: false,
        }
    }
}

/// Assigns duplication counts that flatten the tumor-volume distribution of
/// the train split over `bins` quantile bins. Test (and by default
/// validation) records get weight 1.
pub fn balance_by_size(manifest: &DatasetManifest, cfg: &BalanceConfig) -> Result<DatasetManifest> {
    if cfg.bins == 0 {
        return Err(invalid!("balancing needs at least one bin"));
    }
    let mut train_volumes = Vec::new();
    for r in manifest.records_in(Split::Train) {
        let v = r
            .tumor_volume_cm3
            .ok_or_else(|| invalid!("train case {} has no tumor_volume_cm3", r.case_id))?;
        train_volumes.push(v);
    }
    if train_volumes.is_empty() {
        return Err(invalid!("cannot balance: the train split is empty"));
    }
    train_volumes.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..cfg.bins)
        .map(|k| quantile(&train_volumes, k as f64 / cfg.bins as f64))
        .collect();
    let bin_of = |v: f64| edges.iter().filter(|&&e| v > e).count();
    let mut counts = vec![0usize; cfg.bins];
    for &v in &train_volumes {
        counts[bin_of(v)] += 1;
    }
    let weights = weights_from_bin_counts(&counts);

    let mut out = manifest.clone();
    out.sample_weight = manifest
        .records
        .iter()
        .map(|r| {
            let weighted = match manifest.split_of(&r.case_id) {
                Some(Split::Train) => true,
                Some(Split::Validation) => cfg.include_validation,
                _ => false,
            };
            let w = match (weighted, r.tumor_volume_cm3) {
                (true, Some(v)) => weights[bin_of(v)],
                _ => 1,
            };
            (r.case_id.clone(), w)
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::AnnotationRecord;
    use std::path::PathBuf;

    fn record(case: &str, patient: &str, vol: f64) -> AnnotationRecord {
        AnnotationRecord {
            case_id: case.into(),
            patient_id: patient.into(),
            image_path: PathBuf::from(format!("{case}.nii")),
            supervision_kind: SupervisionKind::Strong,
            mask_path: Some(PathBuf::from(format!("{case}_m.nii"))),
            boxes: None,
            lungmask_path: None,
            tumor_volume_cm3: Some(vol),
            tumor_diameter_mm: None,
            source: None,
        }
    }

    fn single_scan(n: usize) -> DatasetManifest {
        DatasetManifest::new(
            (0..n)
                .map(|i| record(&format!("c{i}"), &format!("p{i}"), i as f64))
                .collect(),
            ".",
        )
    }

    #[test]
    fn weights_example() {
        assert_eq!(weights_from_bin_counts(&[40, 20, 10, 10]), vec![1, 2, 4, 4]);
    }

    #[test]
    fn split_counts_and_determinism() {
        let m = single_scan(100);
        let cfg = SplitConfig {
            seed: 7,
            ..Default::default()
        };
        let a = split_dataset(&m, &cfg).unwrap();
        let n_test = a.split.values().filter(|&&s| s == Split::Test).count();
        assert_eq!(n_test, 15);
        assert_eq!(a, split_dataset(&m, &cfg).unwrap());
        a.validate().unwrap();
    }

    #[test]
    fn multi_scan_patient_stays_together() {
        let mut recs: Vec<_> = (0..20)
            .map(|i| record(&format!("c{i}"), &format!("p{i}"), 1.0))
            .collect();
        for k in 0..5 {
            recs.push(record(&format!("multi{k}"), "pm", 1.0));
        }
        let m = DatasetManifest::new(recs, ".");
        for seed in 0..10 {
            let s = split_dataset(
                &m,
                &SplitConfig {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            let splits: std::collections::HashSet<_> =
                (0..5).map(|k| s.split[&format!("multi{k}")]).collect();
            assert_eq!(splits.len(), 1);
        }
    }

    #[test]
    fn too_few_patients() {
        assert!(split_dataset(&single_scan(2), &SplitConfig::default()).is_err());
    }

    #[test]
    fn balance_rules() {
        let mut m = single_scan(8);
        // train volumes 1,1,1,1,1,1 then 50; one test case with huge volume
        for (i, r) in m.records.iter_mut().enumerate() {
            r.tumor_volume_cm3 = Some(if i == 6 { 50.0 } else { 1.0 });
            let s = if i == 7 { Split::Test } else { Split::Train };
            m.split.insert(r.case_id.clone(), s);
        }
        m.records[7].tumor_volume_cm3 = Some(1000.0);
        let b = balance_by_size(&m, &BalanceConfig::default()).unwrap();
        assert_eq!(b.sample_weight["c7"], 1);
        assert_eq!(b.sample_weight["c6"], 6);
        assert_eq!(b.sample_weight["c0"], 1);

        let mut same = single_scan(8);
        for r in same.records.iter_mut() {
            r.tumor_volume_cm3 = Some(3.0);
            same.split.insert(r.case_id.clone(), Split::Train);
        }
        let b = balance_by_size(&same, &BalanceConfig::default()).unwrap();
        assert!(b.sample_weight.values().all(|&w| w == 1));

        let mut no_train = single_scan(3);
        for r in &no_train.records.clone() {
            no_train.split.insert(r.case_id.clone(), Split::Test);
        }
        assert!(balance_by_size(&no_train, &BalanceConfig::default()).is_err());
    }
}
