//! Pseudo-strong labels: a trained guided teacher segments every box stack
//! of a weakly annotated case.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::teacher_input;
use crate::error::{invalid, Error, Result};
use crate::eval::tumor_size_stats;
use crate::models::{Checkpoint, UNet};
use crate::preprocess::{
    apply_crop, centroid, preprocess_image, region_around, resample_to_grid, stitch_into,
    GuidanceMode, Interpolation, PreprocessConfig,
};
use crate::volume::{
    load_volume, rasterize_boxes, save_volume, AnnotationRecord, AxialBox, DatasetManifest,
    SupervisionKind, Volume,
};

/// Partitions boxes into tumors: two boxes join when their rectangles
/// overlap in-plane and their slices are at most `gap_tolerance + 1` apart.
/// Stacks are ordered by first slice, boxes within a stack by slice.
pub fn group_boxes_into_tumors(boxes: &[AxialBox], gap_tolerance: usize) -> Vec<Vec<AxialBox>> {
    let n = boxes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&boxes[i], &boxes[j]);
            if a.slice_index.abs_diff(b.slice_index) <= gap_tolerance + 1 && a.overlaps_in_plane(b)
            {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<AxialBox>> = Default::default();
    for (i, b) in boxes.iter().enumerate() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(*b);
    }
    let mut stacks: Vec<Vec<AxialBox>> = groups.into_values().collect();
    for s in &mut stacks {
        s.sort();
    }
    stacks.sort();
    stacks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub threshold: f32,
    pub gap_tolerance: usize,
    /// Zero the teacher output outside the stack's boxes.
    pub clip_to_box: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            threshold: 0.5,
            gap_tolerance: 1,
            clip_to_box: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub case_id: String,
    pub teacher_checkpoint: String,
    pub guidance: GuidanceMode,
    pub threshold: f32,
    pub clip_to_box: bool,
    pub stacks: usize,
    /// Indices of stacks for which the teacher predicted nothing.
    pub empty_stacks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoReport {
    pub records: usize,
    pub stacks: usize,
    pub empty_stacks: usize,
    pub flagged_cases: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PseudoOutcome {
    pub manifest: DatasetManifest,
    pub report: PseudoReport,
    pub manifest_path: PathBuf,
}

/// Guidance mode recorded in a teacher checkpoint, if any.
pub fn checkpoint_guidance(ckpt: &Checkpoint) -> Option<GuidanceMode> {
    serde_json::from_value(ckpt.header.metadata.get("guidance")?.clone()).ok()
}

/// Pseudo-labels one weak case; returns the native-geometry mask and the
/// indices of empty stacks.
pub fn pseudo_label_case(
    teacher: &UNet,
    raw: &Volume,
    boxes: &[AxialBox],
    mode: GuidanceMode,
    cfg: &DistillConfig,
    pc: &PreprocessConfig,
) -> Result<(Volume, usize, Vec<usize>)> {
    crate::nn::flush_subnormals();
    let image = preprocess_image(raw, pc)?;
    let mut full = ndarray::Array3::<f32>::zeros(image.shape());
    let stacks = group_boxes_into_tumors(boxes, cfg.gap_tolerance);
    let mut empty = Vec::new();
    for (k, stack) in stacks.iter().enumerate() {
        let native = raw.with_data(rasterize_boxes(stack, raw.shape())?)?;
        let on_grid = resample_to_grid(
            &native,
            image.spacing(),
            image.shape(),
            Interpolation::Nearest,
        );
        let c = centroid(on_grid.data())
            .ok_or_else(|| invalid!("box stack {k} vanished after resampling"))?;
        let region = region_around(c, image.shape(), pc.crop_size);
        let input = teacher_input(&image, on_grid.data(), &region, mode, pc.guidance_sigma)?;
        let out = teacher.forward_one(&input)?;
        let mut pred = ndarray::Array3::from_shape_vec(
            region.size,
            out.channel(0)
                .iter()
                .map(|&v| (v >= cfg.threshold) as u8 as f32)
                .collect(),
        )
        .expect("teacher output matches crop size");
        if cfg.clip_to_box {
            let b = apply_crop(&on_grid, &region)?;
            pred.zip_mut_with(b.data(), |p, &m| *p *= m);
        }
        if pred.iter().all(|&v| v == 0.0) {
            empty.push(k);
        }
        stitch_into(&mut full, &pred, &region)?;
    }
    let on_grid = image.with_data(full)?;
    let native = resample_to_grid(&on_grid, raw.spacing(), raw.shape(), Interpolation::Nearest);
    Ok((raw.with_data(native.into_data())?, stacks.len(), empty))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

/// Runs the teacher over every weak record of `manifest` and writes masks,
/// per-record provenance and, last, `pseudo_manifest.json` into `out_dir`.
pub fn pseudo_label(
    teacher_ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    mode: GuidanceMode,
    cfg: &DistillConfig,
    pc: &PreprocessConfig,
    out_dir: impl AsRef<Path>,
) -> Result<PseudoOutcome> {
    let spec = &teacher_ckpt.header.spec;
    if spec.in_channels != 2 {
        return Err(invalid!(
            "teacher must take 2 input channels (CT + guidance), checkpoint has {}",
            spec.in_channels
        ));
    }
    if let Some(trained) = checkpoint_guidance(teacher_ckpt) {
        if trained != mode {
            return Err(invalid!(
                "teacher was trained with {trained} guidance but {mode} was requested"
            ));
        }
    }
    let teacher = teacher_ckpt.to_model()?;
    let out_dir = absolute(out_dir.as_ref())?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let hash = teacher_ckpt.hash();

    let mut records = Vec::new();
    let mut report = PseudoReport {
        records: 0,
        stacks: 0,
        empty_stacks: 0,
        flagged_cases: Vec::new(),
    };
    for r in &manifest.records {
        if r.supervision_kind != SupervisionKind::Weak {
            continue;
        }
        let boxes = r
            .boxes
            .as_deref()
            .filter(|b| !b.is_empty())
            .ok_or_else(|| invalid!("weak case {} has no boxes", r.case_id))?;
        let raw = load_volume(manifest.resolve(&r.image_path))?;
        let (mask, stacks, empty) = pseudo_label_case(&teacher, &raw, boxes, mode, cfg, pc)?;
        let mask_path = out_dir.join(format!("{}_pseudo.nii.gz", r.case_id));
        save_volume(&mask, &mask_path)?;
        let prov = Provenance {
            case_id: r.case_id.clone(),
            teacher_checkpoint: hash.clone(),
            guidance: mode,
            threshold: cfg.threshold,
            clip_to_box: cfg.clip_to_box,
            stacks,
            empty_stacks: empty.clone(),
        };
        let prov_path = out_dir.join(format!("{}_provenance.json", r.case_id));
        fs::write(
            &prov_path,
            serde_json::to_string_pretty(&prov).map_err(|e| Error::json(&prov_path, e))?,
        )
        .map_err(|e| Error::io(&prov_path, e))?;
        if !empty.is_empty() {
            log::warn!(
                "{}: teacher output empty for {} of {stacks} tumor(s)",
                r.case_id,
                empty.len()
            );
            report.flagged_cases.push(r.case_id.clone());
        }
        report.records += 1;
        report.stacks += stacks;
        report.empty_stacks += empty.len();

        let stats = tumor_size_stats(&mask);
        records.push(AnnotationRecord {
            supervision_kind: SupervisionKind::Pseudo,
            image_path: absolute(&manifest.resolve(&r.image_path))?,
            lungmask_path: r
                .lungmask_path
                .as_ref()
                .map(|p| absolute(&manifest.resolve(p)))
                .transpose()?,
            mask_path: Some(mask_path),
            tumor_volume_cm3: Some(stats.iter().map(|s| s.volume_cm3).sum()),
            tumor_diameter_mm: stats.iter().map(|s| s.diameter_mm).reduce(f64::max),
            ..r.clone()
        });
    }
    let mut pseudo = DatasetManifest::new(records, &out_dir).rebase(&out_dir);
    pseudo.split = manifest
        .split
        .iter()
        .filter(|(k, _)| pseudo.get(k).is_some())
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    let report_path = out_dir.join("pseudo_report.json");
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::json(&report_path, e))?,
    )
    .map_err(|e| Error::io(&report_path, e))?;
    let manifest_path = out_dir.join("pseudo_manifest.json");
    pseudo.save(&manifest_path)?;
    Ok(PseudoOutcome {
        manifest: pseudo,
        report,
        manifest_path,
    })
}
