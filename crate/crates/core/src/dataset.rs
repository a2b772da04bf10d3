//! Turns manifest records into preprocessed cases and network samples.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::eval::{component_boxes, connected_components, Connectivity};
use crate::nn::Tensor;
use crate::preprocess::{
    apply_crop, centroid, lung_regions, make_guidance, pad_to_multiple, preprocess_image,
    region_around, resample_to_grid, Annotation, CropGeometry, CropRegion, GuidanceMode,
    Interpolation, PreprocessConfig,
};
use crate::train::TrainSample;
use crate::volume::{
    load_volume, rasterize_boxes, save_volume, AnnotationRecord, DatasetManifest, Volume,
};

/// A case on the preprocessing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCase {
    pub case_id: String,
    pub image: Volume,
    pub mask: Option<Volume>,
    pub lungmask: Option<Volume>,
    /// Rasterized boxes (given for weak records, derived from the mask
    /// otherwise).
    pub box_mask: Option<Volume>,
    pub native_shape: [usize; 3],
    pub native_spacing: [f64; 3],
    pub native_origin: [f64; 3],
}

fn nearest_to(v: &Volume, like: &Volume) -> Volume {
    resample_to_grid(v, like.spacing(), like.shape(), Interpolation::Nearest)
}

/// Loads and preprocesses one record. Masks are resampled onto the exact
/// grid of the preprocessed image.
pub fn prepare_case(
    manifest: &DatasetManifest,
    r: &AnnotationRecord,
    cfg: &PreprocessConfig,
) -> Result<PreparedCase> {
    let raw = load_volume(manifest.resolve(&r.image_path))?;
    let image = preprocess_image(&raw, cfg).map_err(|e| invalid!("case {}: {e}", r.case_id))?;
    let native_mask = r
        .mask_path
        .as_ref()
        .map(|p| load_volume(manifest.resolve(p)))
        .transpose()?;
    let load_aligned = |v: Volume, what: &str| -> Result<Volume> {
        if v.shape() != raw.shape() {
            return Err(invalid!(
                "case {}: {what} shape {:?} differs from image shape {:?}",
                r.case_id,
                v.shape(),
                raw.shape()
            ));
        }
        Ok(nearest_to(&v, &image))
    };
    let boxes = match (&r.boxes, &native_mask) {
        (Some(b), _) if !b.is_empty() => Some(rasterize_boxes(b, raw.shape())?),
        (_, Some(m)) => Some(rasterize_boxes(&component_boxes(m.data()), raw.shape())?),
        _ => None,
    };
    let box_mask = boxes
        .map(|b| load_aligned(raw.with_data(b)?, "box mask"))
        .transpose()?;
    let mask = native_mask.map(|m| load_aligned(m, "mask")).transpose()?;
    let lungmask = r
        .lungmask_path
        .as_ref()
        .map(|p| load_aligned(load_volume(manifest.resolve(p))?, "lung mask"))
        .transpose()?;
    Ok(PreparedCase {
        case_id: r.case_id.clone(),
        image,
        mask,
        lungmask,
        box_mask,
        native_shape: raw.shape(),
        native_spacing: raw.spacing(),
        native_origin: raw.origin(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheStamp {
    key: String,
    has_mask: bool,
    has_lungmask: bool,
    has_box_mask: bool,
    geometry: CropGeometry,
}

/// On-disk cache of prepared cases keyed by record content and
/// preprocessing configuration.
#[derive(Debug, Clone)]
pub struct CaseCache {
    pub dir: PathBuf,
}

impl CaseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<CaseCache> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(CaseCache { dir })
    }

    fn key(r: &AnnotationRecord, cfg: &PreprocessConfig) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(r).expect("record serializes"));
        h.update(serde_json::to_vec(cfg).expect("config serializes"));
        hex::encode(h.finalize())
    }

    fn path(&self, case: &str, part: &str) -> PathBuf {
        self.dir.join(format!("{case}_{part}"))
    }

    /// Returns the cached case, preparing and storing it on a miss. The
    /// flag reports whether the cache was hit.
    pub fn get(
        &self,
        manifest: &DatasetManifest,
        r: &AnnotationRecord,
        cfg: &PreprocessConfig,
    ) -> Result<(PreparedCase, bool)> {
        let key = Self::key(r, cfg);
        let stamp_path = self.path(&r.case_id, "prep.json");
        if let Ok(text) = fs::read_to_string(&stamp_path) {
            if let Ok(stamp) = serde_json::from_str::<CacheStamp>(&text) {
                if stamp.key == key {
                    if let Ok(case) = self.load(&r.case_id, &stamp) {
                        return Ok((case, true));
                    }
                }
            }
        }
        let case = prepare_case(manifest, r, cfg)?;
        self.store(&case, key)?;
        Ok((case, false))
    }

    fn load(&self, case_id: &str, stamp: &CacheStamp) -> Result<PreparedCase> {
        let opt = |flag: bool, part: &str| -> Result<Option<Volume>> {
            flag.then(|| load_volume(self.path(case_id, part)))
                .transpose()
        };
        let g = &stamp.geometry;
        Ok(PreparedCase {
            case_id: case_id.to_string(),
            image: load_volume(self.path(case_id, "image.nii.gz"))?,
            mask: opt(stamp.has_mask, "mask.nii.gz")?,
            lungmask: opt(stamp.has_lungmask, "lungmask.nii.gz")?,
            box_mask: opt(stamp.has_box_mask, "boxmask.nii.gz")?,
            native_shape: g.native_shape,
            native_spacing: g.native_spacing,
            native_origin: g.native_origin,
        })
    }

    fn store(&self, c: &PreparedCase, key: String) -> Result<()> {
        save_volume(&c.image, self.path(&c.case_id, "image.nii.gz"))?;
        for (v, part) in [
            (&c.mask, "mask.nii.gz"),
            (&c.lungmask, "lungmask.nii.gz"),
            (&c.box_mask, "boxmask.nii.gz"),
        ] {
            if let Some(v) = v {
                save_volume(v, self.path(&c.case_id, part))?;
            }
        }
        let stamp = CacheStamp {
            key,
            has_mask: c.mask.is_some(),
            has_lungmask: c.lungmask.is_some(),
            has_box_mask: c.box_mask.is_some(),
            geometry: CropGeometry {
                native_shape: c.native_shape,
                native_spacing: c.native_spacing,
                native_origin: c.native_origin,
                resampled_shape: c.image.shape(),
                resampled_spacing: c.image.spacing(),
                regions: Vec::new(),
            },
        };
        let p = self.path(&c.case_id, "prep.json");
        let text = serde_json::to_string_pretty(&stamp).map_err(|e| Error::json(&p, e))?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

/// Teacher input for one tumor: the CT crop plus the guidance channel.
pub fn teacher_input(
    image: &Volume,
    annotation: &Array3<f32>,
    region: &CropRegion,
    mode: GuidanceMode,
    sigma: f64,
) -> Result<Tensor> {
    let crop = apply_crop(image, region)?;
    let ann = apply_crop(&image.with_data(annotation.clone())?, region)?;
    let guidance = make_guidance(Annotation::Mask(ann.data()), crop.shape(), mode, sigma)?;
    let guidance = crop.with_data(guidance)?;
    Tensor::from_volumes(&[&crop, &guidance])
}

/// One teacher sample per 26-connected tumor of a strong case, each
/// centred on that tumor and supervised with that tumor alone.
pub fn teacher_samples(
    case: &PreparedCase,
    mode: GuidanceMode,
    cfg: &PreprocessConfig,
) -> Result<Vec<TrainSample>> {
    let mask = case
        .mask
        .as_ref()
        .ok_or_else(|| invalid!("case {} has no mask for teacher training", case.case_id))?;
    let labeling = connected_components(mask.data(), Connectivity::TwentySix);
    (1..=labeling.count as u32)
        .map(|l| {
            let single = labeling.labels.mapv(|v| (v == l) as u8 as f32);
            let c = centroid(&single).expect("component is non-empty");
            let region = region_around(c, mask.shape(), cfg.crop_size);
            let input = teacher_input(&case.image, &single, &region, mode, cfg.guidance_sigma)?;
            let target = apply_crop(&mask.with_data(single)?, &region)?;
            Ok(TrainSample {
                case_id: format!("{}#{l}", case.case_id),
                input,
                target: Tensor::from_volumes(&[&target])?,
            })
        })
        .collect()
}

/// Per-lung student crops padded to multiples of `divisor`.
pub fn student_regions(
    case: &PreparedCase,
    cfg: &PreprocessConfig,
    divisor: usize,
) -> Result<Vec<CropRegion>> {
    let lungmask = case.lungmask.as_ref().ok_or_else(|| {
        invalid!(
            "case {} has no lung mask; supply one (labels 1 = right, 2 = left) via lungmask_path",
            case.case_id
        )
    })?;
    lung_crop_regions(lungmask, cfg, divisor)
}

/// Lung regions of a preprocessed lung mask, padded so every extent is a
/// multiple of both `pad_multiple` and the network divisor.
pub fn lung_crop_regions(
    lungmask: &Volume,
    cfg: &PreprocessConfig,
    divisor: usize,
) -> Result<Vec<CropRegion>> {
    let multiple = cfg.pad_multiple.max(1).max(divisor);
    let multiple = multiple.div_ceil(divisor) * divisor;
    Ok(lung_regions(lungmask, cfg.lung_margin_mm)?
        .into_iter()
        .map(|(_, r)| pad_to_multiple(&r, lungmask.shape(), multiple))
        .collect())
}

/// Student samples (one per lung). Target channel 0 is the mask; with two
/// heads channel 1 is the box mask.
pub fn student_samples(
    case: &PreparedCase,
    cfg: &PreprocessConfig,
    divisor: usize,
    heads: usize,
) -> Result<Vec<TrainSample>> {
    let mask = case
        .mask
        .as_ref()
        .ok_or_else(|| invalid!("case {} has no mask for student training", case.case_id))?;
    let box_mask = match heads {
        1 => None,
        _ => Some(case.box_mask.as_ref().ok_or_else(|| {
            invalid!(
                "case {} has no box annotation for dual-output training",
                case.case_id
            )
        })?),
    };
    student_regions(case, cfg, divisor)?
        .into_iter()
        .enumerate()
        .map(|(i, region)| {
            let input = apply_crop(&case.image, &region)?;
            let m = apply_crop(mask, &region)?;
            let target = match box_mask {
                None => Tensor::from_volumes(&[&m])?,
                Some(b) => Tensor::from_volumes(&[&m, &apply_crop(b, &region)?])?,
            };
            Ok(TrainSample {
                case_id: format!("{}#lung{}", case.case_id, i + 1),
                input: Tensor::from_volumes(&[&input])?,
                target,
            })
        })
        .collect()
}

/// Writes a volume next to others of a result tree, creating parents.
pub fn save_in(dir: &Path, name: &str, v: &Volume) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(name);
    save_volume(v, &p)?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantoms::{generate_cohort, CohortConfig};

    #[test]
    fn samples_from_phantom_cohort() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CohortConfig {
            shape: [32; 3],
            size_distribution: crate::phantoms::SizeDistribution::Fixed { radius_mm: 3.0 },
            ..Default::default()
        };
        let files = generate_cohort(2, 1, &cfg, 3, dir.path()).unwrap();
        let pc = PreprocessConfig {
            crop_size: [16; 3],
            ..Default::default()
        };
        let cache = CaseCache::new(dir.path().join("cache")).unwrap();
        let strong = &files.manifest.records[0];
        let (case, hit) = cache.get(&files.manifest, strong, &pc).unwrap();
        assert!(!hit);
        let (again, hit) = cache.get(&files.manifest, strong, &pc).unwrap();
        assert!(hit);
        assert_eq!(case, again);

        let ts = teacher_samples(&case, GuidanceMode::Box, &pc).unwrap();
        assert!(!ts.is_empty());
        assert_eq!(ts[0].input.channels, 2);
        assert_eq!(ts[0].input.dims, [16; 3]);

        let ss = student_samples(&case, &pc, 16, 2).unwrap();
        assert_eq!(ss.len(), 2);
        for s in &ss {
            assert!(s.input.dims.iter().all(|d| d % 16 == 0));
            assert_eq!(s.target.channels, 2);
        }

        let weak = &files.manifest.records[1];
        let (wc, _) = cache.get(&files.manifest, weak, &pc).unwrap();
        assert!(wc.mask.is_none() && wc.box_mask.is_some());
        assert!(student_samples(&wc, &pc, 16, 1).is_err());
    }
}
