//! CT preprocessing: intensity clipping, z-score normalization, resampling
//! to a fixed anisotropic grid, cropping and guidance-channel construction.
//!
//! The pipeline order is clip → z-score → resample → crop, with z-score
//! statistics taken over the whole clipped volume.

mod crop;
mod guidance;
mod resample;

pub use crop::{
    apply_crop, crop_per_lung, crop_tumor_centered, lung_regions, pad_to_multiple, region_around,
    stitch_into, CropGeometry, CropRegion,
};
pub use guidance::{centroid, make_guidance, Annotation, GuidanceMode};
pub use resample::{resample, resample_to_grid, Interpolation};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::volume::Volume;

pub const CLIP_LO: f32 = -1024.0;
pub const CLIP_HI: f32 = 1000.0;
pub const TARGET_SPACING: [f64; 3] = [1.0, 1.0, 1.5];
pub const TEACHER_CROP: [usize; 3] = [128, 128, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub clip_lo: f32,
    pub clip_hi: f32,
    pub target_spacing: [f64; 3],
    pub crop_size: [usize; 3],
    pub lung_margin_mm: f64,
    pub pad_multiple: usize,
    pub guidance_sigma: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            clip_lo: CLIP_LO,
            clip_hi: CLIP_HI,
            target_spacing: TARGET_SPACING,
            crop_size: TEACHER_CROP,
            lung_margin_mm: 10.0,
            pad_multiple: 16,
            guidance_sigma: 3.0,
        }
    }
}

pub fn clip_intensities(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(invalid!(
            "clip bounds must satisfy lo < hi, got [{lo}, {hi}]"
        ));
    }
    Ok(v.map(|x| x.clamp(lo, hi)))
}

/// Maps intensities to zero mean and unit (population) standard deviation.
pub fn zscore_normalize(v: &Volume) -> Result<Volume> {
    if v.len() < 2 {
        return Err(invalid!("z-score needs at least 2 voxels"));
    }
    let n = v.len() as f64;
    let mean = v.as_slice().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .as_slice()
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    if !(var > 0.0) {
        return Err(invalid!("volume has zero intensity variance"));
    }
    let inv_std = 1.0 / var.sqrt();
    Ok(v.map(|x| ((x as f64 - mean) * inv_std) as f32))
}

/// Clip, normalize and resample a raw CT volume.
pub fn preprocess_image(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    let clipped = clip_intensities(v, cfg.clip_lo, cfg.clip_hi)?;
    let normalized = zscore_normalize(&clipped)?;
    Ok(resample(
        &normalized,
        cfg.target_spacing,
        Interpolation::Linear,
    ))
}

/// Resample a label or lung mask onto the preprocessing grid.
pub fn preprocess_mask(v: &Volume, cfg: &PreprocessConfig) -> Volume {
    resample(v, cfg.target_spacing, Interpolation::Nearest)
}
