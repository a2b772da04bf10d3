use std::fs;
use std::path::Path;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use super::guidance::centroid;
use crate::error::{invalid, Error, Result};
use crate::volume::{Shape3, Volume};

/// Window geometry within a volume. The window spans volume indices
/// `start - pad_low .. start - pad_low + size` per axis; the part outside
/// the volume is zero-filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub start: [usize; 3],
    pub size: [usize; 3],
    pub pad_low: [usize; 3],
    pub pad_high: [usize; 3],
}

impl CropRegion {
    /// Region covering `lo..=hi` with no padding.
    pub fn from_bounds(lo: [usize; 3], hi: [usize; 3]) -> CropRegion {
        CropRegion {
            start: lo,
            size: std::array::from_fn(|a| hi[a] - lo[a] + 1),
            pad_low: [0; 3],
            pad_high: [0; 3],
        }
    }

    /// Extent of the window that lies inside the volume.
    pub fn inner_size(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.size[a] - self.pad_low[a] - self.pad_high[a])
    }

    pub fn check_within(&self, shape: Shape3) -> Result<()> {
        for a in 0..3 {
            if self.size[a] == 0 || self.pad_low[a] + self.pad_high[a] > self.size[a] {
                return Err(invalid!("malformed crop region {self:?}"));
            }
            if self.start[a] + self.inner_size()[a] > shape[a] {
                return Err(invalid!(
                    "crop region {self:?} exceeds volume shape {shape:?}"
                ));
            }
        }
        Ok(())
    }
}

/// Window of `size` centred on `center` (rounded), shifted inward where it
/// would cross a border and zero-padded only on axes where the volume is
/// smaller than the window.
pub fn region_around(center: [f64; 3], shape: Shape3, size: [usize; 3]) -> CropRegion {
    let mut r = CropRegion {
        start: [0; 3],
        size,
        pad_low: [0; 3],
        pad_high: [0; 3],
    };
    for a in 0..3 {
        let (n, w) = (shape[a], size[a]);
        if n >= w {
            let c = center[a].round() as i64;
            r.start[a] = (c - (w / 2) as i64).clamp(0, (n - w) as i64) as usize;
        } else {
            r.pad_low[a] = (w - n) / 2;
            r.pad_high[a] = w - n - r.pad_low[a];
        }
    }
    r
}

/// Cuts the region out of `v`, zero-filling the padded part.
pub fn apply_crop(v: &Volume, region: &CropRegion) -> Result<Volume> {
    region.check_within(v.shape())?;
    let inner = region.inner_size();
    let (st, pl) = (region.start, region.pad_low);
    let mut out = Array3::<f32>::zeros(region.size);
    out.slice_mut(s![
        pl[0]..pl[0] + inner[0],
        pl[1]..pl[1] + inner[1],
        pl[2]..pl[2] + inner[2]
    ])
    .assign(&v.data().slice(s![
        st[0]..st[0] + inner[0],
        st[1]..st[1] + inner[1],
        st[2]..st[2] + inner[2]
    ]));
    let sp = v.spacing();
    let origin = std::array::from_fn(|a| v.origin()[a] + (st[a] as f64 - pl[a] as f64) * sp[a]);
    Volume::new(out, sp, origin)
}

/// Pastes the in-volume part of `crop` into `full` by voxelwise maximum.
pub fn stitch_into(full: &mut Array3<f32>, crop: &Array3<f32>, region: &CropRegion) -> Result<()> {
    let shape = [full.shape()[0], full.shape()[1], full.shape()[2]];
    region.check_within(shape)?;
    if crop.shape() != region.size {
        return Err(invalid!(
            "crop shape {:?} does not match region size {:?}",
            crop.shape(),
            region.size
        ));
    }
    let inner = region.inner_size();
    let (st, pl) = (region.start, region.pad_low);
    let src = crop.slice(s![
        pl[0]..pl[0] + inner[0],
        pl[1]..pl[1] + inner[1],
        pl[2]..pl[2] + inner[2]
    ]);
    let mut dst = full.slice_mut(s![
        st[0]..st[0] + inner[0],
        st[1]..st[1] + inner[1],
        st[2]..st[2] + inner[2]
    ]);
    dst.zip_mut_with(&src, |d, &s| *d = d.max(s));
    Ok(())
}

/// Fixed-size crop of image and label around the label's foreground
/// centroid.
pub fn crop_tumor_centered(
    image: &Volume,
    label: &Volume,
    size: [usize; 3],
) -> Result<(Volume, Volume, CropRegion)> {
    if image.shape() != label.shape() {
        return Err(invalid!(
            "image shape {:?} and label shape {:?} differ",
            image.shape(),
            label.shape()
        ));
    }
    let c = centroid(label.data()).ok_or_else(|| invalid!("cannot crop around an empty label"))?;
    let region = region_around(c, image.shape(), size);
    Ok((
        apply_crop(image, &region)?,
        apply_crop(label, &region)?,
        region,
    ))
}

/// Tight bounding box of each lung label (1 = right, 2 = left) dilated by
/// `margin_mm` and clamped to the volume.
pub fn lung_regions(lungmask: &Volume, margin_mm: f64) -> Result<Vec<(u8, CropRegion)>> {
    let shape = lungmask.shape();
    let sp = lungmask.spacing();
    let mut bounds: [Option<([usize; 3], [usize; 3])>; 2] = [None, None];
    for ((x, y, z), &v) in lungmask.data().indexed_iter() {
        let label = v.round() as i64;
        if label != 1 && label != 2 {
            continue;
        }
        let p = [x, y, z];
        let b = &mut bounds[label as usize - 1];
        match b {
            None => *b = Some((p, p)),
            Some((lo, hi)) => {
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
    }
    let regions: Vec<(u8, CropRegion)> = bounds
        .iter()
        .enumerate()
        .filter_map(|(i, b)| {
            let (lo, hi) = (*b)?;
            let m: [usize; 3] = std::array::from_fn(|a| (margin_mm / sp[a]).ceil() as usize);
            let lo = std::array::from_fn(|a| lo[a].saturating_sub(m[a]));
            let hi = std::array::from_fn(|a| (hi[a] + m[a]).min(shape[a] - 1));
            Some((i as u8 + 1, CropRegion::from_bounds(lo, hi)))
        })
        .collect();
    if regions.is_empty() {
        return Err(invalid!(
            "lung mask contains no lung labels (expected values 1 and/or 2)"
        ));
    }
    Ok(regions)
}

pub fn crop_per_lung(
    image: &Volume,
    lungmask: &Volume,
    margin_mm: f64,
) -> Result<Vec<(Volume, CropRegion)>> {
    if image.shape() != lungmask.shape() {
        return Err(invalid!(
            "image shape {:?} and lung mask shape {:?} differ",
            image.shape(),
            lungmask.shape()
        ));
    }
    lung_regions(lungmask, margin_mm)?
        .into_iter()
        .map(|(_, r)| Ok((apply_crop(image, &r)?, r)))
        .collect()
}

/// Enlarges an unpadded region so every extent is a multiple of `m`,
/// taking real context from the volume where available and zero padding
/// for the rest.
pub fn pad_to_multiple(region: &CropRegion, shape: Shape3, m: usize) -> CropRegion {
    let mut r = *region;
    for a in 0..3 {
        let target = region.size[a].div_ceil(m) * m;
        let mut extra = target - region.size[a];
        if region.pad_low[a] == 0 && region.pad_high[a] == 0 {
            let avail_lo = region.start[a];
            let avail_hi = shape[a].saturating_sub(region.start[a] + region.size[a]);
            let mut lo = (extra / 2).min(avail_lo);
            let hi = (extra - lo).min(avail_hi);
            lo = (extra - hi).min(avail_lo);
            r.start[a] -= lo;
            extra -= lo + hi;
        }
        r.size[a] = target;
        r.pad_high[a] += extra;
    }
    r
}

/// JSON sidecar that lets predictions on a crop be mapped back to the raw
/// image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub native_shape: Shape3,
    pub native_spacing: [f64; 3],
    pub native_origin: [f64; 3],
    pub resampled_shape: Shape3,
    pub resampled_spacing: [f64; 3],
    pub regions: Vec<CropRegion>,
}

impl CropGeometry {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CropGeometry> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
