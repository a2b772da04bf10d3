use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::eval::component_boxes;
use crate::volume::{rasterize_boxes, AxialBox, Shape3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    /// Rasterized per-slice bounding boxes.
    Box,
    /// Gaussian blob at the foreground centroid.
    Point,
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GuidanceMode::Box => "box",
            GuidanceMode::Point => "point",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Annotation<'a> {
    Mask(&'a Array3<f32>),
    Boxes(&'a [AxialBox]),
}

/// Mean voxel index of the nonzero voxels.
pub fn centroid(mask: &Array3<f32>) -> Option<[f64; 3]> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for ((x, y, z), &v) in mask.indexed_iter() {
        if v != 0.0 {
            sum[0] += x as f64;
            sum[1] += y as f64;
            sum[2] += z as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}

/// Builds the teacher's guidance channel. Box mode gives the per-slice box
/// mask; point mode gives `exp(-d^2 / (2 sigma^2))` (voxel units) around the
/// rounded centroid, so the peak is exactly 1.
pub fn make_guidance(
    ann: Annotation<'_>,
    shape: Shape3,
    mode: GuidanceMode,
    sigma: f64,
) -> Result<Array3<f32>> {
    let box_mask = match ann {
        Annotation::Boxes(b) => {
            if b.is_empty() {
                return Err(invalid!("guidance needs at least one box"));
            }
            rasterize_boxes(b, shape)?
        }
        Annotation::Mask(m) => {
            if m.shape() != shape {
                return Err(invalid!(
                    "mask shape {:?} differs from {:?}",
                    m.shape(),
                    shape
                ));
            }
            let boxes = component_boxes(m);
            if boxes.is_empty() {
                return Err(invalid!("guidance needs a non-empty annotation"));
            }
            match mode {
                GuidanceMode::Box => rasterize_boxes(&boxes, shape)?,
                GuidanceMode::Point => m.mapv(|v| (v != 0.0) as u8 as f32),
            }
        }
    };
    match mode {
        GuidanceMode::Box => Ok(box_mask),
        GuidanceMode::Point => {
            if !(sigma > 0.0) {
                return Err(invalid!(
                    "point guidance sigma must be positive, got {sigma}"
                ));
            }
            let c = centroid(&box_mask)
                .expect("non-empty annotation")
                .map(f64::round);
            let k = -0.5 / (sigma * sigma);
            Ok(Array3::from_shape_fn(shape, |(x, y, z)| {
                let d2 = (x as f64 - c[0]).powi(2)
                    + (y as f64 - c[1]).powi(2)
                    + (z as f64 - c[2]).powi(2);
                (k * d2).exp() as f32
            }))
        }
    }
}
