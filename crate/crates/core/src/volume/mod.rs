//! Volumetric data model shared by every pipeline stage.
//!
//! A [`Volume`] is a 3D scalar grid stored in canonical X,Y,Z order
//! (Z = cranio-caudal, fastest varying in memory) together with its voxel
//! spacing and the world position of voxel `(0, 0, 0)`.

mod boxes;
mod manifest;
pub mod nifti;

pub use boxes::{boxes_from_mask, rasterize_boxes, AxialBox};
pub use manifest::{AnnotationRecord, DatasetManifest, Split, SupervisionKind};
pub use nifti::{load_volume, save_volume};

use ndarray::Array3;

use crate::error::{invalid, Result};

pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid!(
                "spacing must be strictly positive, got {spacing:?}"
            ));
        }
        if data.shape().contains(&0) {
            return Err(invalid!(
                "volume extents must be >= 1, got {:?}",
                data.shape()
            ));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Volume {
            data,
            spacing,
            origin,
        })
    }

    pub fn zeros(shape: Shape3, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Volume::new(Array3::zeros(shape), spacing, origin)
    }

    /// Builds a volume from a flat X,Y,Z (Z fastest) buffer.
    pub fn from_vec(
        shape: Shape3,
        data: Vec<f32>,
        spacing: [f64; 3],
        origin: [f64; 3],
    ) -> Result<Self> {
        let arr = Array3::from_shape_vec(shape, data)
            .map_err(|e| invalid!("buffer does not match shape {shape:?}: {e}"))?;
        Volume::new(arr, spacing, origin)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data
            .as_slice()
            .expect("volume data is kept in standard layout")
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same geometry, new voxel values.
    pub fn with_data(&self, data: Array3<f32>) -> Result<Self> {
        if data.shape() != self.data.shape() {
            return Err(invalid!(
                "replacement data shape {:?} differs from {:?}",
                data.shape(),
                self.data.shape()
            ));
        }
        Volume::new(data, self.spacing, self.origin)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Volume {
            data: self.data.mapv(f),
            spacing: self.spacing,
            origin: self.origin,
        }
    }

    /// True when every voxel is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Binarizes at `threshold` (value >= threshold becomes 1).
    pub fn threshold(&self, threshold: f32) -> Self {
        self.map(|v| if v >= threshold { 1.0 } else { 0.0 })
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.shape() == other.shape()
            && self.spacing == other.spacing
            && self.origin == other.origin
    }
}

/// Per-axis real-world extent in millimetres (dimension × spacing).
pub fn real_extent(v: &Volume) -> [f64; 3] {
    let shape = v.shape();
    let spacing = v.spacing();
    [
        shape[0] as f64 * spacing[0],
        shape[1] as f64 * spacing[1],
        shape[2] as f64 * spacing[2],
    ]
}
