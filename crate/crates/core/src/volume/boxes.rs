use ndarray::{s, Array3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::Shape3;
use crate::error::{invalid, Result};

/// A rectangle drawn on one axial slice. Bounds are inclusive voxel indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AxialBox {
    pub slice_index: usize,
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl AxialBox {
    pub fn new(
        slice_index: usize,
        x_min: usize,
        y_min: usize,
        x_max: usize,
        y_max: usize,
    ) -> Result<Self> {
        let b = AxialBox {
            slice_index,
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if x_min > x_max || y_min > y_max {
            return Err(invalid!("box has inverted bounds: {b:?}"));
        }
        Ok(b)
    }

    pub fn area(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        z == self.slice_index
            && (self.x_min..=self.x_max).contains(&x)
            && (self.y_min..=self.y_max).contains(&y)
    }

    /// Whether the two rectangles share at least one in-plane voxel.
    pub fn overlaps_in_plane(&self, other: &AxialBox) -> bool {
        self.x_min <= other.x_max
            && other.x_min <= self.x_max
            && self.y_min <= other.y_max
            && other.y_min <= self.y_max
    }

    pub fn check_within(&self, shape: Shape3) -> Result<()> {
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(invalid!("box has inverted bounds: {self:?}"));
        }
        if self.x_max >= shape[0] || self.y_max >= shape[1] || self.slice_index >= shape[2] {
            return Err(invalid!("box {self:?} lies outside volume shape {shape:?}"));
        }
        Ok(())
    }

    fn as_array(&self) -> [usize; 5] {
        [
            self.slice_index,
            self.x_min,
            self.y_min,
            self.x_max,
            self.y_max,
        ]
    }
}

// Manifest encoding: [slice, x_min, y_min, x_max, y_max].
impl Serialize for AxialBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.as_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AxialBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let [slice, x_min, y_min, x_max, y_max] = <[usize; 5]>::deserialize(deserializer)?;
        AxialBox::new(slice, x_min, y_min, x_max, y_max).map_err(serde::de::Error::custom)
    }
}

/// Rasterizes axial boxes into a {0,1} mask of the given shape.
pub fn rasterize_boxes(boxes: &[AxialBox], shape: Shape3) -> Result<Array3<f32>> {
    let mut mask = Array3::<f32>::zeros(shape);
    for b in boxes {
        b.check_within(shape)?;
        mask.slice_mut(s![b.x_min..=b.x_max, b.y_min..=b.y_max, b.slice_index])
            .fill(1.0);
    }
    Ok(mask)
}

/// Tight per-slice bounding boxes of the foreground of a mask.
pub fn boxes_from_mask(mask: &Array3<f32>) -> Vec<AxialBox> {
    let (nx, ny, nz) = mask.dim();
    let mut bounds: Vec<Option<[usize; 4]>> = vec![None; nz];
    for ((x, y, z), &v) in mask.indexed_iter() {
        if v == 0.0 {
            continue;
        }
        let b = bounds[z].get_or_insert([x, y, x, y]);
        b[0] = b[0].min(x);
        b[1] = b[1].min(y);
        b[2] = b[2].max(x);
        b[3] = b[3].max(y);
    }
    debug_assert!(nx > 0 && ny > 0);
    bounds
        .into_iter()
        .enumerate()
        .filter_map(|(z, b)| {
            b.map(|[x0, y0, x1, y1]| AxialBox {
                slice_index: z,
                x_min: x0,
                y_min: y0,
                x_max: x1,
                y_max: y1,
            })
        })
        .collect()
}
