//! Student inference on raw CT: per-lung crops, binarized, stitched and
//! mapped back onto the input grid.

use ndarray::Array3;

use crate::dataset::lung_crop_regions;
use crate::error::{invalid, Result};
use crate::models::UNet;
use crate::preprocess::{
    apply_crop, preprocess_image, resample_to_grid, stitch_into, CropRegion, Interpolation,
    PreprocessConfig,
};
use crate::volume::{Shape3, Volume};

/// Combines crop predictions into a full-grid mask; overlaps take the max.
pub fn stitch(crops: &[(Array3<f32>, CropRegion)], shape: Shape3) -> Result<Array3<f32>> {
    let mut full = Array3::zeros(shape);
    for (crop, region) in crops {
        stitch_into(&mut full, crop, region)?;
    }
    Ok(full)
}

/// Segments a raw CT image. The output has the image's shape, spacing and
/// origin and holds 0/1 values from the first output head.
pub fn segment(
    model: &UNet,
    image: &Volume,
    lungmask: &Volume,
    threshold: f32,
    pc: &PreprocessConfig,
) -> Result<Volume> {
    crate::nn::flush_subnormals();
    if image.shape() != lungmask.shape() {
        return Err(invalid!(
            "image shape {:?} and lung mask shape {:?} differ",
            image.shape(),
            lungmask.shape()
        ));
    }
    let spec = model.spec();
    if spec.in_channels != 1 {
        return Err(invalid!(
            "segmentation needs a single-input student, checkpoint takes {} channels",
            spec.in_channels
        ));
    }
    let pre = preprocess_image(image, pc)?;
    let lungs = resample_to_grid(lungmask, pre.spacing(), pre.shape(), Interpolation::Nearest);
    let mut crops = Vec::new();
    for region in lung_crop_regions(&lungs, pc, spec.divisor())? {
        let input = crate::nn::Tensor::from_volumes(&[&apply_crop(&pre, &region)?])?;
        let out = model.forward_one(&input)?;
        let pred = Array3::from_shape_vec(
            region.size,
            out.channel(0)
                .iter()
                .map(|&v| (v >= threshold) as u8 as f32)
                .collect(),
        )
        .expect("model output matches crop size");
        crops.push((pred, region));
    }
    let on_grid = pre.with_data(stitch(&crops, pre.shape())?)?;
    let native = resample_to_grid(
        &on_grid,
        image.spacing(),
        image.shape(),
        Interpolation::Nearest,
    );
    image.with_data(native.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stitch_takes_max_and_drops_padding() {
        let a = CropRegion {
            start: [0, 0, 0],
            size: [2, 2, 2],
            pad_low: [0; 3],
            pad_high: [0; 3],
        };
        let b = CropRegion {
            start: [1, 0, 0],
            size: [3, 2, 2],
            pad_low: [0; 3],
            pad_high: [1, 0, 0],
        };
        let full = stitch(
            &[
                (Array3::ones([2, 2, 2]), a),
                (Array3::zeros([3, 2, 2]) + 0.5, b),
            ],
            [3, 2, 2],
        )
        .unwrap();
        assert_eq!(full[[0, 0, 0]], 1.0);
        assert_eq!(full[[1, 1, 1]], 1.0);
        assert_eq!(full[[2, 1, 1]], 0.5);
    }
}
