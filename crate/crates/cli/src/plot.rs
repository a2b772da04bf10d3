use std::path::Path;

use distilseg::{Error, Result, Volume};
use image::{Rgb, RgbImage};

const WINDOW: (f32, f32) = (-1000.0, 400.0);

/// Axial slice with the most reference foreground, or the middle slice.
pub fn busiest_slice(mask: &Volume) -> usize {
    let nz = mask.shape()[2];
    (0..nz)
        .map(|z| {
            (
                mask.data()
                    .slice(ndarray::s![.., .., z])
                    .iter()
                    .filter(|&&v| v > 0.5)
                    .count(),
                z,
            )
        })
        .filter(|&(n, _)| n > 0)
        .max_by_key(|&(n, z)| (n, std::cmp::Reverse(z)))
        .map_or(nz / 2, |(_, z)| z)
}

/// Renders slice `z` in a lung window with the reference mask tinted red and
/// the prediction tinted green (overlap appears yellow).
pub fn overlay(
    image: &Volume,
    reference: Option<&Volume>,
    pred: Option<&Volume>,
    z: usize,
) -> Result<RgbImage> {
    let [nx, ny, nz] = image.shape();
    if z >= nz {
        return Err(Error::Validation(format!("slice {z} outside 0..{nz}")));
    }
    for v in [reference, pred].into_iter().flatten() {
        if v.shape() != image.shape() {
            return Err(Error::Validation(format!(
                "mask shape {:?} differs from image shape {:?}",
                v.shape(),
                image.shape()
            )));
        }
    }
    let at = |v: Option<&Volume>, x: usize, y: usize| v.is_some_and(|v| v.data()[[x, y, z]] > 0.5);
    let mut img = RgbImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let hu = image.data()[[x, y, z]];
            let g = ((hu - WINDOW.0) / (WINDOW.1 - WINDOW.0)).clamp(0.0, 1.0) * 255.0;
            let mut px = [g; 3];
            if at(reference, x, y) {
                px[0] = 0.5 * px[0] + 127.5;
            }
            if at(pred, x, y) {
                px[1] = 0.5 * px[1] + 127.5;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px.map(|c| c as u8)));
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
