use ndarray::{Array3, Axis, Zip};

use crate::volume::{Shape3, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    /// Trilinear, for images.
    Linear,
    /// Nearest neighbour, for masks and label maps.
    Nearest,
}

/// Resamples to `target_spacing`; each output extent is
/// `round(extent_mm / target_spacing)` voxels (at least 1).
pub fn resample(v: &Volume, target_spacing: [f64; 3], interp: Interpolation) -> Volume {
    let shape = v.shape();
    let sp = v.spacing();
    let out_shape: Shape3 = std::array::from_fn(|a| {
        ((shape[a] as f64 * sp[a] / target_spacing[a]).round() as usize).max(1)
    });
    resample_to_grid(v, target_spacing, out_shape, interp)
}

/// Resamples onto an explicit grid. Voxel centres are aligned so that the
/// first and last voxel boundaries of both grids coincide when the extents
/// agree; the origin shifts accordingly.
pub fn resample_to_grid(
    v: &Volume,
    spacing: [f64; 3],
    shape: Shape3,
    interp: Interpolation,
) -> Volume {
    let in_sp = v.spacing();
    let mut data = v.data().clone();
    for a in 0..3 {
        if data.shape()[a] == shape[a] && in_sp[a] == spacing[a] {
            continue;
        }
        data = resample_axis(&data, a, shape[a], spacing[a] / in_sp[a], interp);
    }
    let origin: [f64; 3] = std::array::from_fn(|a| v.origin()[a] + 0.5 * (spacing[a] - in_sp[a]));
    Volume::new(data, spacing, origin).expect("resampled geometry is valid")
}

fn resample_axis(
    data: &Array3<f32>,
    axis: usize,
    n_out: usize,
    ratio: f64,
    interp: Interpolation,
) -> Array3<f32> {
    let n_in = data.shape()[axis];
    let mut out_shape = [data.shape()[0], data.shape()[1], data.shape()[2]];
    out_shape[axis] = n_out;
    // per output index: (lower index, upper index, weight of upper)
    let taps: Vec<(usize, usize, f32)> = (0..n_out)
        .map(|i| {
            let x = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            match interp {
                Interpolation::Nearest => {
                    let j = ((x + 0.5).floor() as usize).min(n_in - 1);
                    (j, j, 0.0)
                }
                Interpolation::Linear => {
                    let lo = x.floor() as usize;
                    let hi = (lo + 1).min(n_in - 1);
                    (lo, hi, (x - lo as f64) as f32)
                }
            }
        })
        .collect();
    let mut out = Array3::<f32>::zeros(out_shape);
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(data.lanes(Axis(axis)))
        .for_each(|mut o, i| {
            for (dst, &(lo, hi, w)) in o.iter_mut().zip(&taps) {
                *dst = if w == 0.0 {
                    i[lo]
                } else {
                    i[lo] * (1.0 - w) + i[hi] * w
                };
            }
        });
    out
}
