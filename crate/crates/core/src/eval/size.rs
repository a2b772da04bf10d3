use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::components::{connected_components, Connectivity};
use crate::volume::Volume;

/// Size of one tumor component in real-world units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TumorSize {
    pub voxels: usize,
    pub volume_cm3: f64,
    /// Largest distance between two surface voxel centres.
    pub d_max_mm: f64,
    /// Smallest axis of the covariance ellipsoid, `4 * sqrt(lambda_min)`.
    pub d_min_mm: f64,
    /// `(d_max + d_min) / 2`.
    pub diameter_mm: f64,
}

/// Per-component volume and diameter of a binary mask (26-connected
/// components, raster order of first voxel). Empty masks give an empty list.
pub fn tumor_size_stats(mask: &Volume) -> Vec<TumorSize> {
    let labeling = connected_components(mask.data(), Connectivity::TwentySix);
    let labels = &labeling.labels;
    let (nx, ny, nz) = labels.dim();
    let sp = mask.spacing();
    let voxel_mm3 = sp[0] * sp[1] * sp[2];

    let mut members: Vec<Vec<[usize; 3]>> = vec![Vec::new(); labeling.count];
    for ((x, y, z), &l) in labels.indexed_iter() {
        if l > 0 {
            members[l as usize - 1].push([x, y, z]);
        }
    }

    let is_surface = |p: [usize; 3], l: u32| {
        let [x, y, z] = p;
        x == 0
            || y == 0
            || z == 0
            || x + 1 == nx
            || y + 1 == ny
            || z + 1 == nz
            || labels[[x - 1, y, z]] != l
            || labels[[x + 1, y, z]] != l
            || labels[[x, y - 1, z]] != l
            || labels[[x, y + 1, z]] != l
            || labels[[x, y, z - 1]] != l
            || labels[[x, y, z + 1]] != l
    };
    let to_mm = |p: &[usize; 3]| {
        Vector3::new(
            p[0] as f64 * sp[0],
            p[1] as f64 * sp[1],
            p[2] as f64 * sp[2],
        )
    };

    members
        .iter()
        .enumerate()
        .map(|(i, voxels)| {
            let label = i as u32 + 1;
            let surface: Vec<Vector3<f64>> = voxels
                .iter()
                .filter(|&&p| is_surface(p, label))
                .map(to_mm)
                .collect();
            let mut d2_max = 0.0f64;
            for (a, pa) in surface.iter().enumerate() {
                for pb in &surface[a + 1..] {
                    d2_max = d2_max.max((pa - pb).norm_squared());
                }
            }

            let n = voxels.len() as f64;
            let mean = voxels.iter().map(to_mm).sum::<Vector3<f64>>() / n;
            let mut cov = Matrix3::zeros();
            for p in voxels {
                let d = to_mm(p) - mean;
                cov += d * d.transpose();
            }
            cov /= n;
            let lambda_min = SymmetricEigen::new(cov).eigenvalues.min().max(0.0);

            let d_max_mm = d2_max.sqrt();
            let d_min_mm = 4.0 * lambda_min.sqrt();
            TumorSize {
                voxels: voxels.len(),
                volume_cm3: n * voxel_mm3 / 1000.0,
                d_max_mm,
                d_min_mm,
                diameter_mm: (d_max_mm + d_min_mm) / 2.0,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array3};

    #[test]
    fn unit_cube_is_one_cm3() {
        let mut m = Array3::zeros((12, 12, 12));
        m.slice_mut(s![1..11, 1..11, 1..11]).fill(1.0);
        let v = Volume::new(m, [1.0; 3], [0.0; 3]).unwrap();
        let stats = tumor_size_stats(&v);
        assert_eq!(stats.len(), 1);
        assert!((stats[0].volume_cm3 - 1.0).abs() < 1e-12);
        // corner to corner of a 10-voxel cube: 9 * sqrt(3)
        assert!((stats[0].d_max_mm - 9.0 * 3f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn single_anisotropic_voxel() {
        let mut m = Array3::zeros((3, 3, 3));
        m[[1, 1, 1]] = 1.0;
        let v = Volume::new(m, [1.0, 1.0, 1.5], [0.0; 3]).unwrap();
        let s = tumor_size_stats(&v);
        assert!((s[0].volume_cm3 - 0.0015).abs() < 1e-12);
        assert_eq!(s[0].d_max_mm, 0.0);
        assert_eq!(s[0].d_min_mm, 0.0);
    }

    #[test]
    fn empty_mask_gives_nothing() {
        let v = Volume::zeros([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        assert!(tumor_size_stats(&v).is_empty());
    }

    #[test]
    fn thin_slab_has_small_minimum_diameter() {
        let mut m = Array3::zeros((20, 20, 5));
        m.slice_mut(s![2..18, 2..18, 2..3]).fill(1.0);
        let v = Volume::new(m, [1.0; 3], [0.0; 3]).unwrap();
        let s = tumor_size_stats(&v)[0];
        assert!(s.d_min_mm < 1e-6);
        assert!(s.d_max_mm > 20.0);
    }
}
