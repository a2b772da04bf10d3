//! Synthetic thorax-like CT phantoms with known tumor ground truth.
//!
//! A phantom is an elliptic body cylinder (soft tissue) in air, two
//! ellipsoidal lungs, a few small vessel-like blobs inside the lungs that
//! are not labelled, and one or more ellipsoidal tumors inside the lungs.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::{component_boxes, tumor_size_stats};
use crate::volume::{
    save_volume, AnnotationRecord, AxialBox, DatasetManifest, Shape3, SupervisionKind, Volume,
};

pub const AIR_HU: f32 = -1000.0;
pub const BODY_HU: f32 = 0.0;
pub const LUNG_HU: f32 = -800.0;
pub const TUMOR_HU: f32 = -50.0;

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Voxel index bounds (inclusive) of the ellipsoid clipped to `shape`.
    fn bounds(&self, shape: Shape3) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            let l = (self.center[a] - self.radii[a]).ceil().max(0.0);
            let h = (self.center[a] + self.radii[a])
                .floor()
                .min(shape[a] as f64 - 1.0);
            if l > h {
                return None;
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        Some((lo, hi))
    }

    fn for_each_voxel(&self, shape: Shape3, mut f: impl FnMut([usize; 3])) {
        let Some((lo, hi)) = self.bounds(shape) else {
            return;
        };
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if self.contains([x, y, z]) {
                        f([x, y, z]);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TumorSpec {
    pub shape: Ellipsoid,
    /// Added to the nominal tumor intensity.
    pub intensity_offset: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    /// Right (label 1) and left (label 2) lung.
    pub lungs: [Ellipsoid; 2],
    pub tumors: Vec<TumorSpec>,
    /// Unlabelled soft-tissue blobs inside the lungs.
    pub vessels: Vec<Ellipsoid>,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl PhantomSpec {
    /// Two lungs scaled to `shape`, no tumors.
    pub fn with_default_lungs(shape: Shape3, spacing: [f64; 3], seed: u64) -> PhantomSpec {
        let lung = |cx: f64| Ellipsoid {
            center: [
                cx * shape[0] as f64,
                0.5 * shape[1] as f64,
                0.5 * shape[2] as f64,
            ],
            radii: [
                0.19 * shape[0] as f64,
                0.3 * shape[1] as f64,
                0.38 * shape[2] as f64,
            ],
        };
        PhantomSpec {
            shape,
            spacing,
            lungs: [lung(0.3), lung(0.7)],
            tumors: Vec::new(),
            vessels: Vec::new(),
            noise_sigma: 20.0,
            seed,
        }
    }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec::with_default_lungs([96; 3], [1.0, 1.0, 1.5], 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub tumor_mask: Volume,
    pub lungmask: Volume,
    pub boxes: Vec<AxialBox>,
}

fn body_contains(shape: Shape3, x: usize, y: usize) -> bool {
    let cx = 0.5 * shape[0] as f64;
    let cy = 0.5 * shape[1] as f64;
    let dx = (x as f64 - cx) / (0.47 * shape[0] as f64);
    let dy = (y as f64 - cy) / (0.42 * shape[1] as f64);
    dx * dx + dy * dy <= 1.0
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let shape = spec.shape;
    let all_radii = spec
        .lungs
        .iter()
        .chain(spec.tumors.iter().map(|t| &t.shape))
        .chain(&spec.vessels)
        .flat_map(|e| e.radii);
    if all_radii.into_iter().any(|r| !(r > 0.0)) {
        return Err(invalid!("phantom radii must be positive"));
    }

    let mut lungmask = Array3::<f32>::zeros(shape);
    for (i, lung) in spec.lungs.iter().enumerate() {
        lung.for_each_voxel(shape, |p| lungmask[p] = (i + 1) as f32);
    }
    let mut tumor = Array3::<f32>::zeros(shape);
    for (i, t) in spec.tumors.iter().enumerate() {
        let mut outside = false;
        t.shape.for_each_voxel(shape, |p| {
            tumor[p] = 1.0;
            outside |= lungmask[p] == 0.0;
        });
        if outside {
            return Err(invalid!("tumor {i} extends outside the lungs"));
        }
    }

    let mut image = Array3::<f32>::from_shape_fn(shape, |(x, y, _)| {
        if body_contains(shape, x, y) {
            BODY_HU
        } else {
            AIR_HU
        }
    });
    image.zip_mut_with(&lungmask, |v, &l| {
        if l != 0.0 {
            *v = LUNG_HU;
        }
    });
    for vessel in &spec.vessels {
        vessel.for_each_voxel(shape, |p| {
            if lungmask[p] != 0.0 {
                image[p] = TUMOR_HU;
            }
        });
    }
    for t in &spec.tumors {
        t.shape
            .for_each_voxel(shape, |p| image[p] = TUMOR_HU + t.intensity_offset);
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal =
            Normal::new(0.0f32, spec.noise_sigma).map_err(|e| invalid!("noise sigma: {e}"))?;
        image.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }

    let boxes = component_boxes(&tumor);
    let origin = [0.0; 3];
    Ok(Phantom {
        image: Volume::new(image, spec.spacing, origin)?,
        tumor_mask: Volume::new(tumor, spec.spacing, origin)?,
        lungmask: Volume::new(lungmask, spec.spacing, origin)?,
        boxes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SizeDistribution {
    /// Tumor radius drawn uniformly from `[min_mm, max_mm]`.
    Uniform { min_mm: f64, max_mm: f64 },
    /// Every tumor has the same nominal radius.
    Fixed { radius_mm: f64 },
}

impl Default for SizeDistribution {
    fn default() -> Self {
        SizeDistribution::Uniform {
            min_mm: 3.0,
            max_mm: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    pub noise_sigma: f32,
    pub size_distribution: SizeDistribution,
    /// Per-axis radius jitter as a fraction of the nominal radius.
    pub anisotropy: f64,
    pub max_tumors: usize,
    pub max_vessels: usize,
    /// Enlarges every weak box by this many voxels in-plane.
    pub box_dilation: usize,
    pub source: String,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            shape: [96; 3],
            spacing: [1.0, 1.0, 1.5],
            noise_sigma: 20.0,
            size_distribution: SizeDistribution::default(),
            anisotropy: 0.2,
            max_tumors: 2,
            max_vessels: 3,
            box_dilation: 0,
            source: "phantom".to_string(),
        }
    }
}

/// Seed of case `index` in a cohort, independent of generation order.
pub fn case_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws a random phantom spec for one cohort case.
pub fn random_spec(cfg: &CohortConfig, seed: u64) -> Result<PhantomSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = PhantomSpec::with_default_lungs(cfg.shape, cfg.spacing, rng.random());
    spec.noise_sigma = cfg.noise_sigma;
    for lung in &mut spec.lungs {
        for a in 0..3 {
            lung.radii[a] *= rng.random_range(0.92..1.05);
            lung.center[a] += rng.random_range(-0.02..0.02) * cfg.shape[a] as f64;
        }
    }

    let n_tumors = rng.random_range(1..=cfg.max_tumors.max(1));
    for _ in 0..n_tumors {
        let r_mm = match cfg.size_distribution {
            SizeDistribution::Uniform { min_mm, max_mm } => rng.random_range(min_mm..=max_mm),
            SizeDistribution::Fixed { radius_mm } => radius_mm,
        };
        let placed = (0..200).find_map(|_| {
            let radii: [f64; 3] = std::array::from_fn(|a| {
                let jitter = if cfg.anisotropy > 0.0 {
                    rng.random_range(-cfg.anisotropy..=cfg.anisotropy)
                } else {
                    0.0
                };
                (r_mm / cfg.spacing[a] * (1.0 + jitter)).max(0.75)
            });
            let lung = spec.lungs[rng.random_range(0..2)];
            let center: [f64; 3] = std::array::from_fn(|a| {
                lung.center[a] + rng.random_range(-1.0..1.0) * lung.radii[a]
            });
            let cand = Ellipsoid { center, radii };
            let inside = (0..3).all(|a| {
                [-1.0, 1.0].iter().all(|&s| {
                    let mut p = center;
                    p[a] += s * (radii[a] + 1.0);
                    (0..3)
                        .map(|b| ((p[b] - lung.center[b]) / lung.radii[b]).powi(2))
                        .sum::<f64>()
                        <= 1.0
                })
            });
            let apart = spec.tumors.iter().all(|t| {
                let d2: f64 = (0..3)
                    .map(|a| ((t.shape.center[a] - center[a]) * cfg.spacing[a]).powi(2))
                    .sum();
                let reach = (0..3)
                    .map(|a| (t.shape.radii[a] + radii[a]) * cfg.spacing[a])
                    .fold(0.0, f64::max);
                d2.sqrt() > reach + 3.0
            });
            (inside && apart).then_some(cand)
        });
        if let Some(shape) = placed {
            spec.tumors.push(TumorSpec {
                shape,
                intensity_offset: rng.random_range(-20.0..20.0),
            });
        }
    }
    if spec.tumors.is_empty() {
        return Err(invalid!(
            "could not place a tumor; lungs too small for the size distribution"
        ));
    }

    for _ in 0..rng.random_range(0..=cfg.max_vessels) {
        let lung = spec.lungs[rng.random_range(0..2)];
        let center =
            std::array::from_fn(|a| lung.center[a] + rng.random_range(-0.7..0.7) * lung.radii[a]);
        let cand = Ellipsoid {
            center,
            radii: std::array::from_fn(|a| 1.5 / cfg.spacing[a]),
        };
        let clear = spec.tumors.iter().all(|t| {
            (0..3)
                .map(|a| ((t.shape.center[a] - center[a]) / (t.shape.radii[a] + 4.0)).powi(2))
                .sum::<f64>()
                > 1.0
        });
        if clear {
            spec.vessels.push(cand);
        }
    }
    Ok(spec)
}

/// Volume proxy for box-only annotations: box area times voxel volume,
/// summed over boxes, in cm^3.
pub fn box_volume_cm3(boxes: &[AxialBox], spacing: [f64; 3]) -> f64 {
    let voxel = spacing[0] * spacing[1] * spacing[2];
    boxes.iter().map(|b| b.area() as f64 * voxel).sum::<f64>() / 1000.0
}

fn dilate_boxes(boxes: &[AxialBox], by: usize, shape: Shape3) -> Vec<AxialBox> {
    boxes
        .iter()
        .map(|b| AxialBox {
            slice_index: b.slice_index,
            x_min: b.x_min.saturating_sub(by),
            y_min: b.y_min.saturating_sub(by),
            x_max: (b.x_max + by).min(shape[0] - 1),
            y_max: (b.y_max + by).min(shape[1] - 1),
        })
        .collect()
}

/// Paths written by [`generate_cohort`].
#[derive(Debug, Clone)]
pub struct CohortFiles {
    pub manifest: DatasetManifest,
    /// Same cases, every record strong, for auditing weak and pseudo labels.
    pub truth: DatasetManifest,
    pub manifest_path: PathBuf,
    pub truth_path: PathBuf,
}

/// Writes `n` phantom cases under `out_dir`. The first `n - n_weak` cases
/// are strong, the rest weak (boxes only in `manifest.json`; their masks
/// are still written and referenced from `truth.json`).
pub fn generate_cohort(
    n: usize,
    n_weak: usize,
    cfg: &CohortConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<CohortFiles> {
    if n == 0 {
        return Err(invalid!("cohort size must be at least 1"));
    }
    if n_weak > n {
        return Err(invalid!(
            "{n_weak} weak cases requested from a cohort of {n}"
        ));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let spec = random_spec(cfg, case_seed(seed, i as u64))?;
        let ph = generate_phantom(&spec)?;
        let case_id = format!("case_{i:04}");
        let image_path = PathBuf::from(format!("{case_id}_image.nii.gz"));
        let mask_path = PathBuf::from(format!("{case_id}_mask.nii.gz"));
        let lungmask_path = PathBuf::from(format!("{case_id}_lungmask.nii.gz"));
        save_volume(&ph.image, out_dir.join(&image_path))?;
        save_volume(&ph.tumor_mask, out_dir.join(&mask_path))?;
        save_volume(&ph.lungmask, out_dir.join(&lungmask_path))?;

        let sizes = tumor_size_stats(&ph.tumor_mask);
        let strong = AnnotationRecord {
            case_id: case_id.clone(),
            patient_id: format!("P{i:04}"),
            image_path,
            supervision_kind: SupervisionKind::Strong,
            mask_path: Some(mask_path),
            boxes: None,
            lungmask_path: Some(lungmask_path),
            tumor_volume_cm3: Some(sizes.iter().map(|s| s.volume_cm3).sum()),
            tumor_diameter_mm: sizes.iter().map(|s| s.diameter_mm).reduce(f64::max),
            source: Some(cfg.source.clone()),
        };
        truth.push(AnnotationRecord {
            boxes: Some(ph.boxes.clone()),
            ..strong.clone()
        });
        if i < n - n_weak {
            records.push(strong);
        } else {
            let boxes = dilate_boxes(&ph.boxes, cfg.box_dilation, cfg.shape);
            records.push(AnnotationRecord {
                supervision_kind: SupervisionKind::Weak,
                mask_path: None,
                tumor_volume_cm3: Some(box_volume_cm3(&boxes, cfg.spacing)),
                tumor_diameter_mm: None,
                boxes: Some(boxes),
                ..strong
            });
        }
    }
    let manifest = DatasetManifest::new(records, out_dir);
    let truth = DatasetManifest::new(truth, out_dir);
    let manifest_path = out_dir.join("manifest.json");
    let truth_path = out_dir.join("truth.json");
    manifest.save(&manifest_path)?;
    truth.save(&truth_path)?;
    Ok(CohortFiles {
        manifest,
        truth,
        manifest_path,
        truth_path,
    })
}
