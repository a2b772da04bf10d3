use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::volume::{boxes_from_mask, AxialBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "18")]
    Eighteen,
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    /// Neighbour offsets that precede a voxel in raster order.
    fn backward_offsets(self) -> Vec<[i64; 3]> {
        let mut v = Vec::new();
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                for dz in -1i64..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::Eighteen => (1..=2).contains(&manhattan),
                        Connectivity::TwentySix => manhattan >= 1,
                    };
                    let precedes = (dx, dy, dz) < (0, 0, 0);
                    if keep && precedes {
                        v.push([dx, dy, dz]);
                    }
                }
            }
        }
        v
    }
}

/// Component labelling of a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    /// 0 for background, `1..=count` for components, numbered in raster
    /// order of each component's first voxel.
    pub labels: Array3<u32>,
    pub count: usize,
}

impl Labeling {
    /// Voxel count per component, indexed by `label - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.count];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // keep the smaller root so the final numbering stays in raster order
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labelling; any voxel != 0 is foreground.
pub fn connected_components(mask: &Array3<f32>, connectivity: Connectivity) -> Labeling {
    let (nx, ny, nz) = mask.dim();
    let offsets = connectivity.backward_offsets();
    let mut labels = Array3::<u32>::zeros((nx, ny, nz));
    let mut parent: Vec<u32> = vec![0];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if mask[[x, y, z]] == 0.0 {
                    continue;
                }
                let mut current = 0u32;
                for off in &offsets {
                    let (px, py, pz) = (x as i64 + off[0], y as i64 + off[1], z as i64 + off[2]);
                    if px < 0 || py < 0 || pz < 0 || py >= ny as i64 || pz >= nz as i64 {
                        continue;
                    }
                    let l = labels[[px as usize, py as usize, pz as usize]];
                    if l == 0 {
                        continue;
                    }
                    if current == 0 {
                        current = l;
                    } else if current != l {
                        union(&mut parent, current, l);
                    }
                }
                if current == 0 {
                    current = parent.len() as u32;
                    parent.push(current);
                }
                labels[[x, y, z]] = current;
            }
        }
    }
    // compact root labels to 1..=count in order of first appearance
    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    for l in 1..parent.len() as u32 {
        let r = find(&mut parent, l);
        if r == l {
            count += 1;
            remap[l as usize] = count;
        }
    }
    for l in labels.iter_mut() {
        if *l > 0 {
            *l = remap[find(&mut parent, *l) as usize];
        }
    }
    Labeling {
        labels,
        count: count as usize,
    }
}

/// Tight per-slice boxes of each 26-connected component, so that two
/// separate tumors sharing a slice get separate boxes.
pub fn component_boxes(mask: &Array3<f32>) -> Vec<AxialBox> {
    let labeling = connected_components(mask, Connectivity::TwentySix);
    let mut boxes = Vec::new();
    for l in 1..=labeling.count as u32 {
        let single = labeling.labels.mapv(|v| (v == l) as u8 as f32);
        boxes.extend(boxes_from_mask(&single));
    }
    boxes.sort();
    boxes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(points: &[(usize, usize, usize)], shape: (usize, usize, usize)) -> Array3<f32> {
        let mut m = Array3::zeros(shape);
        for &p in points {
            m[[p.0, p.1, p.2]] = 1.0;
        }
        m
    }

    #[test]
    fn diagonal_voxels_join_under_26() {
        let m = mask_with(&[(1, 1, 1), (2, 2, 2)], (4, 4, 4));
        assert_eq!(connected_components(&m, Connectivity::TwentySix).count, 1);
        assert_eq!(connected_components(&m, Connectivity::Eighteen).count, 2);
        assert_eq!(connected_components(&m, Connectivity::Six).count, 2);
    }

    #[test]
    fn gap_separates_components() {
        let m = mask_with(&[(0, 0, 0), (0, 0, 2)], (3, 3, 3));
        let l = connected_components(&m, Connectivity::TwentySix);
        assert_eq!(l.count, 2);
        assert_eq!(l.labels[[0, 0, 0]], 1);
        assert_eq!(l.labels[[0, 0, 2]], 2);
        assert_eq!(l.sizes(), vec![1, 1]);
    }

    #[test]
    fn u_shape_merges_late() {
        // two arms joined at the far end: requires a union during pass one
        let mut pts = vec![];
        for y in 0..5 {
            pts.push((0, y, 0));
            pts.push((0, y, 4));
        }
        for z in 0..5 {
            pts.push((0, 4, z));
        }
        let m = mask_with(&pts, (1, 5, 5));
        let l = connected_components(&m, Connectivity::Six);
        assert_eq!(l.count, 1);
        assert!(l.labels.iter().all(|&v| v <= 1));
    }

    #[test]
    fn boxes_are_split_per_component() {
        let m = mask_with(&[(0, 0, 1), (4, 4, 1)], (5, 5, 3));
        let b = component_boxes(&m);
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|b| b.area() == 1));
    }

    #[test]
    fn empty_mask_has_no_components() {
        let l = connected_components(&Array3::zeros((3, 4, 5)), Connectivity::TwentySix);
        assert_eq!(l.count, 0);
    }
}
