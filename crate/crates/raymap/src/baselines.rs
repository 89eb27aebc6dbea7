//! Comparison representations sharing the occupancy/frontier substrate:
//! per-pose global rays, bare semantic voxels, and frontier painting with a
//! single fused feature (optionally carrying an inferred outward direction).

use crate::frontier::FrontierSet;
use crate::geom::{voxel_key, CellIndex, FeatureImage, Pose};
use crate::occupancy::{OccupancyClass, OccupancyGrid};
use crate::rayfront::{associate_rays, LocalRay, RayFrontError};
use nalgebra::Vector3;
use std::collections::BTreeMap;

/// One whole-image ray anchored at the robot position.
#[derive(Debug, Clone)]
pub struct SemPoseEntry {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
    pub feature: Vec<f64>,
}

/// Per-frame global-feature rays.
#[derive(Debug, Clone, Default)]
pub struct SemPosesState {
    pub entries: Vec<SemPoseEntry>,
}

/// Appends one entry: the frame's spatial-mean feature, cast from the robot
/// position along the camera's forward axis.
pub fn sem_poses_update(state: &mut SemPosesState, pose: &Pose, features: &FeatureImage) {
    let n = (features.height * features.width) as f64;
    let dim = features.dim as usize;
    let mut mean = vec![0.0f64; dim];
    for r in 0..features.height {
        for c in 0..features.width {
            for (m, x) in mean.iter_mut().zip(features.at(r, c)) {
                *m += *x as f64;
            }
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    state.entries.push(SemPoseEntry {
        origin: pose.position(),
        dir: pose.forward(),
        feature: mean,
    });
}

/// Direction-free (or single-direction) semantic paint on one frontier.
#[derive(Debug, Clone, PartialEq)]
pub struct SemFrontierEntry {
    pub feature: Vec<f64>,
    pub weight: f64,
    pub dir: Option<Vector3<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemFrontsVariant {
    Spherical,
    Unidirectional,
}

/// Frontier-painting state: at most one entry per coarse frontier cell.
#[derive(Debug, Clone)]
pub struct SemFrontsState {
    pub coarse_resolution: f64,
    pub variant: SemFrontsVariant,
    pub entries: BTreeMap<CellIndex, SemFrontierEntry>,
}

impl SemFrontsState {
    pub fn new(coarse_resolution: f64, variant: SemFrontsVariant) -> Self {
        SemFrontsState {
            coarse_resolution,
            variant,
            entries: BTreeMap::new(),
        }
    }

    /// Drops entries whose frontier has disappeared; there is no ray
    /// machinery to re-cast them, so they are simply discarded.
    pub fn retain_active(&mut self, frontiers: &FrontierSet) {
        self.entries.retain(|k, _| frontiers.cells.contains(k));
    }
}

/// Associates rays to frontiers exactly like the ray map, then collapses
/// every ray landing on a frontier into that frontier's single fused feature
/// (weight 1 - d_cost), discarding ray directions. The unidirectional
/// variant re-infers each touched frontier's outward direction from the
/// occupancy neighborhood.
pub fn sem_fronts_update(
    state: &mut SemFrontsState,
    rays: &[LocalRay],
    frontiers: &FrontierSet,
    depth_range: f64,
    grid: &OccupancyGrid,
) -> Result<(), RayFrontError> {
    let results = associate_rays(rays, frontiers, depth_range, None, false)?;
    let mut touched = Vec::new();
    for res in &results {
        let ray = &rays[res.ray_index];
        let w = ray.weight * (1.0 - res.d_cost);
        if w <= 0.0 {
            continue;
        }
        match state.entries.get_mut(&res.frontier) {
            Some(e) => {
                let total = e.weight + w;
                for (a, x) in e.feature.iter_mut().zip(&ray.feature) {
                    *a = (*a * e.weight + x * w) / total;
                }
                e.weight = total;
            }
            None => {
                state.entries.insert(
                    res.frontier,
                    SemFrontierEntry {
                        feature: ray.feature.clone(),
                        weight: w,
                        dir: None,
                    },
                );
            }
        }
        touched.push(res.frontier);
    }
    if state.variant == SemFrontsVariant::Unidirectional {
        for cell in touched {
            let origin = crate::geom::cell_center(cell, state.coarse_resolution);
            let dir = infer_frontier_direction(grid, &origin, grid.resolution());
            if let Some(e) = state.entries.get_mut(&cell) {
                e.dir = Some(dir);
            }
        }
    }
    Ok(())
}

/// Outward direction of a frontier from its 3x3x3 fine-cell neighborhood:
/// each of the 26 offsets contributes its unit vector weighted +1 when that
/// neighbor is Unobserved and -1 when it is mapped (Free or Occupied).
/// Degenerate sums fall back to +z.
pub fn infer_frontier_direction(
    grid: &OccupancyGrid,
    frontier_origin: &Vector3<f64>,
    resolution: f64,
) -> Vector3<f64> {
    let key = voxel_key(frontier_origin, resolution);
    let mut d = Vector3::zeros();
    for dx in -1i32..=1 {
        for dy in -1i32..=1 {
            for dz in -1i32..=1 {
                if (dx, dy, dz) == (0, 0, 0) {
                    continue;
                }
                let w = match grid.class_of_key([key[0] + dx, key[1] + dy, key[2] + dz]) {
                    OccupancyClass::Unobserved => 1.0,
                    OccupancyClass::Free | OccupancyClass::Occupied => -1.0,
                };
                d += w * Vector3::new(dx as f64, dy as f64, dz as f64).normalize();
            }
        }
    }
    if d.norm() < 1e-9 {
        Vector3::new(0.0, 0.0, 1.0)
    } else {
        d.normalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occupancy::FrustumClassification;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sem_poses_takes_the_image_mean() {
        let mut state = SemPosesState::default();
        let uniform = FeatureImage::new(2, 2, 2, vec![[0.25f32, 0.75]; 4].concat());
        sem_poses_update(&mut state, &Pose::identity(), &uniform);
        assert_eq!(state.entries.len(), 1);
        assert_eq!(state.entries[0].feature, vec![0.25, 0.75]);
        assert_eq!(state.entries[0].dir, Vector3::new(0.0, 0.0, 1.0));

        // Half the pixels a, half b.
        let halves = FeatureImage::new(2, 2, 1, vec![1.0, 1.0, 3.0, 3.0]);
        sem_poses_update(&mut state, &Pose::identity(), &halves);
        assert_eq!(state.entries[1].feature, vec![2.0]);

        for _ in 0..3 {
            sem_poses_update(&mut state, &Pose::identity(), &halves);
        }
        assert_eq!(state.entries.len(), 5);
    }

    fn fronts(beta: f64, cells: &[CellIndex]) -> FrontierSet {
        FrontierSet {
            coarse_resolution: beta,
            cells: cells.iter().copied().collect(),
            generation: 0,
        }
    }

    fn ray_with(origin: [f64; 3], dir: [f64; 3], feature: Vec<f64>) -> LocalRay {
        LocalRay::new(
            Vector3::new(origin[0], origin[1], origin[2]),
            Vector3::new(dir[0], dir[1], dir[2]),
            feature,
            1.0,
        )
    }

    fn empty_grid() -> OccupancyGrid {
        OccupancyGrid::new(1.0, -10, 100)
    }

    #[test]
    fn rays_on_one_frontier_collide_into_a_mean() {
        let mut state = SemFrontsState::new(4.0, SemFrontsVariant::Spherical);
        let fs = fronts(4.0, &[[1, 0, 0], [5, 0, 0]]);
        // Two rays mirrored about the frontier axis: identical costs, both
        // associate to [1,0,0], and their orthogonal features force the
        // collision this representation is criticized for.
        let rays = vec![
            ray_with([0.0, 2.0, 2.0], [1.0, 0.01, 0.0], vec![1.0, 0.0]),
            ray_with([0.0, 2.0, 2.0], [1.0, -0.01, 0.0], vec![0.0, 1.0]),
        ];
        sem_fronts_update(&mut state, &rays, &fs, 10.0, &empty_grid()).unwrap();
        let e = state.entries.get(&[1, 0, 0]).unwrap();
        for (got, want) in e.feature.iter().zip([0.5, 0.5]) {
            assert!((got - want).abs() < 1e-6);
        }
        assert!(e.dir.is_none());
    }

    #[test]
    fn rays_on_distinct_frontiers_stay_distinct() {
        let mut state = SemFrontsState::new(4.0, SemFrontsVariant::Spherical);
        let fs = fronts(4.0, &[[1, 0, 0], [0, 1, 0]]);
        let rays = vec![
            ray_with([0.0, 2.0, 2.0], [1.0, 0.0, 0.0], vec![1.0]),
            ray_with([2.0, 0.0, 2.0], [0.0, 1.0, 0.0], vec![2.0]),
        ];
        sem_fronts_update(&mut state, &rays, &fs, 10.0, &empty_grid()).unwrap();
        assert_eq!(state.entries.len(), 2);
    }

    #[test]
    fn no_surviving_rays_changes_nothing() {
        let mut state = SemFrontsState::new(4.0, SemFrontsVariant::Spherical);
        let fs = fronts(4.0, &[[-3, 0, 0]]);
        let rays = vec![ray_with([0.0, 2.0, 2.0], [1.0, 0.0, 0.0], vec![1.0])];
        sem_fronts_update(&mut state, &rays, &fs, 10.0, &empty_grid()).unwrap();
        assert!(state.entries.is_empty());
    }

    #[test]
    fn unidirectional_entries_carry_unit_directions() {
        let mut state = SemFrontsState::new(4.0, SemFrontsVariant::Unidirectional);
        // Two on-axis candidates: the nearer wins at cost below 1.
        let fs = fronts(4.0, &[[1, 0, 0], [2, 0, 0]]);
        let rays = vec![ray_with([0.0, 2.0, 2.0], [1.0, 0.0, 0.0], vec![1.0])];
        sem_fronts_update(&mut state, &rays, &fs, 10.0, &empty_grid()).unwrap();
        let e = state.entries.get(&[1, 0, 0]).unwrap();
        let dir = e.dir.unwrap();
        assert!((dir.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stale_frontier_entries_are_discarded() {
        let mut state = SemFrontsState::new(4.0, SemFrontsVariant::Spherical);
        let fs = fronts(4.0, &[[1, 0, 0], [2, 0, 0]]);
        let rays = vec![ray_with([0.0, 2.0, 2.0], [1.0, 0.0, 0.0], vec![1.0])];
        sem_fronts_update(&mut state, &rays, &fs, 10.0, &empty_grid()).unwrap();
        assert_eq!(state.entries.len(), 1);
        state.retain_active(&fronts(4.0, &[[9, 9, 9]]));
        assert!(state.entries.is_empty());
    }

    fn grid_with(free: &[CellIndex], occ: &[CellIndex]) -> OccupancyGrid {
        let mut g = OccupancyGrid::new(1.0, -10, 100);
        let cls = FrustumClassification {
            free: free.to_vec(),
            occupied: occ.iter().map(|&k| (k, (0u32, 0u32))).collect(),
        };
        g.apply_classified(&cls, 100, usize::MAX, usize::MAX);
        g
    }

    #[test]
    fn mapped_below_unobserved_above_points_up() {
        // Everything at dz <= 0 around the center is mapped Free.
        let mut free = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=0 {
                    free.push([dx, dy, dz]);
                }
            }
        }
        let g = grid_with(&free, &[]);
        let d = infer_frontier_direction(&g, &Vector3::new(0.5, 0.5, 0.5), 1.0);
        assert!((d - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-9);
    }

    #[test]
    fn fully_unobserved_neighborhood_falls_back_to_up() {
        let g = empty_grid();
        let d = infer_frontier_direction(&g, &Vector3::new(0.5, 0.5, 0.5), 1.0);
        assert_eq!(d, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn lone_unobserved_neighbor_dominates() {
        // All 26 neighbors mapped except (1,0,0): hand summation gives
        // exactly (2,0,0) before normalization.
        let mut free = Vec::new();
        for dx in -1i32..=1 {
            for dy in -1i32..=1 {
                for dz in -1i32..=1 {
                    if (dx, dy, dz) != (0, 0, 0) && (dx, dy, dz) != (1, 0, 0) {
                        free.push([dx, dy, dz]);
                    }
                }
            }
        }
        let g = grid_with(&free, &[]);
        let d = infer_frontier_direction(&g, &Vector3::new(0.5, 0.5, 0.5), 1.0);

        let mut oracle = Vector3::zeros();
        for dx in -1i32..=1 {
            for dy in -1i32..=1 {
                for dz in -1i32..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    let w = if (dx, dy, dz) == (1, 0, 0) { 1.0 } else { -1.0 };
                    oracle += w * Vector3::new(dx as f64, dy as f64, dz as f64).normalize();
                }
            }
        }
        assert!((oracle - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-9);
        assert!((d - oracle.normalize()).norm() < 1e-12);
    }

    #[test]
    fn direction_is_unit_and_flips_under_label_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let mut mapped = Vec::new();
            let mut unmapped = Vec::new();
            for dx in -1i32..=1 {
                for dy in -1i32..=1 {
                    for dz in -1i32..=1 {
                        if (dx, dy, dz) == (0, 0, 0) {
                            continue;
                        }
                        if rng.gen_bool(0.5) {
                            mapped.push([dx, dy, dz]);
                        } else {
                            unmapped.push([dx, dy, dz]);
                        }
                    }
                }
            }
            let origin = Vector3::new(0.5, 0.5, 0.5);
            let d1 = infer_frontier_direction(&grid_with(&mapped, &[]), &origin, 1.0);
            let d2 = infer_frontier_direction(&grid_with(&unmapped, &[]), &origin, 1.0);
            assert!((d1.norm() - 1.0).abs() < 1e-9);
            assert!((d2.norm() - 1.0).abs() < 1e-9);
            // Swapping which neighbors are mapped negates the sum, unless it
            // was degenerate and both sides fell back to +z.
            if (d1 - Vector3::new(0.0, 0.0, 1.0)).norm() > 1e-9
                || (d2 - Vector3::new(0.0, 0.0, 1.0)).norm() > 1e-9
            {
                assert!((d1 + d2).norm() < 1e-9, "d1={d1:?} d2={d2:?}");
            }
        }
    }
}
