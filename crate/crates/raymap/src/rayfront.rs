//! Beyond-range semantics as rays: pixels whose depth exceeds the sensing
//! range become featurized world-frame rays, get associated to the nearest
//! plausible frontier, and accumulate there in spherical angle bins.

use crate::frontier::FrontierSet;
use crate::geom::{
    angle_bin, bin_center_direction, cell_center, coarsen_key, direction_to_angles, voxel_key,
    AngleBin, CameraIntrinsics, CellIndex, DepthImage, FeatureImage, Pose,
};
use crate::occupancy::OccupancyGrid;
use crate::util::subsample_uniform;
use nalgebra::Vector3;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RayFrontError {
    #[error("depth is {dh}x{dw} but features are {fh}x{fw}")]
    DimensionMismatch { dh: u32, dw: u32, fh: u32, fw: u32 },
    #[error("depth range must be positive for association, got {0}")]
    NonPositiveDepthRange(f64),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Occupancy(#[from] crate::occupancy::OccupancyError),
}

/// A featurized ray in world frame. `weight` is 1 for freshly observed rays
/// and carries the accumulated weight when a stored ray is re-cast.
#[derive(Debug, Clone)]
pub struct LocalRay {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
    pub feature: Vec<f64>,
    pub weight: f64,
}

impl LocalRay {
    pub fn new(origin: Vector3<f64>, dir: Vector3<f64>, feature: Vec<f64>, weight: f64) -> Self {
        let ray = LocalRay {
            origin,
            dir: dir.normalize(),
            feature,
            weight,
        };
        debug_assert!((ray.dir.norm() - 1.0).abs() <= 1e-6);
        ray
    }
}

/// Rays waiting for the next association flush. Flushes run every `period`
/// frames, offset by `phase` from the voxel-fusion cadence so the two bulk
/// steps land on different frames.
#[derive(Debug, Clone)]
pub struct RayAccumulationBuffer {
    pub pending: Vec<LocalRay>,
    pub period: u32,
    pub phase: u32,
}

impl RayAccumulationBuffer {
    pub fn new(period: u32, phase: u32) -> Self {
        assert!(period >= 1);
        RayAccumulationBuffer {
            pending: Vec::new(),
            period,
            phase,
        }
    }

    /// True on frames where the buffer should flush: frame counts congruent
    /// to `phase` modulo `period` (1-based count of frames seen so far).
    pub fn due(&self, frame_index: u64) -> bool {
        (frame_index + 1) % self.period as u64 == (self.phase % self.period) as u64
    }
}

/// Fused feature and total weight for one (frontier, angle bin) slot.
#[derive(Debug, Clone, PartialEq)]
pub struct RayFrontierEntry {
    pub feature: Vec<f64>,
    pub weight: f64,
}

/// Semantic rays keyed by (coarse frontier cell, azimuth bin, zenith bin).
#[derive(Debug, Clone)]
pub struct RayFrontierMap {
    coarse_resolution: f64,
    psi_deg: f64,
    entries: BTreeMap<(CellIndex, u32, u32), RayFrontierEntry>,
}

/// Winning frontier for one ray with the distances behind its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationResult {
    pub ray_index: usize,
    pub frontier: CellIndex,
    pub d_ortho: f64,
    pub d_orig: f64,
    pub d_cost: f64,
}

/// Builds world-frame rays from the pixels that saw nothing within range:
/// the beyond-range mask is eroded with a (2h+1)^2 square window (pixels
/// closer than h to the border never survive), and each surviving pixel
/// contributes a unit ray through its center carrying its feature.
/// The result is uniformly subsampled to `max_dirs_per_frame`.
pub fn observe_out_of_range(
    pose: &Pose,
    intr: &CameraIntrinsics,
    depth: &DepthImage,
    features: &FeatureImage,
    erosion_half_window: u32,
    max_dirs_per_frame: usize,
) -> Result<Vec<LocalRay>, RayFrontError> {
    if depth.height != features.height || depth.width != features.width {
        return Err(RayFrontError::DimensionMismatch {
            dh: depth.height,
            dw: depth.width,
            fh: features.height,
            fw: features.width,
        });
    }
    let (h, w) = (depth.height as usize, depth.width as usize);
    let hw = erosion_half_window as usize;

    // Summed-area table over the beyond-range mask; a pixel survives erosion
    // iff its whole window is masked.
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for r in 0..h {
        for c in 0..w {
            let m = depth.at(r as u32, c as u32).is_infinite() as u32;
            sat[(r + 1) * (w + 1) + (c + 1)] =
                m + sat[r * (w + 1) + (c + 1)] + sat[(r + 1) * (w + 1) + c] - sat[r * (w + 1) + c];
        }
    }
    let window_area = ((2 * hw + 1) * (2 * hw + 1)) as u32;
    let rect = |r0: usize, c0: usize, r1: usize, c1: usize| {
        sat[r1 * (w + 1) + c1] + sat[r0 * (w + 1) + c0]
            - sat[r0 * (w + 1) + c1]
            - sat[r1 * (w + 1) + c0]
    };

    let origin = pose.position();
    let mut rays = Vec::new();
    for r in hw..h.saturating_sub(hw) {
        for c in hw..w.saturating_sub(hw) {
            if rect(r - hw, c - hw, r + hw + 1, c + hw + 1) != window_area {
                continue;
            }
            let dir = pose.rotate(&intr.pixel_ray(r as u32, c as u32)).normalize();
            let feature = features
                .at(r as u32, c as u32)
                .iter()
                .map(|&x| x as f64)
                .collect();
            rays.push(LocalRay::new(origin, dir, feature, 1.0));
        }
    }
    Ok(subsample_uniform(&rays, max_dirs_per_frame)
        .into_iter()
        .cloned()
        .collect())
}

/// Normalized costs for one ray's candidate set: each candidate's
/// (orthogonal distance, origin distance) is divided by the per-ray maxima
/// and averaged. A zero maximum makes that ratio 1 for every candidate.
pub fn association_costs(candidates: &[(f64, f64)]) -> Vec<f64> {
    let max_ortho = candidates.iter().map(|c| c.0).fold(0.0f64, f64::max);
    let max_orig = candidates.iter().map(|c| c.1).fold(0.0f64, f64::max);
    candidates
        .iter()
        .map(|&(o, g)| {
            let ro = if max_ortho > 0.0 { o / max_ortho } else { 1.0 };
            let rg = if max_orig > 0.0 { g / max_orig } else { 1.0 };
            (ro + rg) / 2.0
        })
        .collect()
}

/// Assigns each ray to its cheapest plausible frontier. Candidates must be
/// strictly in front of the ray, within `beta` orthogonal distance of it,
/// and within 4x depth_range of its origin; the minimum normalized cost wins
/// (ties: smaller origin distance, then frontier key order). With
/// `ray_tracing` and a grid, a ray is dropped when marching toward its
/// frontier hits a non-Free cell outside the frontier's coarse cell before
/// the nearest-approach point. Rays without candidates are omitted.
pub fn associate_rays(
    rays: &[LocalRay],
    frontiers: &FrontierSet,
    depth_range: f64,
    grid: Option<&OccupancyGrid>,
    ray_tracing: bool,
) -> Result<Vec<AssociationResult>, RayFrontError> {
    if depth_range <= 0.0 {
        return Err(RayFrontError::NonPositiveDepthRange(depth_range));
    }
    let beta = frontiers.coarse_resolution;
    let max_orig_allowed = 4.0 * depth_range;
    let mut out = Vec::new();
    for (ray_index, ray) in rays.iter().enumerate() {
        let mut cands: Vec<(CellIndex, f64, f64)> = Vec::new();
        for &cell in &frontiers.cells {
            let delta = frontiers.origin(cell) - ray.origin;
            let along = delta.dot(&ray.dir);
            if along <= 0.0 {
                continue;
            }
            let d_ortho = (delta - ray.dir * along).norm();
            if d_ortho > beta {
                continue;
            }
            let d_orig = delta.norm();
            if d_orig > max_orig_allowed {
                continue;
            }
            cands.push((cell, d_ortho, d_orig));
        }
        if cands.is_empty() {
            continue;
        }
        let costs = association_costs(
            &cands.iter().map(|&(_, o, g)| (o, g)).collect::<Vec<_>>(),
        );
        debug_assert!(costs.iter().all(|&c| (0.0..=1.0).contains(&c)));
        let mut best = 0usize;
        for i in 1..cands.len() {
            if (costs[i], cands[i].2) < (costs[best], cands[best].2) {
                best = i;
            }
        }
        let (frontier, d_ortho, d_orig) = cands[best];

        if ray_tracing {
            if let Some(g) = grid {
                let t_star = (frontiers.origin(frontier) - ray.origin).dot(&ray.dir);
                let factor = (beta / g.resolution()).round() as i32;
                match g.raycast_skip_origin(&ray.origin, &ray.dir, t_star)? {
                    Some(hit) if coarsen_key(hit.cell, factor) != frontier => continue,
                    _ => {}
                }
            }
        }
        out.push(AssociationResult {
            ray_index,
            frontier,
            d_ortho,
            d_orig,
            d_cost: costs[best],
        });
    }
    Ok(out)
}

impl RayFrontierMap {
    pub fn new(coarse_resolution: f64, psi_deg: f64) -> Self {
        assert!(coarse_resolution > 0.0 && psi_deg > 0.0);
        RayFrontierMap {
            coarse_resolution,
            psi_deg,
            entries: BTreeMap::new(),
        }
    }

    #[inline]
    pub fn coarse_resolution(&self) -> f64 {
        self.coarse_resolution
    }

    #[inline]
    pub fn psi_deg(&self) -> f64 {
        self.psi_deg
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(CellIndex, u32, u32), &RayFrontierEntry)> {
        self.entries.iter()
    }

    pub fn get(&self, cell: CellIndex, bin: AngleBin) -> Option<&RayFrontierEntry> {
        self.entries.get(&(cell, bin.theta_bin, bin.phi_bin))
    }

    /// World position of an entry's frontier origin.
    pub fn origin(&self, cell: CellIndex) -> Vector3<f64> {
        cell_center(cell, self.coarse_resolution)
    }

    /// True when every entry sits on an active frontier origin.
    pub fn anchored_to(&self, frontiers: &FrontierSet) -> bool {
        self.entries
            .keys()
            .all(|(cell, _, _)| frontiers.cells.contains(cell))
    }

    fn merge(&mut self, key: (CellIndex, u32, u32), feature: &[f64], w: f64) {
        if w <= 0.0 {
            return;
        }
        match self.entries.get_mut(&key) {
            Some(e) => {
                let total = e.weight + w;
                for (a, x) in e.feature.iter_mut().zip(feature) {
                    *a = (*a * e.weight + x * w) / total;
                }
                e.weight = total;
            }
            None => {
                self.entries.insert(
                    key,
                    RayFrontierEntry {
                        feature: feature.to_vec(),
                        weight: w,
                    },
                );
            }
        }
    }

    /// Folds associated rays into the map: each ray lands on its frontier's
    /// cell in the angle bin of its (retained) direction, weighted by
    /// carried weight x (1 - d_cost). Zero-weight rays vanish.
    pub fn bin_and_accumulate(
        &mut self,
        rays: &[LocalRay],
        results: &[AssociationResult],
    ) -> Result<(), RayFrontError> {
        for res in results {
            let ray = &rays[res.ray_index];
            let (theta, phi) = direction_to_angles(&ray.dir)?;
            let bin = angle_bin(theta, phi, self.psi_deg)?;
            let w = ray.weight * (1.0 - res.d_cost);
            self.merge((res.frontier, bin.theta_bin, bin.phi_bin), &ray.feature, w);
        }
        Ok(())
    }

    /// Accumulation for range-free operation: with no depth there are no
    /// frontiers, so rays anchor to the coarse cell containing their own
    /// origin at full carried weight.
    pub fn accumulate_at_origin(&mut self, rays: &[LocalRay]) -> Result<(), RayFrontError> {
        for ray in rays {
            let cell = voxel_key(&ray.origin, self.coarse_resolution);
            let (theta, phi) = direction_to_angles(&ray.dir)?;
            let bin = angle_bin(theta, phi, self.psi_deg)?;
            self.merge((cell, bin.theta_bin, bin.phi_bin), &ray.feature, ray.weight);
        }
        Ok(())
    }

    /// Drops every entry anchored on a removed frontier. With `ray_tracing`
    /// each dropped entry is re-buffered as a ray from the old origin along
    /// its bin-center direction (feature and weight preserved) so it can be
    /// re-cast onto the frontiers that replaced it; otherwise it is gone.
    pub fn propagate_fronts(
        &mut self,
        removed: &BTreeSet<CellIndex>,
        buffer: &mut RayAccumulationBuffer,
        ray_tracing: bool,
    ) {
        if removed.is_empty() {
            return;
        }
        let psi = self.psi_deg;
        let beta = self.coarse_resolution;
        let mut kept = BTreeMap::new();
        for ((cell, tb, pb), entry) in std::mem::take(&mut self.entries) {
            if !removed.contains(&cell) {
                kept.insert((cell, tb, pb), entry);
                continue;
            }
            if ray_tracing {
                let dir = bin_center_direction(
                    AngleBin {
                        theta_bin: tb,
                        phi_bin: pb,
                    },
                    psi,
                );
                buffer.pending.push(LocalRay::new(
                    cell_center(cell, beta),
                    dir,
                    entry.feature,
                    entry.weight,
                ));
            }
        }
        self.entries = kept;
    }

    /// Debug dump: one `fx fy fz theta_bin phi_bin weight` line per entry,
    /// sorted by (cell, theta_bin, phi_bin).
    pub fn dump_text(&self) -> String {
        let mut s = String::new();
        for ((cell, tb, pb), e) in &self.entries {
            let o = cell_center(*cell, self.coarse_resolution);
            writeln!(s, "{} {} {} {} {} {}", o.x, o.y, o.z, tb, pb, e.weight).unwrap();
        }
        s
    }
}
