//! Sparse multi-resolution log-odds occupancy grid.
//!
//! Fine cells store log-odds in a signed byte; homogeneous 2x2x2 blocks merge
//! recursively into coarser super-voxels holding the mean as f32. Occupied
//! means log-odds >= 0 (probability >= 0.5), Free means < 0, and a key absent
//! from both the fine map and every covering super-voxel is Unobserved.

use crate::geom::{voxel_key, Aabb, CameraIntrinsics, CellIndex, DepthImage, Pose};
use crate::util::subsample_uniform;
use nalgebra::Vector3;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OccupancyError {
    #[error("depth image is {dh}x{dw} but intrinsics are {ih}x{iw}")]
    DimensionMismatch { dh: u32, dw: u32, ih: u32, iw: u32 },
    #[error("ray direction is not unit length (|d| = {0})")]
    NonUnitDirection(f64),
    #[error("max_dist must be positive (got {0})")]
    InvalidMaxDist(f64),
}

/// Three-way occupancy classification of a point or cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccupancyClass {
    Occupied,
    Free,
    Unobserved,
}

/// First non-Free cell a marched ray encountered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub class: OccupancyClass,
    /// Where the ray enters the cell (the ray origin if it starts inside).
    pub point: Vector3<f64>,
    pub cell: CellIndex,
}

/// Per-frame frustum classification shared by occupancy integration and
/// semantic point accumulation: which voxel centers observed Free, and which
/// observed Occupied together with the pixel that saw them.
#[derive(Debug, Default)]
pub struct FrustumClassification {
    pub free: Vec<CellIndex>,
    pub occupied: Vec<(CellIndex, (u32, u32))>,
}

/// Classifies every voxel center inside the frame's frustum against the depth
/// image: Free if well in front of the measured surface, Occupied if inside
/// the surface band of total width `occ_thickness * resolution`, otherwise
/// left untouched (occluded or in the gap between the two bands).
///
/// Cells are emitted in lexicographic key order.
pub fn classify_frustum(
    resolution: f64,
    pose: &Pose,
    intr: &CameraIntrinsics,
    depth: &DepthImage,
    occ_thickness: f64,
) -> Result<FrustumClassification, OccupancyError> {
    if depth.height != intr.height || depth.width != intr.width {
        return Err(OccupancyError::DimensionMismatch {
            dh: depth.height,
            dw: depth.width,
            ih: intr.height,
            iw: intr.width,
        });
    }
    let mut out = FrustumClassification::default();
    let max_depth = depth
        .values
        .iter()
        .filter(|d| d.is_finite())
        .fold(f64::NEG_INFINITY, |m, &d| m.max(d as f64));
    if !max_depth.is_finite() {
        return Ok(out);
    }
    let band = occ_thickness * resolution;
    let reach = max_depth + band;

    // Frustum bounding box in world space: camera origin plus the four image
    // corner rays (with half-pixel margins, since projections round to the
    // nearest pixel) pushed to the maximum classified depth.
    let origin = pose.position();
    let mut bounds = Aabb::new(origin, origin);
    for (v, u) in [
        (-0.5, -0.5),
        (-0.5, intr.width as f64 - 0.5),
        (intr.height as f64 - 0.5, -0.5),
        (intr.height as f64 - 0.5, intr.width as f64 - 0.5),
    ] {
        let dir_cam = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
        let far = pose.transform_point(&(dir_cam * reach));
        bounds.expand_to(&far);
    }
    let pad = resolution;
    let lo = voxel_key(&(bounds.min - Vector3::repeat(pad)), resolution);
    let hi = voxel_key(&(bounds.max + Vector3::repeat(pad)), resolution);

    let cam_from_world = pose.inverse();
    for ix in lo[0]..=hi[0] {
        for iy in lo[1]..=hi[1] {
            for iz in lo[2]..=hi[2] {
                let key = [ix, iy, iz];
                let center = crate::geom::cell_center(key, resolution);
                let p_cam = cam_from_world.transform_point(&center);
                if p_cam.z <= 0.0 {
                    continue;
                }
                let Ok((u, v, z)) = intr.project(&p_cam) else {
                    continue;
                };
                let Some((r, c)) = intr.nearest_pixel(u, v) else {
                    continue;
                };
                let d = depth.at(r, c) as f64;
                if !d.is_finite() {
                    continue;
                }
                if z < d - band {
                    out.free.push(key);
                } else if (z - d).abs() <= band / 2.0 {
                    out.occupied.push((key, (r, c)));
                }
            }
        }
    }
    Ok(out)
}

/// Sparse multi-resolution log-odds occupancy grid.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    resolution: f64,
    max_empty_cnt: i32,
    max_occ_cnt: i32,
    cells: BTreeMap<CellIndex, i8>,
    /// merged[l - 1] holds level-l super-voxels: key in level-l index space,
    /// each covering 2^l fine cells per axis, value = mean log-odds.
    merged: Vec<BTreeMap<CellIndex, f32>>,
}

impl OccupancyGrid {
    /// Grid with the given cell size and log-odds clamp range. The range must
    /// fit a signed byte and straddle zero.
    pub fn new(resolution: f64, max_empty_cnt: i32, max_occ_cnt: i32) -> Self {
        assert!(resolution > 0.0);
        assert!((-128..0).contains(&max_empty_cnt) && (0..=127).contains(&max_occ_cnt));
        OccupancyGrid {
            resolution,
            max_empty_cnt,
            max_occ_cnt,
            cells: BTreeMap::new(),
            merged: Vec::new(),
        }
    }

    #[inline]
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn fine_cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn merged_region_count(&self) -> usize {
        self.merged.iter().map(|m| m.len()).sum()
    }

    /// Log-odds of the cell or covering super-voxel, None if unobserved.
    pub fn log_odds_at(&self, key: CellIndex) -> Option<f32> {
        if let Some(&v) = self.cells.get(&key) {
            return Some(v as f32);
        }
        for (i, level_map) in self.merged.iter().enumerate() {
            let factor = 1i32 << (i + 1);
            if let Some(&v) = level_map.get(&crate::geom::coarsen_key(key, factor)) {
                return Some(v);
            }
        }
        None
    }

    /// Classification of a fine cell key.
    #[inline]
    pub fn class_of_key(&self, key: CellIndex) -> OccupancyClass {
        match self.log_odds_at(key) {
            Some(v) if v >= 0.0 => OccupancyClass::Occupied,
            Some(_) => OccupancyClass::Free,
            None => OccupancyClass::Unobserved,
        }
    }

    /// Classification of the cell containing a world point.
    #[inline]
    pub fn query(&self, p: &Vector3<f64>) -> OccupancyClass {
        self.class_of_key(voxel_key(p, self.resolution))
    }

    /// Integrates one depth frame: classifies frustum voxels and applies the
    /// log-odds updates (Occupied += occ_observ_weight, Free -= 1, clamped).
    /// Free and Occupied point counts are uniformly subsampled to
    /// `max_empty_pts` and `max_pts` respectively.
    pub fn integrate_depth_frame(
        &mut self,
        pose: &Pose,
        intr: &CameraIntrinsics,
        depth: &DepthImage,
        occ_thickness: f64,
        occ_observ_weight: i32,
        max_empty_pts: usize,
        max_pts: usize,
    ) -> Result<(), OccupancyError> {
        let cls = classify_frustum(self.resolution, pose, intr, depth, occ_thickness)?;
        self.apply_classified(&cls, occ_observ_weight, max_empty_pts, max_pts);
        Ok(())
    }

    /// Applies a precomputed frustum classification (shared with the semantic
    /// map so one pass serves both).
    pub fn apply_classified(
        &mut self,
        cls: &FrustumClassification,
        occ_observ_weight: i32,
        max_empty_pts: usize,
        max_pts: usize,
    ) {
        for key in subsample_uniform(&cls.free, max_empty_pts) {
            self.bump(*key, -1);
        }
        for (key, _) in subsample_uniform(&cls.occupied, max_pts) {
            self.bump(*key, occ_observ_weight);
        }
    }

    fn bump(&mut self, key: CellIndex, delta: i32) {
        self.split_covering_region(key);
        let v = self.cells.entry(key).or_insert(0);
        *v = (*v as i32 + delta).clamp(self.max_empty_cnt, self.max_occ_cnt) as i8;
    }

    /// If `key` is covered by a super-voxel, splits regions down the path so
    /// the fine cell exists on its own. Keeps the no-double-coverage invariant.
    fn split_covering_region(&mut self, key: CellIndex) {
        for level in (1..=self.merged.len()).rev() {
            let factor = 1i32 << level;
            let ck = crate::geom::coarsen_key(key, factor);
            let Some(v) = self.merged[level - 1].remove(&ck) else {
                continue;
            };
            // Re-expand into the 8 children one level down.
            for dx in 0..2 {
                for dy in 0..2 {
                    for dz in 0..2 {
                        let child = [ck[0] * 2 + dx, ck[1] * 2 + dy, ck[2] * 2 + dz];
                        if level == 1 {
                            self.cells.insert(child, v.round() as i8);
                        } else {
                            self.merged[level - 2].insert(child, v);
                        }
                    }
                }
            }
        }
    }

    /// Recursively merges homogeneous 2x2x2 blocks into super-voxels. A block
    /// merges only when all 8 children are present at the same level, their
    /// log-odds spread is within `tolerance`, and they share one side of the
    /// Occupied/Free boundary (blocks straddling 0 never merge).
    pub fn prune_merge(&mut self, tolerance: f64) {
        // Fine cells -> level 1.
        let mut groups: BTreeMap<CellIndex, Vec<(CellIndex, f32)>> = BTreeMap::new();
        for (&k, &v) in &self.cells {
            groups
                .entry(crate::geom::coarsen_key(k, 2))
                .or_default()
                .push((k, v as f32));
        }
        self.merge_level(groups, 1, tolerance);

        // Level l -> level l + 1.
        let mut level = 1;
        while level <= self.merged.len() {
            let mut groups: BTreeMap<CellIndex, Vec<(CellIndex, f32)>> = BTreeMap::new();
            for (&k, &v) in &self.merged[level - 1] {
                groups
                    .entry(crate::geom::coarsen_key(k, 2))
                    .or_default()
                    .push((k, v));
            }
            self.merge_level(groups, level + 1, tolerance);
            level += 1;
        }
    }

    fn merge_level(
        &mut self,
        groups: BTreeMap<CellIndex, Vec<(CellIndex, f32)>>,
        target_level: usize,
        tolerance: f64,
    ) {
        for (parent, children) in groups {
            if children.len() != 8 {
                continue;
            }
            let min = children.iter().map(|(_, v)| *v).fold(f32::INFINITY, f32::min);
            let max = children
                .iter()
                .map(|(_, v)| *v)
                .fold(f32::NEG_INFINITY, f32::max);
            if (max - min) as f64 > tolerance || (min < 0.0 && max >= 0.0) {
                continue;
            }
            let mean = children.iter().map(|(_, v)| *v).sum::<f32>() / 8.0;
            if target_level == 1 {
                for (k, _) in &children {
                    self.cells.remove(k);
                }
            } else {
                for (k, _) in &children {
                    self.merged[target_level - 2].remove(k);
                }
            }
            while self.merged.len() < target_level {
                self.merged.push(BTreeMap::new());
            }
            self.merged[target_level - 1].insert(parent, mean);
        }
    }

    /// All Free cells at fine resolution, super-voxels expanded on demand.
    /// Yields (fine key, level the value came from).
    pub fn iterate_free(&self) -> Vec<(CellIndex, u8)> {
        let mut out: Vec<(CellIndex, u8)> = self
            .cells
            .iter()
            .filter(|(_, &v)| v < 0)
            .map(|(&k, _)| (k, 0u8))
            .collect();
        for (i, level_map) in self.merged.iter().enumerate() {
            let level = (i + 1) as u8;
            let side = 1i32 << level;
            for (&ck, &v) in level_map {
                if v >= 0.0 {
                    continue;
                }
                for dx in 0..side {
                    for dy in 0..side {
                        for dz in 0..side {
                            out.push(([ck[0] * side + dx, ck[1] * side + dy, ck[2] * side + dz], level));
                        }
                    }
                }
            }
        }
        out
    }

    /// Expanded fine-resolution view of every observed cell: key -> occupied?
    pub fn fine_view(&self) -> BTreeMap<CellIndex, bool> {
        let mut view: BTreeMap<CellIndex, bool> = self
            .cells
            .iter()
            .map(|(&k, &v)| (k, v >= 0))
            .collect();
        for (i, level_map) in self.merged.iter().enumerate() {
            let side = 1i32 << (i + 1);
            for (&ck, &v) in level_map {
                for dx in 0..side {
                    for dy in 0..side {
                        for dz in 0..side {
                            view.insert([ck[0] * side + dx, ck[1] * side + dy, ck[2] * side + dz], v >= 0.0);
                        }
                    }
                }
            }
        }
        view
    }

    /// Marches a ray cell-by-cell (incremental grid traversal, one step per
    /// crossed cell) and returns the first non-Free cell with its entry
    /// point, or None when `max_dist` is exhausted through Free cells.
    /// The origin's own cell is examined first.
    pub fn raycast(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        max_dist: f64,
    ) -> Result<Option<RayHit>, OccupancyError> {
        self.march(origin, dir, max_dist, false)
    }

    /// Like `raycast` but the origin's own cell is never examined; marching
    /// starts at the first cell boundary. For line-of-sight checks where the
    /// start cell's state is irrelevant (e.g. the camera's own cell).
    pub fn raycast_skip_origin(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        max_dist: f64,
    ) -> Result<Option<RayHit>, OccupancyError> {
        self.march(origin, dir, max_dist, true)
    }

    fn march(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        max_dist: f64,
        mut skip_current: bool,
    ) -> Result<Option<RayHit>, OccupancyError> {
        let n = dir.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(OccupancyError::NonUnitDirection(n));
        }
        if max_dist <= 0.0 {
            return Err(OccupancyError::InvalidMaxDist(max_dist));
        }
        let res = self.resolution;
        let mut key = voxel_key(origin, res);
        let mut step = [0i32; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for i in 0..3 {
            if dir[i] > 0.0 {
                step[i] = 1;
                t_max[i] = ((key[i] + 1) as f64 * res - origin[i]) / dir[i];
                t_delta[i] = res / dir[i];
            } else if dir[i] < 0.0 {
                step[i] = -1;
                t_max[i] = (key[i] as f64 * res - origin[i]) / dir[i];
                t_delta[i] = res / -dir[i];
            }
        }
        let mut t_entry = 0.0;
        loop {
            if !skip_current {
                let class = self.class_of_key(key);
                if class != OccupancyClass::Free {
                    return Ok(Some(RayHit {
                        class,
                        point: origin + dir * t_entry,
                        cell: key,
                    }));
                }
            }
            skip_current = false;
            let axis = (0..3).min_by(|&a, &b| t_max[a].total_cmp(&t_max[b])).unwrap();
            t_entry = t_max[axis];
            if t_entry > max_dist {
                return Ok(None);
            }
            key[axis] += step[axis];
            t_max[axis] += t_delta[axis];
        }
    }

    /// Debug dump: one `ix iy iz level log_odds` line per stored entry (fine
    /// cells and super-voxels), sorted by the (ix, iy, iz, level) tuple.
    pub fn dump_text(&self) -> String {
        let mut rows: Vec<(CellIndex, u8, f32)> = self
            .cells
            .iter()
            .map(|(&k, &v)| (k, 0u8, v as f32))
            .collect();
        for (i, level_map) in self.merged.iter().enumerate() {
            rows.extend(level_map.iter().map(|(&k, &v)| (k, (i + 1) as u8, v)));
        }
        rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut s = String::new();
        for (k, level, v) in rows {
            writeln!(s, "{} {} {} {} {}", k[0], k[1], k[2], level, v).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::cell_center;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_pixel_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 1).unwrap()
    }

    fn grid() -> OccupancyGrid {
        OccupancyGrid::new(1.0, -10, 100)
    }

    #[test]
    fn integrate_single_pixel_bands() {
        let mut g = grid();
        let depth = DepthImage::constant(1, 1, 5.0);
        g.integrate_depth_frame(
            &Pose::identity(),
            &single_pixel_intrinsics(),
            &depth,
            2.0,
            100,
            usize::MAX,
            usize::MAX,
        )
        .unwrap();
        // Voxel [0,0,2] (center z=2.5) is in front of the surface: 2.5 < 5 - 2.
        assert_eq!(g.log_odds_at([0, 0, 2]), Some(-1.0));
        assert_eq!(g.class_of_key([0, 0, 2]), OccupancyClass::Free);
        // Voxels with |z - 5| <= 1 are the surface band at full weight.
        assert_eq!(g.log_odds_at([0, 0, 4]), Some(100.0));
        assert_eq!(g.class_of_key([0, 0, 4]), OccupancyClass::Occupied);
        // Behind the surface stays unobserved.
        assert_eq!(g.class_of_key([0, 0, 7]), OccupancyClass::Unobserved);
        // The gap between the Free band and the surface band stays untouched:
        // center z = 3.5 is neither < 3 nor within 1 of 5.
        assert_eq!(g.class_of_key([0, 0, 3]), OccupancyClass::Unobserved);
    }

    #[test]
    fn integrate_rejects_dimension_mismatch() {
        let mut g = grid();
        let depth = DepthImage::constant(2, 2, 5.0);
        let err = g
            .integrate_depth_frame(
                &Pose::identity(),
                &single_pixel_intrinsics(),
                &depth,
                2.0,
                100,
                usize::MAX,
                usize::MAX,
            )
            .unwrap_err();
        assert!(matches!(err, OccupancyError::DimensionMismatch { .. }));
    }

    #[test]
    fn query_empty_grid_unobserved() {
        let g = grid();
        assert_eq!(g.query(&Vector3::new(3.0, -2.0, 0.1)), OccupancyClass::Unobserved);
    }

    // Replays the clamp arithmetic by hand: 11 decrements clamp at -10, one
    // +100 increment lands at 90 (not the clamp), still Occupied.
    #[test]
    fn clamp_arithmetic_replay() {
        let key = [3, 4, 5];
        let mut oracle: i32 = 0;
        let mut g = grid();
        let free_update = FrustumClassification {
            free: vec![key],
            occupied: vec![],
        };
        for _ in 0..11 {
            g.apply_classified(&free_update, 100, usize::MAX, usize::MAX);
            oracle = (oracle - 1).clamp(-10, 100);
        }
        assert_eq!(oracle, -10);
        assert_eq!(g.log_odds_at(key), Some(-10.0));
        let occ_update = FrustumClassification {
            free: vec![],
            occupied: vec![(key, (0, 0))],
        };
        g.apply_classified(&occ_update, 100, usize::MAX, usize::MAX);
        oracle = (oracle + 100).clamp(-10, 100);
        assert_eq!(oracle, 90);
        assert_eq!(g.log_odds_at(key), Some(90.0));
        assert_eq!(g.class_of_key(key), OccupancyClass::Occupied);
    }

    #[test]
    fn log_odds_stay_clamped_under_random_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = grid();
        let keys: Vec<CellIndex> = (0..20).map(|i| [i % 5, i / 5, 0]).collect();
        for _ in 0..2000 {
            let key = keys[rng.gen_range(0..keys.len())];
            let occupied = rng.gen_bool(0.3);
            let cls = if occupied {
                FrustumClassification {
                    free: vec![],
                    occupied: vec![(key, (0, 0))],
                }
            } else {
                FrustumClassification {
                    free: vec![key],
                    occupied: vec![],
                }
            };
            g.apply_classified(&cls, 100, usize::MAX, usize::MAX);
        }
        for key in keys {
            if let Some(v) = g.log_odds_at(key) {
                assert!((-10.0..=100.0).contains(&v));
            }
        }
    }

    #[test]
    fn subsampling_caps_point_counts() {
        let mut g = grid();
        let cls = FrustumClassification {
            free: (0..100).map(|i| [i, 0, 0]).collect(),
            occupied: (0..100).map(|i| ([i, 50, 0], (0, 0))).collect(),
        };
        g.apply_classified(&cls, 100, 10, 7);
        let free = g.cells.values().filter(|&&v| v < 0).count();
        let occ = g.cells.values().filter(|&&v| v >= 0).count();
        assert_eq!((free, occ), (10, 7));
    }

    #[test]
    fn raycast_examples() {
        let mut g = grid();
        // A free corridor along +x at y=z=0.
        for i in 0..10 {
            g.bump([i, 0, 0], -1);
        }
        let origin = Vector3::new(0.5, 0.5, 0.5);
        let dir = Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(g.raycast(&origin, &dir, 9.0).unwrap(), None);

        // An occupied wall at cell 5 is hit at its entry face x = 5.
        g.bump([5, 0, 0], 100);
        let hit = g.raycast(&origin, &dir, 9.0).unwrap().unwrap();
        assert_eq!(hit.class, OccupancyClass::Occupied);
        assert_eq!(hit.point, Vector3::new(5.0, 0.5, 0.5));
        assert_eq!(hit.cell, [5, 0, 0]);

        // Unobserved neighbor right after the origin cell.
        let mut g2 = grid();
        g2.bump([0, 0, 0], -1);
        let hit = g2.raycast(&origin, &dir, 9.0).unwrap().unwrap();
        assert_eq!(hit.class, OccupancyClass::Unobserved);
        assert_eq!(hit.point, Vector3::new(1.0, 0.5, 0.5));
        assert_eq!(hit.cell, [1, 0, 0]);
    }

    #[test]
    fn raycast_rejects_bad_arguments() {
        let g = grid();
        let origin = Vector3::zeros();
        assert!(matches!(
            g.raycast(&origin, &Vector3::new(2.0, 0.0, 0.0), 1.0),
            Err(OccupancyError::NonUnitDirection(_))
        ));
        assert!(matches!(
            g.raycast(&origin, &Vector3::new(1.0, 0.0, 0.0), 0.0),
            Err(OccupancyError::InvalidMaxDist(_))
        ));
    }

    // Exact traversal oracle, independent of the incremental stepper: collect
    // every axis-boundary crossing parameter, sort them, and classify the cell
    // at each interval midpoint in order.
    fn raycast_exact_oracle(
        g: &OccupancyGrid,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        max_dist: f64,
    ) -> Option<(OccupancyClass, CellIndex, f64)> {
        let res = g.resolution();
        let mut cuts = vec![0.0, max_dist];
        for i in 0..3 {
            if dir[i] == 0.0 {
                continue;
            }
            // First boundary ahead: the upper face for a positive component,
            // the lower face (index floor itself) for a negative one.
            let mut k = (origin[i] / res).floor() + if dir[i] < 0.0 { 1.0 } else { 0.0 };
            loop {
                k += if dir[i] > 0.0 { 1.0 } else { -1.0 };
                let t = (k * res - origin[i]) / dir[i];
                if t <= 0.0 {
                    continue;
                }
                if t >= max_dist {
                    break;
                }
                cuts.push(t);
            }
        }
        cuts.sort_by(f64::total_cmp);
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a < 1e-12 {
                continue;
            }
            let mid = origin + dir * ((a + b) / 2.0);
            let key = voxel_key(&mid, res);
            let class = g.class_of_key(key);
            if class != OccupancyClass::Free {
                return Some((class, key, a));
            }
        }
        None
    }

    // Fixed-step sampler at res/10; can skip cells the ray only corner-clips,
    // so it attests one direction: whatever it samples, the traversal must
    // have seen no later than that.
    fn raycast_sampler(
        g: &OccupancyGrid,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        max_dist: f64,
    ) -> Option<f64> {
        let step = g.resolution() / 10.0;
        let mut t = 0.0;
        while t <= max_dist {
            let key = voxel_key(&(origin + dir * t), g.resolution());
            if g.class_of_key(key) != OccupancyClass::Free {
                return Some(t);
            }
            t += step;
        }
        None
    }

    #[test]
    fn raycast_agrees_with_traversal_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut g = grid();
        // Random mix of free and occupied cells in a 12^3 block.
        for _ in 0..700 {
            let key = [
                rng.gen_range(0..12),
                rng.gen_range(0..12),
                rng.gen_range(0..12),
            ];
            g.bump(key, if rng.gen_bool(0.25) { 100 } else { -1 });
        }
        for _ in 0..1000 {
            let origin = Vector3::new(
                rng.gen_range(0.0..12.0),
                rng.gen_range(0.0..12.0),
                rng.gen_range(0.0..12.0),
            );
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() < 1e-3 {
                continue;
            }
            let dir = v.normalize();
            let max_dist = rng.gen_range(1.0..25.0);
            let got = g.raycast(&origin, &dir, max_dist).unwrap();
            match (&got, raycast_exact_oracle(&g, &origin, &dir, max_dist)) {
                (None, None) => {}
                (Some(hit), Some((eclass, ekey, et))) => {
                    assert_eq!(hit.class, eclass);
                    assert_eq!(hit.cell, ekey);
                    assert!(((hit.point - origin).norm() - et).abs() < 1e-9);
                }
                (got, expect) => panic!("raycast {got:?} vs oracle {expect:?}"),
            }
            // Sampler soundness: a sampled hit bounds the traversal hit from
            // above, and a clear traversal means the sampler sees nothing.
            match (&got, raycast_sampler(&g, &origin, &dir, max_dist)) {
                (_, None) => {}
                (Some(hit), Some(ts)) => {
                    assert!((hit.point - origin).norm() <= ts + 1e-9);
                }
                (None, Some(ts)) => panic!("traversal clear but sampler hit at {ts}"),
            }
        }
    }

    #[test]
    fn prune_merges_homogeneous_blocks() {
        let mut g = grid();
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    g.cells.insert([dx, dy, dz], -10);
                }
            }
        }
        g.prune_merge(2.0);
        assert_eq!(g.fine_cell_count(), 0);
        assert_eq!(g.merged_region_count(), 1);
        assert_eq!(g.log_odds_at([1, 1, 1]), Some(-10.0));
        assert_eq!(g.class_of_key([0, 0, 0]), OccupancyClass::Free);
    }

    #[test]
    fn prune_merges_near_homogeneous_at_mean() {
        let mut g = grid();
        let values = [100, 100, 100, 100, 100, 99, 100, 100];
        let mut i = 0;
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    g.cells.insert([dx, dy, dz], values[i]);
                    i += 1;
                }
            }
        }
        g.prune_merge(2.0);
        let mean = values.iter().map(|&v| v as f32).sum::<f32>() / 8.0;
        assert_eq!(g.log_odds_at([0, 0, 0]), Some(mean));
        assert_eq!(g.merged_region_count(), 1);
    }

    #[test]
    fn prune_never_merges_across_class_boundary() {
        let mut g = grid();
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    g.cells.insert([dx, dy, dz], if dx == 0 { -10 } else { 100 });
                }
            }
        }
        // Huge tolerance: the straddle rule alone must block the merge.
        g.prune_merge(1000.0);
        assert_eq!(g.fine_cell_count(), 8);
        assert_eq!(g.merged_region_count(), 0);
    }

    #[test]
    fn prune_recurses_to_coarser_levels() {
        let mut g = grid();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    g.cells.insert([x, y, z], -10);
                }
            }
        }
        g.prune_merge(0.0);
        assert_eq!(g.fine_cell_count(), 0);
        // 64 cells -> 8 level-1 regions -> 1 level-2 region.
        assert_eq!(g.merged_region_count(), 1);
        assert_eq!(g.log_odds_at([3, 3, 3]), Some(-10.0));
        assert_eq!(g.iterate_free().len(), 64);
    }

    #[test]
    fn query_class_stable_under_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let mut g = grid();
            for x in 0..16 {
                for y in 0..16 {
                    for z in 0..16 {
                        if rng.gen_bool(0.7) {
                            let v = if rng.gen_bool(0.5) {
                                rng.gen_range(-10..0)
                            } else {
                                rng.gen_range(0..=100)
                            };
                            g.cells.insert([x, y, z], v as i8);
                        }
                    }
                }
            }
            let before: Vec<OccupancyClass> = (0..16 * 16 * 16)
                .map(|i| g.class_of_key([i % 16, (i / 16) % 16, i / 256]))
                .collect();
            g.prune_merge(rng.gen_range(0.0..200.0));
            for (i, &b) in before.iter().enumerate() {
                let k = [i as i32 % 16, (i as i32 / 16) % 16, i as i32 / 256];
                assert_eq!(g.class_of_key(k), b);
            }
        }
    }

    #[test]
    fn updates_split_merged_regions() {
        let mut g = grid();
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    g.cells.insert([dx, dy, dz], -10);
                }
            }
        }
        g.prune_merge(0.0);
        assert_eq!(g.merged_region_count(), 1);
        g.bump([0, 0, 0], 100);
        assert_eq!(g.merged_region_count(), 0);
        assert_eq!(g.log_odds_at([0, 0, 0]), Some(90.0));
        // The 7 siblings reappear as fine cells with the region value.
        assert_eq!(g.log_odds_at([1, 1, 1]), Some(-10.0));
        assert_eq!(g.fine_cell_count(), 8);
    }

    #[test]
    fn iterate_free_matches_examples() {
        let g = grid();
        assert!(g.iterate_free().is_empty());
        let mut g = grid();
        g.bump([0, 0, 0], -1);
        g.bump([5, 0, 0], -1);
        g.bump([0, 7, 0], -1);
        g.bump([9, 9, 9], 100);
        assert_eq!(g.iterate_free().len(), 3);
    }

    // Independent reprojection oracle for frustum classification: sweeps a
    // generous superset of cells and classifies each center with separately
    // written math.
    fn classification_oracle(
        resolution: f64,
        pose: &Pose,
        intr: &CameraIntrinsics,
        depth: &DepthImage,
        occ_thickness: f64,
        sweep: i32,
    ) -> BTreeMap<CellIndex, OccupancyClass> {
        let mut out = BTreeMap::new();
        let inv = pose.inverse();
        let band = occ_thickness * resolution;
        for ix in -sweep..sweep {
            for iy in -sweep..sweep {
                for iz in -sweep..sweep {
                    let key = [ix, iy, iz];
                    let center = cell_center(key, resolution);
                    let pc = inv.rotation * center + inv.translation;
                    if pc.z <= 0.0 {
                        continue;
                    }
                    let u = intr.fx * pc.x / pc.z + intr.cx;
                    let v = intr.fy * pc.y / pc.z + intr.cy;
                    let (r, c) = (v.round(), u.round());
                    if r < 0.0 || c < 0.0 || r >= intr.height as f64 || c >= intr.width as f64 {
                        continue;
                    }
                    let d = depth.at(r as u32, c as u32) as f64;
                    if !d.is_finite() {
                        continue;
                    }
                    if pc.z < d - band {
                        out.insert(key, OccupancyClass::Free);
                    } else if (pc.z - d).abs() <= band / 2.0 {
                        out.insert(key, OccupancyClass::Occupied);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn frustum_classification_matches_reprojection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let intr = CameraIntrinsics::new(6.0, 6.0, 3.5, 3.5, 8, 8).unwrap();
        for _ in 0..30 {
            let values: Vec<f32> = (0..64)
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        f32::INFINITY
                    } else {
                        rng.gen_range(1.0..6.0)
                    }
                })
                .collect();
            let depth = DepthImage::new(8, 8, values);
            let pose = Pose::new(
                nalgebra::Matrix3::identity(),
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
            )
            .unwrap();
            let got = classify_frustum(1.0, &pose, &intr, &depth, 2.0).unwrap();
            let mut got_map = BTreeMap::new();
            for k in &got.free {
                got_map.insert(*k, OccupancyClass::Free);
            }
            for (k, _) in &got.occupied {
                got_map.insert(*k, OccupancyClass::Occupied);
            }
            let expect = classification_oracle(1.0, &pose, &intr, &depth, 2.0, 16);
            assert_eq!(got_map, expect);
        }
    }

    #[test]
    fn dump_is_sorted_and_parseable() {
        let mut g = grid();
        g.bump([2, 0, 0], -1);
        g.bump([-1, 5, 3], 100);
        g.bump([2, -4, 1], -1);
        let dump = g.dump_text();
        let rows: Vec<Vec<f64>> = dump
            .lines()
            .map(|l| l.split(' ').map(|t| t.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 3);
        let keys: Vec<(i64, i64, i64, i64)> = rows
            .iter()
            .map(|r| (r[0] as i64, r[1] as i64, r[2] as i64, r[3] as i64))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
