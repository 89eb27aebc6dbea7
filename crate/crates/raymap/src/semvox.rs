//! Within-range semantic voxel map: featurized surface points accumulate in a
//! per-frame buffer, then fuse into voxels by hit-count-weighted averaging.
//! Voxels whose occupancy evidence turns Free are pruned away.

use crate::geom::{cell_center, CameraIntrinsics, CellIndex, DepthImage, FeatureImage, Pose};
use crate::occupancy::{classify_frustum, FrustumClassification, OccupancyClass, OccupancyGrid};
use crate::util::subsample_uniform;
use nalgebra::Vector3;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SemvoxError {
    #[error("depth is {dh}x{dw} but features are {fh}x{fw}")]
    DimensionMismatch { dh: u32, dw: u32, fh: u32, fw: u32 },
    #[error(transparent)]
    Occupancy(#[from] crate::occupancy::OccupancyError),
    #[error("point cloud export failed: {0}")]
    Io(#[from] std::io::Error),
}

/// One surface observation waiting to be fused.
#[derive(Debug, Clone)]
pub struct BufferedPoint {
    pub position: Vector3<f64>,
    pub rgb: [f32; 3],
    pub feature: Vec<f32>,
    pub hit_count: f64,
}

/// Accumulates local updates for a fixed number of frames before fusion.
#[derive(Debug, Default)]
pub struct LocalUpdateBuffer {
    pub points: Vec<BufferedPoint>,
    pub frames_accumulated: u32,
}

/// Fused per-voxel state. Means are kept in double precision so low-weight
/// contributions survive large hit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelData {
    pub rgb: [f64; 3],
    pub feature: Vec<f64>,
    pub hit_count: f64,
}

/// Sparse map of semantic voxels keyed at the map resolution.
#[derive(Debug, Clone, Default)]
pub struct SemanticVoxelMap {
    resolution: f64,
    voxels: BTreeMap<CellIndex, VoxelData>,
}

/// Appends the Occupied-classified frustum points of one frame to the buffer:
/// world position is the voxel center, the feature comes from the pixel that
/// observed the cell (nearest-neighbor lookup), RGB is zero for featureless
/// streams. Subsamples uniformly to `max_pts_per_frame`.
pub fn accumulate_frame(
    buf: &mut LocalUpdateBuffer,
    resolution: f64,
    pose: &Pose,
    intr: &CameraIntrinsics,
    depth: &DepthImage,
    features: &FeatureImage,
    occ_thickness: f64,
    max_pts_per_frame: usize,
) -> Result<(), SemvoxError> {
    if depth.height != features.height || depth.width != features.width {
        return Err(SemvoxError::DimensionMismatch {
            dh: depth.height,
            dw: depth.width,
            fh: features.height,
            fw: features.width,
        });
    }
    let cls = classify_frustum(resolution, pose, intr, depth, occ_thickness)?;
    append_classified(buf, &cls, resolution, features, max_pts_per_frame);
    Ok(())
}

/// Buffer-append step over a precomputed frustum classification (shared with
/// occupancy integration in the pipeline).
pub fn append_classified(
    buf: &mut LocalUpdateBuffer,
    cls: &FrustumClassification,
    resolution: f64,
    features: &FeatureImage,
    max_pts_per_frame: usize,
) {
    for (key, (r, c)) in subsample_uniform(&cls.occupied, max_pts_per_frame) {
        buf.points.push(BufferedPoint {
            position: cell_center(*key, resolution),
            rgb: [0.0; 3],
            feature: features.at(*r, *c).to_vec(),
            hit_count: 1.0,
        });
    }
    buf.frames_accumulated += 1;
}

impl SemanticVoxelMap {
    pub fn new(resolution: f64) -> Self {
        assert!(resolution > 0.0);
        SemanticVoxelMap {
            resolution,
            voxels: BTreeMap::new(),
        }
    }

    #[inline]
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CellIndex, &VoxelData)> {
        self.voxels.iter()
    }

    pub fn get(&self, key: CellIndex) -> Option<&VoxelData> {
        self.voxels.get(&key)
    }

    /// Center point of a voxel key at this map's resolution.
    pub fn center(&self, key: CellIndex) -> Vector3<f64> {
        cell_center(key, self.resolution)
    }

    /// Fuses all buffered points into the map: points sharing a voxel key
    /// merge with the existing voxel into hit-count-weighted mean feature and
    /// RGB; hit counts add up. Drains the buffer.
    pub fn fuse_into_global(&mut self, buf: &mut LocalUpdateBuffer) {
        let mut groups: BTreeMap<CellIndex, Vec<BufferedPoint>> = BTreeMap::new();
        for p in buf.points.drain(..) {
            groups
                .entry(crate::geom::voxel_key(&p.position, self.resolution))
                .or_default()
                .push(p);
        }
        buf.frames_accumulated = 0;
        for (key, points) in groups {
            let dim = points[0].feature.len();
            let mut acc = match self.voxels.remove(&key) {
                Some(v) => {
                    let mut f: Vec<f64> = v.feature.iter().map(|x| x * v.hit_count).collect();
                    f.resize(dim.max(f.len()), 0.0);
                    (
                        [
                            v.rgb[0] * v.hit_count,
                            v.rgb[1] * v.hit_count,
                            v.rgb[2] * v.hit_count,
                        ],
                        f,
                        v.hit_count,
                    )
                }
                None => ([0.0; 3], vec![0.0; dim], 0.0),
            };
            for p in points {
                let w = p.hit_count;
                for i in 0..3 {
                    acc.0[i] += p.rgb[i] as f64 * w;
                }
                for (a, x) in acc.1.iter_mut().zip(&p.feature) {
                    *a += *x as f64 * w;
                }
                acc.2 += w;
            }
            let total = acc.2;
            self.voxels.insert(
                key,
                VoxelData {
                    rgb: [acc.0[0] / total, acc.0[1] / total, acc.0[2] / total],
                    feature: acc.1.into_iter().map(|x| x / total).collect(),
                    hit_count: total,
                },
            );
        }
    }

    /// Removes every voxel whose center the occupancy grid now calls Free.
    /// Occupied voxels stay; Unobserved carries no contrary evidence, so those
    /// stay too.
    pub fn prune_with_occupancy(&mut self, grid: &OccupancyGrid) {
        let res = self.resolution;
        self.voxels
            .retain(|&key, _| grid.query(&cell_center(key, res)) != OccupancyClass::Free);
    }

    /// Total accumulated hit count across all voxels.
    pub fn total_hit_count(&self) -> f64 {
        self.voxels.values().map(|v| v.hit_count).sum()
    }

    /// Writes one CSV record per voxel: center, RGB, hit count, and an
    /// optional class id (-1 when the voxel has no label).
    pub fn export_point_cloud(
        &self,
        path: &Path,
        labels: Option<&BTreeMap<CellIndex, usize>>,
    ) -> Result<(), SemvoxError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "x,y,z,r,g,b,hit_count,class")?;
        for (&key, v) in &self.voxels {
            let c = self.center(key);
            let label = labels
                .and_then(|m| m.get(&key))
                .map(|&l| l as i64)
                .unwrap_or(-1);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                c.x, c.y, c.z, v.rgb[0], v.rgb[1], v.rgb[2], v.hit_count, label
            )?;
        }
        Ok(())
    }
}
