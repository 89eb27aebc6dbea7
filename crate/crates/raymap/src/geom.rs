//! Shared geometry: rigid poses, the pinhole camera model, voxel keys, and
//! the spherical-angle discretization used to bin ray directions.
//!
//! Everything here is pure; all angles are radians unless a name says degrees.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Signed integer cell coordinates at some stated resolution.
pub type CellIndex = [i32; 3];

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("rotation is not orthonormal with determinant +1")]
    NonOrthonormalRotation,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("direction is not unit length (|d| = {0})")]
    NonUnitDirection(f64),
    #[error("angle bin width must be positive (got {0})")]
    InvalidBinWidth(f64),
}

/// Cell index of the voxel containing `p` at resolution `res` (meters per cell).
///
/// Uses floor(p/res) componentwise, so the canonical cell center is
/// (key + 0.5) * res.
#[inline]
pub fn voxel_key(p: &Vector3<f64>, res: f64) -> CellIndex {
    [
        (p.x / res).floor() as i32,
        (p.y / res).floor() as i32,
        (p.z / res).floor() as i32,
    ]
}

/// Center point of the cell `key` at resolution `res`.
#[inline]
pub fn cell_center(key: CellIndex, res: f64) -> Vector3<f64> {
    Vector3::new(
        (key[0] as f64 + 0.5) * res,
        (key[1] as f64 + 0.5) * res,
        (key[2] as f64 + 0.5) * res,
    )
}

/// Floor division of a cell index by a coarsening factor.
#[inline]
pub fn coarsen_key(key: CellIndex, factor: i32) -> CellIndex {
    [
        key[0].div_euclid(factor),
        key[1].div_euclid(factor),
        key[2].div_euclid(factor),
    ]
}

/// Rigid transform: world point = rotation * p + translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    const ORTHONORMAL_TOL: f64 = 1e-6;

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant +1 within 1e-6.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeomError> {
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > Self::ORTHONORMAL_TOL || (rotation.determinant() - 1.0).abs() > 1e-4 {
            return Err(GeomError::NonOrthonormalRotation);
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Parses a 4x4 row-major homogeneous matrix (last row 0 0 0 1 expected).
    pub fn from_matrix_rows(m: &[f64; 16]) -> Result<Self, GeomError> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        Pose::new(rotation, translation)
    }

    /// Serializes back to a 4x4 row-major homogeneous matrix.
    pub fn to_matrix_rows(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotates a direction (no translation).
    #[inline]
    pub fn rotate(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera/body position in the target frame.
    #[inline]
    pub fn position(&self) -> Vector3<f64> {
        self.translation
    }

    /// Forward (optical) axis in the target frame: the image of +z.
    #[inline]
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation * Vector3::new(0.0, 0.0, 1.0)
    }
}

/// Pinhole camera intrinsics; pixel (row r, col c) has continuous image
/// coordinates (u = c, v = r) at its center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeomError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(0.0 <= cx && cx < width as f64) || !(0.0 <= cy && cy < height as f64) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Projects a camera-frame point; rejects z <= 0.
    ///
    /// Returns (u, v, depth) with depth = z.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Result<(f64, f64, f64), GeomError> {
        if p_cam.z <= 0.0 {
            return Err(GeomError::BehindCamera(p_cam.z));
        }
        Ok((
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
            p_cam.z,
        ))
    }

    /// Nearest pixel of a projection, or None when it falls outside the image.
    #[inline]
    pub fn nearest_pixel(&self, u: f64, v: f64) -> Option<(u32, u32)> {
        let c = u.round();
        let r = v.round();
        if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
            return None;
        }
        Some((r as u32, c as u32))
    }

    /// Camera-frame ray direction through pixel (r, c), unnormalized with z = 1
    /// so that the ray parameter equals camera-frame depth.
    #[inline]
    pub fn pixel_ray(&self, r: u32, c: u32) -> Vector3<f64> {
        Vector3::new(
            (c as f64 - self.cx) / self.fx,
            (r as f64 - self.cy) / self.fy,
            1.0,
        )
    }
}

/// H x W depth in meters; out-of-range is +infinity in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub height: u32,
    pub width: u32,
    pub values: Vec<f32>,
}

impl DepthImage {
    pub fn new(height: u32, width: u32, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), (height * width) as usize);
        debug_assert!(values.iter().all(|d| d.is_infinite() || *d > 0.0));
        DepthImage {
            height,
            width,
            values,
        }
    }

    pub fn constant(height: u32, width: u32, d: f32) -> Self {
        Self::new(height, width, vec![d; (height * width) as usize])
    }

    #[inline]
    pub fn at(&self, r: u32, c: u32) -> f32 {
        self.values[(r * self.width + c) as usize]
    }

    /// Copy with every value beyond `range` replaced by +infinity.
    /// A range of 0 masks everything; an infinite range is the identity.
    pub fn masked_beyond(&self, range: f64) -> DepthImage {
        if range.is_infinite() {
            return self.clone();
        }
        let values = self
            .values
            .iter()
            .map(|&d| if (d as f64) > range { f32::INFINITY } else { d })
            .collect();
        DepthImage {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

/// H x W x D feature map stored row-major, D contiguous per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub height: u32,
    pub width: u32,
    pub dim: u32,
    pub values: Vec<f32>,
}

impl FeatureImage {
    pub fn new(height: u32, width: u32, dim: u32, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), (height * width * dim) as usize);
        FeatureImage {
            height,
            width,
            dim,
            values,
        }
    }

    #[inline]
    pub fn at(&self, r: u32, c: u32) -> &[f32] {
        let start = ((r * self.width + c) * self.dim) as usize;
        &self.values[start..start + self.dim as usize]
    }
}

/// Spherical angles of a unit direction: theta = atan2(d.y, d.x) in [-pi, pi),
/// phi = acos(d.z) in [0, pi]. Rejects non-unit input (tolerance 1e-6).
pub fn direction_to_angles(d: &Vector3<f64>) -> Result<(f64, f64), GeomError> {
    let n = d.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(GeomError::NonUnitDirection(n));
    }
    Ok((d.y.atan2(d.x), d.z.clamp(-1.0, 1.0).acos()))
}

/// Inverse of [`direction_to_angles`].
#[inline]
pub fn angles_to_direction(theta: f64, phi: f64) -> Vector3<f64> {
    let (sp, cp) = (phi.sin(), phi.cos());
    Vector3::new(sp * theta.cos(), sp * theta.sin(), cp)
}

/// Azimuth/zenith bin indices at bin width psi degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AngleBin {
    pub theta_bin: u32,
    pub phi_bin: u32,
}

/// Number of azimuth bins: ceil(360 / psi).
#[inline]
pub fn theta_bin_count(psi_deg: f64) -> u32 {
    (360.0 / psi_deg).ceil() as u32
}

/// Number of zenith bins: ceil(180 / psi).
#[inline]
pub fn phi_bin_count(psi_deg: f64) -> u32 {
    (180.0 / psi_deg).ceil() as u32
}

/// Bins spherical angles at width `psi_deg` degrees.
///
/// theta_bin = floor((deg(theta)+180)/psi) with theta = pi wrapping to bin 0
/// (azimuth is periodic); phi_bin = floor(deg(phi)/psi) with phi = pi clamped
/// into the last bin.
pub fn angle_bin(theta: f64, phi: f64, psi_deg: f64) -> Result<AngleBin, GeomError> {
    if psi_deg <= 0.0 {
        return Err(GeomError::InvalidBinWidth(psi_deg));
    }
    let tcount = theta_bin_count(psi_deg);
    let pcount = phi_bin_count(psi_deg);
    // The 1e-9 guard absorbs the radians->degrees round-trip error so angles
    // that are exact bin boundaries in degrees land in the upper bin.
    let tb = ((theta.to_degrees() + 180.0) / psi_deg + 1e-9).floor() as i64;
    let pb = (((phi.to_degrees() / psi_deg + 1e-9).floor() as i64).max(0)).min(pcount as i64 - 1);
    Ok(AngleBin {
        theta_bin: tb.rem_euclid(tcount as i64) as u32,
        phi_bin: pb as u32,
    })
}

/// Unit direction at the center of an angle bin.
pub fn bin_center_direction(bin: AngleBin, psi_deg: f64) -> Vector3<f64> {
    let theta = (-180.0 + (bin.theta_bin as f64 + 0.5) * psi_deg).to_radians();
    let phi = ((bin.phi_bin as f64 + 0.5) * psi_deg).min(180.0).to_radians();
    angles_to_direction(theta, phi)
}

/// Axis-aligned box; `contains` is half-open: min <= p < max componentwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        debug_assert!(min.x <= max.x && min.y <= max.y && min.z <= max.z);
        Aabb { min, max }
    }

    #[inline]
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] < self.max[i])
    }

    /// Grows the box to cover `p`.
    pub fn expand_to(&mut self, p: &Vector3<f64>) {
        for i in 0..3 {
            self.min[i] = self.min[i].min(p[i]);
            self.max[i] = self.max[i].max(p[i]);
        }
    }

    /// Slab-method ray intersection: the parameter interval [t_near, t_far]
    /// where origin + t*dir is inside the box, or None when the ray misses.
    /// `dir` need not be normalized; t is in units of |dir|.
    pub fn intersect_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (t0, t1) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            let (t0, t1) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        Some((t_near, t_far))
    }
}
