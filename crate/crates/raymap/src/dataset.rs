//! Scene storage and synthesis: fixed-endianness binary frame streams,
//! query and ground-truth files, box-world rendering for reproducible
//! benchmark scenes, and PCA feature compression.
//!
//! A scene is one directory: `intrinsics.txt` (6 ASCII floats: fx fy cx cy
//! w h), per frame `NNNNNN.pose` (16 ASCII floats, row-major
//! world-from-camera), `NNNNNN.depth` (magic "RFD1", u32 H W, then H*W f32,
//! all little-endian, row-major, +infinity = out of range), `NNNNNN.feat`
//! (magic "RFF1", u32 H W D, then H*W*D f32, pixel-major), `queries.bin`
//! (magic "RFQ1", u32 count dim, then per label a u32 byte length, UTF-8
//! name, and dim f32), `gt.bin` (magic "RFG1", f32 resolution, u32 count,
//! then per cell i32 ix iy iz and u32 class), and `bounds.txt` (6 ASCII
//! floats: min xyz, max xyz).

use crate::eval::GroundTruth;
use crate::geom::{Aabb, CameraIntrinsics, DepthImage, FeatureImage, GeomError, Pose};
use crate::query::enumerate_cells;
use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Class id carried by pixels that hit no object.
pub const BACKGROUND_CLASS: u32 = 0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: expected magic {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path}: truncated or trailing bytes")]
    BadSize { path: PathBuf },
    #[error("{path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("frame {index:06}: missing {kind} file in {dir}")]
    MissingFrameFile {
        dir: PathBuf,
        index: u32,
        kind: &'static str,
    },
    #[error("{dir}: missing intrinsics.txt")]
    MissingIntrinsics { dir: PathBuf },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("feature compression: {0}")]
    Compression(String),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, detail: impl Into<String>) -> DatasetError {
    DatasetError::Malformed {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses exactly `expected` whitespace-separated floats.
fn read_ascii_floats(path: &Path, expected: usize) -> Result<Vec<f64>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let mut values = Vec::with_capacity(expected);
    for token in text.split_whitespace() {
        let v: f64 = token
            .parse()
            .map_err(|_| malformed(path, format!("not a number: {token:?}")))?;
        values.push(v);
    }
    if values.len() != expected {
        return Err(malformed(
            path,
            format!("expected {expected} numbers, found {}", values.len()),
        ));
    }
    Ok(values)
}

fn write_text(path: &Path, text: &str) -> Result<(), DatasetError> {
    fs::write(path, text).map_err(io_error(path))
}

/// Display for f64 prints the shortest string that parses back to the same
/// bits, so ASCII files round-trip exactly.
fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_intrinsics(path: &Path, intr: &CameraIntrinsics) -> Result<(), DatasetError> {
    write_text(
        path,
        &format!(
            "{}\n",
            join_floats(&[
                intr.fx,
                intr.fy,
                intr.cx,
                intr.cy,
                intr.width as f64,
                intr.height as f64,
            ])
        ),
    )
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics, DatasetError> {
    let v = read_ascii_floats(path, 6)?;
    for (i, name) in [(4usize, "width"), (5, "height")] {
        if v[i] <= 0.0 || v[i].fract() != 0.0 || v[i] > u32::MAX as f64 {
            return Err(malformed(path, format!("{name} must be a positive integer")));
        }
    }
    CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as u32, v[5] as u32)
        .map_err(|e| malformed(path, e.to_string()))
}

pub fn write_pose(path: &Path, pose: &Pose) -> Result<(), DatasetError> {
    let m = pose.to_matrix_rows();
    let mut text = String::new();
    for row in m.chunks(4) {
        text.push_str(&join_floats(row));
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_pose(path: &Path) -> Result<Pose, DatasetError> {
    let v = read_ascii_floats(path, 16)?;
    let mut m = [0.0; 16];
    m.copy_from_slice(&v);
    Pose::from_matrix_rows(&m).map_err(|e| malformed(path, e.to_string()))
}

const DEPTH_MAGIC: &[u8; 4] = b"RFD1";
const FEAT_MAGIC: &[u8; 4] = b"RFF1";
const QUERY_MAGIC: &[u8; 4] = b"RFQ1";
const GT_MAGIC: &[u8; 4] = b"RFG1";

fn read_bytes(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(io_error(path))
}

fn check_magic(path: &Path, bytes: &[u8], magic: &'static [u8; 4]) -> Result<(), DatasetError> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(DatasetError::BadMagic {
            path: path.to_path_buf(),
            expected: std::str::from_utf8(magic).unwrap(),
        });
    }
    Ok(())
}

fn read_f32_block(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(LittleEndian::read_f32)
        .collect()
}

pub fn write_depth(path: &Path, depth: &DepthImage) -> Result<(), DatasetError> {
    let mut buf = Vec::with_capacity(12 + depth.values.len() * 4);
    buf.extend_from_slice(DEPTH_MAGIC);
    buf.write_u32::<LittleEndian>(depth.height).unwrap();
    buf.write_u32::<LittleEndian>(depth.width).unwrap();
    for &v in &depth.values {
        buf.write_f32::<LittleEndian>(v).unwrap();
    }
    fs::write(path, buf).map_err(io_error(path))
}

pub fn read_depth(path: &Path) -> Result<DepthImage, DatasetError> {
    let bytes = read_bytes(path)?;
    check_magic(path, &bytes, DEPTH_MAGIC)?;
    if bytes.len() < 12 {
        return Err(DatasetError::BadSize {
            path: path.to_path_buf(),
        });
    }
    let h = LittleEndian::read_u32(&bytes[4..8]);
    let w = LittleEndian::read_u32(&bytes[8..12]);
    let count = (h as usize).checked_mul(w as usize);
    match count {
        Some(n) if bytes.len() == 12 + 4 * n => {}
        _ => {
            return Err(DatasetError::BadSize {
                path: path.to_path_buf(),
            })
        }
    }
    Ok(DepthImage::new(h, w, read_f32_block(&bytes[12..])))
}

pub fn write_features(path: &Path, feats: &FeatureImage) -> Result<(), DatasetError> {
    let mut buf = Vec::with_capacity(16 + feats.values.len() * 4);
    buf.extend_from_slice(FEAT_MAGIC);
    buf.write_u32::<LittleEndian>(feats.height).unwrap();
    buf.write_u32::<LittleEndian>(feats.width).unwrap();
    buf.write_u32::<LittleEndian>(feats.dim).unwrap();
    for &v in &feats.values {
        buf.write_f32::<LittleEndian>(v).unwrap();
    }
    fs::write(path, buf).map_err(io_error(path))
}

pub fn read_features(path: &Path) -> Result<FeatureImage, DatasetError> {
    let bytes = read_bytes(path)?;
    check_magic(path, &bytes, FEAT_MAGIC)?;
    if bytes.len() < 16 {
        return Err(DatasetError::BadSize {
            path: path.to_path_buf(),
        });
    }
    let h = LittleEndian::read_u32(&bytes[4..8]);
    let w = LittleEndian::read_u32(&bytes[8..12]);
    let d = LittleEndian::read_u32(&bytes[12..16]);
    let count = (h as usize)
        .checked_mul(w as usize)
        .and_then(|n| n.checked_mul(d as usize));
    match count {
        Some(n) if bytes.len() == 16 + 4 * n => {}
        _ => {
            return Err(DatasetError::BadSize {
                path: path.to_path_buf(),
            })
        }
    }
    Ok(FeatureImage::new(h, w, d, read_f32_block(&bytes[16..])))
}

/// Writes the label set; every embedding must have length `dim`.
pub fn write_queries(
    path: &Path,
    labels: &[(String, Vec<f64>)],
    dim: u32,
) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(QUERY_MAGIC);
    buf.write_u32::<LittleEndian>(labels.len() as u32).unwrap();
    buf.write_u32::<LittleEndian>(dim).unwrap();
    for (name, embedding) in labels {
        if embedding.len() != dim as usize {
            return Err(malformed(
                path,
                format!(
                    "label {name:?} has {} components, expected {dim}",
                    embedding.len()
                ),
            ));
        }
        buf.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        buf.extend_from_slice(name.as_bytes());
        for &v in embedding {
            buf.write_f32::<LittleEndian>(v as f32).unwrap();
        }
    }
    fs::write(path, buf).map_err(io_error(path))
}

pub fn read_queries(path: &Path) -> Result<Vec<(String, Vec<f64>)>, DatasetError> {
    let bytes = read_bytes(path)?;
    check_magic(path, &bytes, QUERY_MAGIC)?;
    let bad_size = || DatasetError::BadSize {
        path: path.to_path_buf(),
    };
    if bytes.len() < 12 {
        return Err(bad_size());
    }
    let count = LittleEndian::read_u32(&bytes[4..8]);
    let dim = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let mut offset = 12usize;
    let mut labels = Vec::with_capacity(count as usize);
    for _ in 0..count {
        if bytes.len() < offset + 4 {
            return Err(bad_size());
        }
        let name_len = LittleEndian::read_u32(&bytes[offset..offset + 4]) as usize;
        offset += 4;
        if bytes.len() < offset + name_len + 4 * dim {
            return Err(bad_size());
        }
        let name = std::str::from_utf8(&bytes[offset..offset + name_len])
            .map_err(|_| malformed(path, "label name is not UTF-8"))?
            .to_string();
        offset += name_len;
        let embedding: Vec<f64> = read_f32_block(&bytes[offset..offset + 4 * dim])
            .into_iter()
            .map(f64::from)
            .collect();
        offset += 4 * dim;
        labels.push((name, embedding));
    }
    if offset != bytes.len() {
        return Err(bad_size());
    }
    Ok(labels)
}

pub fn write_gt(path: &Path, gt: &GroundTruth) -> Result<(), DatasetError> {
    let mut buf = Vec::with_capacity(12 + gt.cells.len() * 16);
    buf.extend_from_slice(GT_MAGIC);
    buf.write_f32::<LittleEndian>(gt.resolution as f32).unwrap();
    buf.write_u32::<LittleEndian>(gt.cells.len() as u32).unwrap();
    for (&[ix, iy, iz], &class) in &gt.cells {
        buf.write_i32::<LittleEndian>(ix).unwrap();
        buf.write_i32::<LittleEndian>(iy).unwrap();
        buf.write_i32::<LittleEndian>(iz).unwrap();
        buf.write_u32::<LittleEndian>(class).unwrap();
    }
    fs::write(path, buf).map_err(io_error(path))
}

pub fn read_gt(path: &Path) -> Result<GroundTruth, DatasetError> {
    let bytes = read_bytes(path)?;
    check_magic(path, &bytes, GT_MAGIC)?;
    if bytes.len() < 12 {
        return Err(DatasetError::BadSize {
            path: path.to_path_buf(),
        });
    }
    let resolution = LittleEndian::read_f32(&bytes[4..8]) as f64;
    if !(resolution > 0.0) {
        return Err(malformed(path, "resolution must be positive"));
    }
    let count = LittleEndian::read_u32(&bytes[8..12]) as usize;
    if bytes.len() != 12 + 16 * count {
        return Err(DatasetError::BadSize {
            path: path.to_path_buf(),
        });
    }
    let mut cells = BTreeMap::new();
    for i in 0..count {
        let at = 12 + 16 * i;
        let key = [
            LittleEndian::read_i32(&bytes[at..at + 4]),
            LittleEndian::read_i32(&bytes[at + 4..at + 8]),
            LittleEndian::read_i32(&bytes[at + 8..at + 12]),
        ];
        cells.insert(key, LittleEndian::read_u32(&bytes[at + 12..at + 16]));
    }
    Ok(GroundTruth { resolution, cells })
}

pub fn write_bounds(path: &Path, bounds: &Aabb) -> Result<(), DatasetError> {
    write_text(
        path,
        &format!(
            "{}\n",
            join_floats(&[
                bounds.min.x,
                bounds.min.y,
                bounds.min.z,
                bounds.max.x,
                bounds.max.y,
                bounds.max.z,
            ])
        ),
    )
}

pub fn read_bounds(path: &Path) -> Result<Aabb, DatasetError> {
    let v = read_ascii_floats(path, 6)?;
    if v[0] > v[3] || v[1] > v[4] || v[2] > v[5] {
        return Err(malformed(path, "min corner exceeds max corner"));
    }
    Ok(Aabb::new(
        Vector3::new(v[0], v[1], v[2]),
        Vector3::new(v[3], v[4], v[5]),
    ))
}

/// One frame of input: world-from-camera pose plus registered depth and
/// feature images.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub index: u32,
    pub pose: Pose,
    pub depth: DepthImage,
    pub features: FeatureImage,
}

fn frame_path(dir: &Path, index: u32, ext: &str) -> PathBuf {
    dir.join(format!("{index:06}.{ext}"))
}

pub fn write_frame(
    dir: &Path,
    index: u32,
    pose: &Pose,
    depth: &DepthImage,
    features: &FeatureImage,
) -> Result<(), DatasetError> {
    write_pose(&frame_path(dir, index, "pose"), pose)?;
    write_depth(&frame_path(dir, index, "depth"), depth)?;
    write_features(&frame_path(dir, index, "feat"), features)
}

/// An opened scene directory: shared intrinsics plus the sorted frame ids
/// discovered on disk. Frames are read lazily.
#[derive(Debug, Clone)]
pub struct SceneHandle {
    dir: PathBuf,
    intrinsics: Option<CameraIntrinsics>,
    frame_ids: Vec<u32>,
}

pub fn open_scene(dir: &Path) -> Result<SceneHandle, DatasetError> {
    let mut frame_ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_error(dir))? {
        let entry = entry.map_err(io_error(dir))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".pose") {
            if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
                frame_ids.push(stem.parse().unwrap());
            }
        }
    }
    frame_ids.sort_unstable();
    frame_ids.dedup();

    let intr_path = dir.join("intrinsics.txt");
    let intrinsics = if intr_path.exists() {
        Some(read_intrinsics(&intr_path)?)
    } else if frame_ids.is_empty() {
        None
    } else {
        return Err(DatasetError::MissingIntrinsics {
            dir: dir.to_path_buf(),
        });
    };
    Ok(SceneHandle {
        dir: dir.to_path_buf(),
        intrinsics,
        frame_ids,
    })
}

impl SceneHandle {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn frame_count(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn frame_ids(&self) -> &[u32] {
        &self.frame_ids
    }

    pub fn intrinsics(&self) -> Result<&CameraIntrinsics, DatasetError> {
        self.intrinsics
            .as_ref()
            .ok_or_else(|| DatasetError::MissingIntrinsics {
                dir: self.dir.clone(),
            })
    }

    /// Reads one frame by id, cross-checking image dimensions against the
    /// scene intrinsics.
    pub fn read_frame(&self, index: u32) -> Result<FrameRecord, DatasetError> {
        let intr = self.intrinsics()?;
        for (ext, kind) in [("pose", "pose"), ("depth", "depth"), ("feat", "feature")] {
            if !frame_path(&self.dir, index, ext).exists() {
                return Err(DatasetError::MissingFrameFile {
                    dir: self.dir.clone(),
                    index,
                    kind,
                });
            }
        }
        let pose = read_pose(&frame_path(&self.dir, index, "pose"))?;
        let depth_path = frame_path(&self.dir, index, "depth");
        let depth = read_depth(&depth_path)?;
        if (depth.height, depth.width) != (intr.height, intr.width) {
            return Err(malformed(
                &depth_path,
                format!(
                    "depth is {}x{} but intrinsics declare {}x{}",
                    depth.height, depth.width, intr.height, intr.width
                ),
            ));
        }
        let feat_path = frame_path(&self.dir, index, "feat");
        let features = read_features(&feat_path)?;
        if (features.height, features.width) != (intr.height, intr.width) {
            return Err(malformed(
                &feat_path,
                format!(
                    "features are {}x{} but intrinsics declare {}x{}",
                    features.height, features.width, intr.height, intr.width
                ),
            ));
        }
        Ok(FrameRecord {
            index,
            pose,
            depth,
            features,
        })
    }

    pub fn read_queries(&self) -> Result<Vec<(String, Vec<f64>)>, DatasetError> {
        read_queries(&self.dir.join("queries.bin"))
    }

    pub fn read_gt(&self) -> Result<GroundTruth, DatasetError> {
        read_gt(&self.dir.join("gt.bin"))
    }

    pub fn read_bounds(&self) -> Result<Aabb, DatasetError> {
        read_bounds(&self.dir.join("bounds.txt"))
    }
}

/// Lazy frame iterator over an opened scene, in ascending id order.
pub struct FrameStream {
    handle: SceneHandle,
    next: usize,
}

impl FrameStream {
    pub fn handle(&self) -> &SceneHandle {
        &self.handle
    }
}

impl Iterator for FrameStream {
    type Item = Result<FrameRecord, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        let id = *self.handle.frame_ids.get(self.next)?;
        self.next += 1;
        Some(self.handle.read_frame(id))
    }
}

/// Opens a scene directory as an ordered frame stream. An empty directory
/// yields an empty stream.
pub fn read_frame_stream(dir: &Path) -> Result<FrameStream, DatasetError> {
    Ok(FrameStream {
        handle: open_scene(dir)?,
        next: 0,
    })
}

/// A synthetic box-world scene: axis-aligned objects with class ids, a
/// camera trajectory, and the sensor range used at render time. Class id 0
/// is the background; object ids index into `labels`.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub bounds: Aabb,
    pub objects: Vec<(Aabb, u32)>,
    pub labels: Vec<String>,
    pub trajectory: Vec<Pose>,
    pub intrinsics: CameraIntrinsics,
    pub depth_range: f64,
    pub feature_dim: u32,
    pub gt_resolution: f64,
    pub seed: u64,
}

pub fn validate_scene(spec: &SceneSpec) -> Result<(), DatasetError> {
    let err = |msg: String| Err(DatasetError::InvalidScene(msg));
    if !(spec.depth_range > 0.0) {
        return err("depth_range must be positive".into());
    }
    if !(spec.gt_resolution > 0.0) {
        return err("gt_resolution must be positive".into());
    }
    if spec.labels.is_empty() {
        return err("labels must include at least the background".into());
    }
    if (spec.feature_dim as usize) < spec.labels.len() {
        return err(format!(
            "feature_dim {} cannot one-hot encode {} labels",
            spec.feature_dim,
            spec.labels.len()
        ));
    }
    for (i, (bx, class)) in spec.objects.iter().enumerate() {
        if *class == BACKGROUND_CLASS || (*class as usize) >= spec.labels.len() {
            return err(format!("object {i} has unknown class id {class}"));
        }
        if !(bx.min.x < bx.max.x && bx.min.y < bx.max.y && bx.min.z < bx.max.z) {
            return err(format!("object {i} is degenerate"));
        }
    }
    for (i, pose) in spec.trajectory.iter().enumerate() {
        let p = pose.position();
        for (j, (bx, _)) in spec.objects.iter().enumerate() {
            if bx.contains(&p) {
                return err(format!("camera pose {i} is inside object {j}"));
            }
        }
    }
    Ok(())
}

/// Nearest ray hit over all objects: (parameter t, class id). The parameter
/// is in units of |dir|, so an unnormalized pixel ray yields camera-frame
/// depth directly. Ties keep the earlier object.
fn nearest_hit(objects: &[(Aabb, u32)], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, u32)> {
    let mut best: Option<(f64, u32)> = None;
    for (bx, class) in objects {
        if let Some((t_near, t_far)) = bx.intersect_ray(origin, dir) {
            if t_near > 1e-9 && t_far >= t_near && best.map_or(true, |(t, _)| t_near < t) {
                best = Some((t_near, *class));
            }
        }
    }
    best
}

fn one_hot(class: u32, dim: u32) -> Vec<f64> {
    let mut v = vec![0.0; dim as usize];
    v[class as usize] = 1.0;
    v
}

/// Renders one frame against the object boxes. Hits within `depth_range`
/// record camera-frame depth; farther hits record +infinity while keeping
/// the hit object's one-hot feature, modelling semantics that remain
/// observable past the depth sensor's range. Misses carry the background
/// feature.
pub fn render_frame(spec: &SceneSpec, pose: &Pose) -> (DepthImage, FeatureImage) {
    let (h, w, d) = (
        spec.intrinsics.height,
        spec.intrinsics.width,
        spec.feature_dim,
    );
    let mut depth = vec![f32::INFINITY; (h * w) as usize];
    let mut feats = vec![0f32; (h as usize) * (w as usize) * (d as usize)];
    let origin = pose.position();
    for r in 0..h {
        for c in 0..w {
            let dir = pose.rotate(&spec.intrinsics.pixel_ray(r, c));
            let (t, class) = nearest_hit(&spec.objects, &origin, &dir)
                .unwrap_or((f64::INFINITY, BACKGROUND_CLASS));
            let px = (r * w + c) as usize;
            if t <= spec.depth_range {
                depth[px] = t as f32;
            }
            feats[px * d as usize + class as usize] = 1.0;
        }
    }
    (
        DepthImage::new(h, w, depth),
        FeatureImage::new(h, w, d, feats),
    )
}

/// Ground truth at `gt_resolution`: a cell is labeled with the first object
/// box containing its center.
pub fn voxelize_gt(spec: &SceneSpec) -> GroundTruth {
    let mut cells = BTreeMap::new();
    for key in enumerate_cells(&spec.bounds, spec.gt_resolution) {
        let center = crate::geom::cell_center(key, spec.gt_resolution);
        if let Some((_, class)) = spec.objects.iter().find(|(bx, _)| bx.contains(&center)) {
            cells.insert(key, *class);
        }
    }
    GroundTruth {
        resolution: spec.gt_resolution,
        cells,
    }
}

/// One-hot query embeddings for the scene's labels, padded to the feature
/// dimension.
pub fn scene_queries(spec: &SceneSpec) -> Vec<(String, Vec<f64>)> {
    spec.labels
        .iter()
        .enumerate()
        .map(|(i, name)| (name.clone(), one_hot(i as u32, spec.feature_dim)))
        .collect()
}

/// Renders every trajectory pose in memory.
pub fn render_scene(spec: &SceneSpec) -> Result<Vec<FrameRecord>, DatasetError> {
    validate_scene(spec)?;
    Ok(spec
        .trajectory
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let (depth, features) = render_frame(spec, pose);
            FrameRecord {
                index: i as u32,
                pose: *pose,
                depth,
                features,
            }
        })
        .collect())
}

/// Renders the scene and writes the full directory layout.
pub fn generate_scene_dir(spec: &SceneSpec, dir: &Path) -> Result<(), DatasetError> {
    validate_scene(spec)?;
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    write_intrinsics(&dir.join("intrinsics.txt"), &spec.intrinsics)?;
    write_bounds(&dir.join("bounds.txt"), &spec.bounds)?;
    write_queries(&dir.join("queries.bin"), &scene_queries(spec), spec.feature_dim)?;
    write_gt(&dir.join("gt.bin"), &voxelize_gt(spec))?;
    for (i, pose) in spec.trajectory.iter().enumerate() {
        let (depth, features) = render_frame(spec, pose);
        write_frame(dir, i as u32, pose, &depth, &features)?;
    }
    Ok(())
}

/// Camera pose at `eye` looking toward `target`, x right, y down, z forward,
/// world +z up.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Result<Pose, GeomError> {
    let f = target - eye;
    let n = f.norm();
    if n < 1e-9 {
        return Err(GeomError::NonUnitDirection(n));
    }
    let z = f / n;
    let mut x = z.cross(&Vector3::z());
    if x.norm() < 1e-6 {
        x = z.cross(&Vector3::y());
    }
    x.normalize_mut();
    let y = z.cross(&x);
    let rotation = Matrix3::from_columns(&[x, y, z]);
    Pose::new(rotation, *eye)
}

fn v3(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new(x, y, z)
}

fn small_intrinsics(width: u32, height: u32) -> CameraIntrinsics {
    CameraIntrinsics::new(
        width as f64 / 2.0,
        width as f64 / 2.0,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        width,
        height,
    )
    .unwrap()
}

/// A walled corridor with one object at the far end. The camera advances
/// down the corridor; the end object stays far enough away that a modest
/// sensor range never maps it, which exercises beyond-range semantics.
pub fn beacon_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wall = 1;
    let beacon = 2;
    let objects = vec![
        (Aabb::new(v3(0.0, 0.0, 0.0), v3(26.0, 8.0, 1.0)), wall),
        (Aabb::new(v3(0.0, 0.0, 7.0), v3(26.0, 8.0, 8.0)), wall),
        (Aabb::new(v3(0.0, 0.0, 1.0), v3(26.0, 1.0, 7.0)), wall),
        (Aabb::new(v3(0.0, 7.0, 1.0), v3(26.0, 8.0, 7.0)), wall),
        (Aabb::new(v3(22.0, 1.0, 1.0), v3(26.0, 7.0, 7.0)), beacon),
    ];
    let mut trajectory = Vec::new();
    for i in 0..24 {
        let eye = v3(
            2.0 + 0.25 * i as f64,
            4.0 + rng.gen_range(-0.2..0.2),
            4.0 + rng.gen_range(-0.2..0.2),
        );
        trajectory.push(look_at(&eye, &(eye + Vector3::x())).unwrap());
    }
    SceneSpec {
        bounds: Aabb::new(v3(0.0, 0.0, 0.0), v3(26.0, 8.0, 8.0)),
        objects,
        labels: vec!["background".into(), "wall".into(), "beacon".into()],
        trajectory,
        intrinsics: small_intrinsics(64, 48),
        depth_range: f64::INFINITY,
        feature_dim: 8,
        gt_resolution: 0.5,
        seed,
    }
}

/// Five separated boxes on a ring, orbited by the camera. Used for offline
/// segmentation scoring with oracle one-hot features.
pub fn five_class_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = Vec::new();
    let mut labels = vec!["background".to_string()];
    for k in 0..5u32 {
        let ang = std::f64::consts::TAU * k as f64 / 5.0;
        let center = v3(8.0 + 4.0 * ang.cos(), 8.0 + 4.0 * ang.sin(), 2.0);
        objects.push((
            Aabb::new(center - v3(1.0, 1.0, 1.0), center + v3(1.0, 1.0, 1.0)),
            k + 1,
        ));
        labels.push(format!("object_{}", (b'a' + k as u8) as char));
    }
    let target = v3(8.0, 8.0, 2.0);
    let mut trajectory = Vec::new();
    for i in 0..40 {
        let phi = std::f64::consts::TAU * i as f64 / 40.0 + rng.gen_range(-0.02..0.02);
        let eye = v3(8.0 + 7.0 * phi.cos(), 8.0 + 7.0 * phi.sin(), 5.0);
        trajectory.push(look_at(&eye, &target).unwrap());
    }
    SceneSpec {
        bounds: Aabb::new(v3(0.0, 0.0, 0.0), v3(16.0, 16.0, 8.0)),
        objects,
        labels,
        trajectory,
        intrinsics: small_intrinsics(64, 48),
        depth_range: f64::INFINITY,
        feature_dim: 8,
        gt_resolution: 0.25,
        seed,
    }
}

/// One box viewed from a short arc; the smallest useful scene.
pub fn single_box_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = v3(4.0, 4.0, 1.0);
    let mut trajectory = Vec::new();
    for i in 0..8 {
        let phi = std::f64::consts::FRAC_PI_4
            + std::f64::consts::TAU * i as f64 / 16.0
            + rng.gen_range(-0.01..0.01);
        let eye = v3(4.0 + 3.2 * phi.cos(), 4.0 + 3.2 * phi.sin(), 2.5);
        trajectory.push(look_at(&eye, &target).unwrap());
    }
    SceneSpec {
        bounds: Aabb::new(v3(0.0, 0.0, 0.0), v3(8.0, 8.0, 4.0)),
        objects: vec![(Aabb::new(v3(3.0, 3.0, 0.0), v3(5.0, 5.0, 2.0)), 1)],
        labels: vec!["background".into(), "box".into()],
        trajectory,
        intrinsics: small_intrinsics(32, 24),
        depth_range: f64::INFINITY,
        feature_dim: 4,
        gt_resolution: 0.25,
        seed,
    }
}

/// The corridor scene at camera resolution 320x240 with 32-dim features,
/// sized for throughput measurement rather than metric quality.
pub fn throughput_scene(seed: u64) -> SceneSpec {
    let mut spec = beacon_scene(seed);
    spec.intrinsics = small_intrinsics(320, 240);
    spec.feature_dim = 32;
    spec.trajectory.truncate(12);
    spec
}

/// PCA compressor: projects features onto the top-K principal directions of
/// a sample set. `basis` holds K orthonormal rows of length D; `spectrum`
/// holds all D sample-covariance eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct FeatureCompressor {
    pub mean: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub spectrum: Vec<f64>,
    pub degenerate: bool,
}

pub fn fit_compressor(samples: &[Vec<f64>], k: usize) -> Result<FeatureCompressor, DatasetError> {
    let n = samples.len();
    if k == 0 {
        return Err(DatasetError::Compression("need at least one component".into()));
    }
    if n <= k {
        return Err(DatasetError::Compression(format!(
            "need more than {k} samples, got {n}"
        )));
    }
    let d = samples[0].len();
    if k > d {
        return Err(DatasetError::Compression(format!(
            "{k} components exceed dimension {d}"
        )));
    }
    if samples.iter().any(|s| s.len() != d) {
        return Err(DatasetError::Compression(
            "samples have inconsistent dimensions".into(),
        ));
    }

    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let centered = DMatrix::from_fn(n, d, |i, j| samples[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spectrum: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0))
        .collect();

    let tol = spectrum[0] * 1e-9 + 1e-12;
    let rank = spectrum.iter().filter(|&&l| l > tol).count();
    let mut basis: Vec<Vec<f64>> = order
        .iter()
        .take(k.min(rank))
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    let degenerate = rank < k;

    // Rank-deficient input: complete the basis with orthonormal directions
    // from the standard basis so the output dimension stays K.
    let mut axis = 0;
    while basis.len() < k {
        debug_assert!(axis < d, "cannot complete an orthonormal basis past D");
        let mut w = vec![0.0; d];
        w[axis] = 1.0;
        axis += 1;
        for row in &basis {
            let dot: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
            for (wi, ri) in w.iter_mut().zip(row) {
                *wi -= dot * ri;
            }
        }
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for wi in &mut w {
                *wi /= norm;
            }
            basis.push(w);
        }
    }

    Ok(FeatureCompressor {
        mean,
        basis,
        spectrum,
        degenerate,
    })
}

impl FeatureCompressor {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.len()
    }

    pub fn compress(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim());
        self.basis
            .iter()
            .map(|row| {
                row.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(b, (xi, mi))| b * (xi - mi))
                    .sum()
            })
            .collect()
    }

    pub fn compress_f32(&self, x: &[f32]) -> Vec<f64> {
        let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        self.compress(&xs)
    }

    /// Maps a compressed vector back into the input space.
    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.output_dim());
        let mut x = self.mean.clone();
        for (row, yi) in self.basis.iter().zip(y) {
            for (xj, bj) in x.iter_mut().zip(row) {
                *xj += yi * bj;
            }
        }
        x
    }

    /// Fraction of sample variance captured by the K kept components.
    pub fn retained_variance(&self) -> f64 {
        let total: f64 = self.spectrum.iter().sum();
        if total <= 0.0 {
            return 1.0;
        }
        self.spectrum.iter().take(self.output_dim()).sum::<f64>() / total
    }
}
