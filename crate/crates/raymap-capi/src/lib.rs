//! C ABI over the mapping pipeline. Callers hold opaque config and pipeline
//! handles, every fallible entry point returns a status code, and the failure
//! message is retrievable per thread through [`raymap_last_error`]. The
//! matching header is regenerated into include/raymap.h on every build.

#![allow(non_camel_case_types)]

use raymap::config::{PipelineConfig, Representation, ALL_REPRESENTATIONS};
use raymap::dataset::FrameRecord;
use raymap::geom::{CameraIntrinsics, DepthImage, FeatureImage, Pose};
use raymap::pipeline::Pipeline;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

/// Status code returned by every fallible entry point. Anything other than
/// RAYMAP_OK leaves a message in raymap_last_error.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum raymap_status {
    RAYMAP_OK = 0,
    /// A required pointer argument was NULL.
    RAYMAP_ERR_NULL_ARGUMENT = 1,
    /// An argument was malformed (bad key, bad UTF-8, bad pose, bad buffer
    /// contents).
    RAYMAP_ERR_INVALID_ARGUMENT = 2,
    /// The configuration failed validation.
    RAYMAP_ERR_INVALID_CONFIG = 3,
    /// The pipeline rejected the operation.
    RAYMAP_ERR_PIPELINE = 4,
    /// A filesystem operation failed.
    RAYMAP_ERR_IO = 5,
    /// A panic was caught at the boundary; the handle should be freed.
    RAYMAP_ERR_INTERNAL = 6,
}

use raymap_status::*;

/// Opaque pipeline configuration handle.
pub struct raymap_config {
    inner: PipelineConfig,
}

/// Opaque mapping pipeline handle.
pub struct raymap_pipeline {
    inner: Pipeline,
}

/// Map statistics snapshot filled by raymap_pipeline_counts.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct raymap_counts {
    /// Frames accepted so far.
    pub frames: u64,
    /// Fused semantic voxels.
    pub semantic_voxels: u64,
    /// Direction-binned ray frontier entries.
    pub ray_entries: u64,
    /// Occupancy regions (fine cells plus merged super-voxels).
    pub occupancy_regions: u64,
    /// Coarse frontier cells.
    pub frontiers: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg)
        .unwrap_or_else(|_| CString::new("error message contained a NUL byte").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: raymap_status, msg: impl Into<String>) -> raymap_status {
    set_last_error(msg.into());
    status
}

fn guarded(f: impl FnOnce() -> raymap_status) -> raymap_status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(RAYMAP_ERR_INTERNAL, "panic caught at the C boundary"),
    }
}

/// Message for the most recent failed call on this thread, or NULL when the
/// most recent call succeeded. The pointer stays valid until the next
/// raymap_* call from the same thread.
#[no_mangle]
pub extern "C" fn raymap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(ptr::null(), |c| c.as_ptr())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn raymap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Allocates a configuration preloaded with the library defaults. Never
/// fails. Free with raymap_config_free.
#[no_mangle]
pub extern "C" fn raymap_config_new() -> *mut raymap_config {
    clear_last_error();
    Box::into_raw(Box::new(raymap_config {
        inner: PipelineConfig::default(),
    }))
}

/// Releases a configuration handle. NULL is accepted and ignored.
///
/// # Safety
/// `cfg` must be NULL or a pointer from raymap_config_new that has not been
/// freed yet; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn raymap_config_free(cfg: *mut raymap_config) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

fn write_field(cfg: &mut PipelineConfig, key: &str, value: f64) -> Result<(), String> {
    fn as_u32(v: f64) -> Result<u32, String> {
        if v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v) {
            Ok(v as u32)
        } else {
            Err(format!("{v} is not representable as u32"))
        }
    }
    fn as_i32(v: f64) -> Result<i32, String> {
        if v.fract() == 0.0 && (i32::MIN as f64..=i32::MAX as f64).contains(&v) {
            Ok(v as i32)
        } else {
            Err(format!("{v} is not representable as i32"))
        }
    }
    fn as_u64(v: f64) -> Result<u64, String> {
        if v.fract() == 0.0 && (0.0..=u64::MAX as f64).contains(&v) {
            Ok(v as u64)
        } else {
            Err(format!("{v} is not representable as u64"))
        }
    }
    fn as_bool(v: f64) -> Result<bool, String> {
        match v {
            v if v == 0.0 => Ok(false),
            v if v == 1.0 => Ok(true),
            _ => Err(format!("{v} is not a boolean (use 0 or 1)")),
        }
    }
    match key {
        "vox_size" => cfg.vox_size = value,
        "fronti_neighborhood_r" => cfg.fronti_neighborhood_r = as_u32(value)?,
        "fronti_min_unobserved" => cfg.fronti_min_unobserved = as_u32(value)?,
        "fronti_min_occupied" => cfg.fronti_min_occupied = as_u32(value)?,
        "fronti_min_empty" => cfg.fronti_min_empty = as_u32(value)?,
        "fronti_subsampling" => cfg.fronti_subsampling = as_u32(value)?,
        "fronti_subsampling_min_fronti" => cfg.fronti_subsampling_min_fronti = as_u32(value)?,
        "ray_erosion" => cfg.ray_erosion = as_u32(value)?,
        "ray_tracing" => cfg.ray_tracing = as_bool(value)?,
        "angle_bin_size" => cfg.angle_bin_size = value,
        "max_occ_cnt" => cfg.max_occ_cnt = as_i32(value)?,
        "max_empty_cnt" => cfg.max_empty_cnt = as_i32(value)?,
        "occ_observ_weight" => cfg.occ_observ_weight = as_i32(value)?,
        "occ_thickness" => cfg.occ_thickness = value,
        "occ_pruning_tolerance" => cfg.occ_pruning_tolerance = value,
        "max_dirs_per_frame" => cfg.max_dirs_per_frame = as_u64(value)?,
        "max_pts_per_frame" => cfg.max_pts_per_frame = value,
        "max_empty_pts_per_frame" => cfg.max_empty_pts_per_frame = value,
        "vox_accum_period" => cfg.vox_accum_period = as_u32(value)?,
        "ray_accum_period" => cfg.ray_accum_period = as_u32(value)?,
        "ray_accum_phase" => cfg.ray_accum_phase = as_u32(value)?,
        "stored_feat_dim" => cfg.stored_feat_dim = as_u32(value)?,
        "sem_pruning_period" => cfg.sem_pruning_period = as_u32(value)?,
        "occ_pruning_period" => cfg.occ_pruning_period = as_u32(value)?,
        "prompt_denoising_thresh" => cfg.prompt_denoising_thresh = value,
        "prediction_thresh" => cfg.prediction_thresh = value,
        "searchvol_thresh" => cfg.searchvol_thresh = value,
        "depth_range" => cfg.depth_range = value,
        "representation" => {
            return Err("representation is set with raymap_config_set_representation".into())
        }
        _ => return Err(format!("unknown config key '{key}'")),
    }
    Ok(())
}

fn read_field(cfg: &PipelineConfig, key: &str) -> Result<f64, String> {
    Ok(match key {
        "vox_size" => cfg.vox_size,
        "fronti_neighborhood_r" => cfg.fronti_neighborhood_r as f64,
        "fronti_min_unobserved" => cfg.fronti_min_unobserved as f64,
        "fronti_min_occupied" => cfg.fronti_min_occupied as f64,
        "fronti_min_empty" => cfg.fronti_min_empty as f64,
        "fronti_subsampling" => cfg.fronti_subsampling as f64,
        "fronti_subsampling_min_fronti" => cfg.fronti_subsampling_min_fronti as f64,
        "ray_erosion" => cfg.ray_erosion as f64,
        "ray_tracing" => cfg.ray_tracing as u8 as f64,
        "angle_bin_size" => cfg.angle_bin_size,
        "max_occ_cnt" => cfg.max_occ_cnt as f64,
        "max_empty_cnt" => cfg.max_empty_cnt as f64,
        "occ_observ_weight" => cfg.occ_observ_weight as f64,
        "occ_thickness" => cfg.occ_thickness,
        "occ_pruning_tolerance" => cfg.occ_pruning_tolerance,
        "max_dirs_per_frame" => cfg.max_dirs_per_frame as f64,
        "max_pts_per_frame" => cfg.max_pts_per_frame,
        "max_empty_pts_per_frame" => cfg.max_empty_pts_per_frame,
        "vox_accum_period" => cfg.vox_accum_period as f64,
        "ray_accum_period" => cfg.ray_accum_period as f64,
        "ray_accum_phase" => cfg.ray_accum_phase as f64,
        "stored_feat_dim" => cfg.stored_feat_dim as f64,
        "sem_pruning_period" => cfg.sem_pruning_period as f64,
        "occ_pruning_period" => cfg.occ_pruning_period as f64,
        "prompt_denoising_thresh" => cfg.prompt_denoising_thresh,
        "prediction_thresh" => cfg.prediction_thresh,
        "searchvol_thresh" => cfg.searchvol_thresh,
        "depth_range" => cfg.depth_range,
        _ => return Err(format!("unknown config key '{key}'")),
    })
}

/// Sets a numeric or boolean field by its snake_case name; booleans take 0
/// or 1, integer fields reject fractional values. The representation field
/// has its own setter.
///
/// # Safety
/// `cfg` must be a live pointer from raymap_config_new and `key` a
/// NUL-terminated string; both must stay valid for the duration of the call.
#[no_mangle]
pub unsafe extern "C" fn raymap_config_set(
    cfg: *mut raymap_config,
    key: *const c_char,
    value: f64,
) -> raymap_status {
    clear_last_error();
    if cfg.is_null() || key.is_null() {
        return fail(RAYMAP_ERR_NULL_ARGUMENT, "cfg and key must be non-NULL");
    }
    let cfg = &mut (*cfg).inner;
    let key = CStr::from_ptr(key);
    guarded(move || {
        let Ok(key) = key.to_str() else {
            return fail(RAYMAP_ERR_INVALID_ARGUMENT, "key is not valid UTF-8");
        };
        match write_field(cfg, key, value) {
            Ok(()) => RAYMAP_OK,
            Err(m) => fail(RAYMAP_ERR_INVALID_ARGUMENT, m),
        }
    })
}

/// Reads a numeric or boolean field by its snake_case name into `out`
/// (booleans come back as 0 or 1).
///
/// # Safety
/// `cfg` must be a live pointer from raymap_config_new, `key` a
/// NUL-terminated string, and `out` a writable double.
#[no_mangle]
pub unsafe extern "C" fn raymap_config_get(
    cfg: *const raymap_config,
    key: *const c_char,
    out: *mut f64,
) -> raymap_status {
    clear_last_error();
    if cfg.is_null() || key.is_null() || out.is_null() {
        return fail(RAYMAP_ERR_NULL_ARGUMENT, "cfg, key, and out must be non-NULL");
    }
    let cfg = &(*cfg).inner;
    let key = CStr::from_ptr(key);
    let out = &mut *out;
    guarded(move || {
        let Ok(key) = key.to_str() else {
            return fail(RAYMAP_ERR_INVALID_ARGUMENT, "key is not valid UTF-8");
        };
        match read_field(cfg, key) {
            Ok(v) => {
                *out = v;
                RAYMAP_OK
            }
            Err(m) => fail(RAYMAP_ERR_INVALID_ARGUMENT, m),
        }
    })
}

/// Selects the map representation by name: one of "ray_frontiers",
/// "sem_poses", "sem_voxels", "spherical_fronts", "unidirectional_fronts".
///
/// # Safety
/// `cfg` must be a live pointer from raymap_config_new and `name` a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn raymap_config_set_representation(
    cfg: *mut raymap_config,
    name: *const c_char,
) -> raymap_status {
    clear_last_error();
    if cfg.is_null() || name.is_null() {
        return fail(RAYMAP_ERR_NULL_ARGUMENT, "cfg and name must be non-NULL");
    }
    let cfg = &mut (*cfg).inner;
    let name = CStr::from_ptr(name);
    guarded(move || {
        let Ok(name) = name.to_str() else {
            return fail(RAYMAP_ERR_INVALID_ARGUMENT, "name is not valid UTF-8");
        };
        match name.parse::<Representation>() {
            Ok(rep) => {
                cfg.representation = rep;
                RAYMAP_OK
            }
            Err(_) => {
                let names: Vec<&str> = ALL_REPRESENTATIONS.iter().map(|r| r.as_str()).collect();
                fail(
                    RAYMAP_ERR_INVALID_ARGUMENT,
                    format!("unknown representation '{name}'; expected one of {names:?}"),
                )
            }
        }
    })
}

/// Checks the configuration without building a pipeline.
///
/// # Safety
/// `cfg` must be a live pointer from raymap_config_new.
#[no_mangle]
pub unsafe extern "C" fn raymap_config_validate(cfg: *const raymap_config) -> raymap_status {
    clear_last_error();
    if cfg.is_null() {
        return fail(RAYMAP_ERR_NULL_ARGUMENT, "cfg must be non-NULL");
    }
    let cfg = &(*cfg).inner;
    guarded(move || match cfg.validate() {
        Ok(()) => RAYMAP_OK,
        Err(e) => fail(RAYMAP_ERR_INVALID_CONFIG, e.to_string()),
    })
}

/// Builds a pipeline from the configuration (validating it first). Returns
/// NULL on failure with the reason in raymap_last_error. The config handle
/// stays owned by the caller and can be freed or reused afterwards.
///
/// # Safety
/// `cfg` must be NULL (which fails cleanly) or a live pointer from
/// raymap_config_new.
#[no_mangle]
pub unsafe extern "C" fn raymap_pipeline_new(cfg: *const raymap_config) -> *mut raymap_pipeline {
    clear_last_error();
    if cfg.is_null() {
        set_last_error("cfg must be non-NULL".into());
        return ptr::null_mut();
    }
    let cfg = (*cfg).inner.clone();
    match catch_unwind(AssertUnwindSafe(|| Pipeline::new(cfg))) {
        Ok(Ok(p)) => Box::into_raw(Box::new(raymap_pipeline { inner: p })),
        Ok(Err(e)) => {
            set_last_error(e.to_string());
            ptr::null_mut()
        }
        Err(_) => {
            set_last_error("panic caught at the C boundary".into());
            ptr::null_mut()
        }
    }
}

/// Releases a pipeline handle. NULL is accepted and ignored.
///
/// # Safety
/// `pipe` must be NULL or a pointer from raymap_pipeline_new that has not
/// been freed yet; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn raymap_pipeline_free(pipe: *mut raymap_pipeline) {
    if !pipe.is_null() {
        drop(Box::from_raw(pipe));
    }
}

/// Feeds one posed frame into the map.
///
/// `pose` is a row-major 4x4 world-from-camera matrix (16 doubles, last row
/// 0 0 0 1, camera x right / y down / z forward). `intrinsics` is six
/// doubles {fx, fy, cx, cy, width, height} with integral positive sizes.
/// `depth` holds width*height meters in row-major order, +infinity for
/// pixels with no return inside the sensing range; every value must be
/// positive or +infinity. `features` holds width*height*feature_dim values,
/// row-major with the feature dimension innermost.
///
/// # Safety
/// All pointers must be non-NULL and the buffers at least as long as the
/// lengths documented above for the duration of the call.
#[no_mangle]
pub unsafe extern "C" fn raymap_pipeline_process_frame(
    pipe: *mut raymap_pipeline,
    pose: *const f64,
    intrinsics: *const f64,
    feature_dim: u32,
    depth: *const f32,
    features: *const f32,
) -> raymap_status {
    clear_last_error();
    if pipe.is_null()
        || pose.is_null()
        || intrinsics.is_null()
        || depth.is_null()
        || features.is_null()
    {
        return fail(RAYMAP_ERR_NULL_ARGUMENT, "all pointers must be non-NULL");
    }
    let pipe = &mut (*pipe).inner;
    guarded(move || {
        let intr = std::slice::from_raw_parts(intrinsics, 6);
        let (w, h) = (intr[4], intr[5]);
        if !(w.fract() == 0.0 && h.fract() == 0.0 && w >= 1.0 && h >= 1.0)
            || w > u32::MAX as f64
            || h > u32::MAX as f64
        {
            return fail(
                RAYMAP_ERR_INVALID_ARGUMENT,
                format!("image size {w}x{h} must be positive integers"),
            );
        }
        let (width, height) = (w as u32, h as u32);
        if feature_dim == 0 {
            return fail(RAYMAP_ERR_INVALID_ARGUMENT, "feature_dim must be at least 1");
        }
        let intr = match CameraIntrinsics::new(intr[0], intr[1], intr[2], intr[3], width, height)
        {
            Ok(i) => i,
            Err(e) => return fail(RAYMAP_ERR_INVALID_ARGUMENT, e.to_string()),
        };
        let mat: [f64; 16] = std::slice::from_raw_parts(pose, 16).try_into().unwrap();
        let pose = match Pose::from_matrix_rows(&mat) {
            Ok(p) => p,
            Err(e) => return fail(RAYMAP_ERR_INVALID_ARGUMENT, e.to_string()),
        };
        let px = width as usize * height as usize;
        let depth = std::slice::from_raw_parts(depth, px);
        if let Some(bad) = depth.iter().find(|d| !(**d > 0.0)) {
            return fail(
                RAYMAP_ERR_INVALID_ARGUMENT,
                format!("depth values must be positive or +infinity, got {bad}"),
            );
        }
        let features = std::slice::from_raw_parts(features, px * feature_dim as usize);
        let record = FrameRecord {
            index: pipe.frames_processed() as u32,
            pose,
            depth: DepthImage::new(height, width, depth.to_vec()),
            features: FeatureImage::new(height, width, feature_dim, features.to_vec()),
        };
        match pipe.process_frame(&record, &intr) {
            Ok(()) => RAYMAP_OK,
            Err(e) => fail(RAYMAP_ERR_PIPELINE, e.to_string()),
        }
    })
}

/// Flushes buffered points and rays; call once after the last frame.
///
/// # Safety
/// `pipe` must be a live pointer from raymap_pipeline_new.
#[no_mangle]
pub unsafe extern "C" fn raymap_pipeline_finish(pipe: *mut raymap_pipeline) -> raymap_status {
    clear_last_error();
    if pipe.is_null() {
        return fail(RAYMAP_ERR_NULL_ARGUMENT, "pipe must be non-NULL");
    }
    let pipe = &mut (*pipe).inner;
    guarded(move || match pipe.finish() {
        Ok(()) => RAYMAP_OK,
        Err(e) => fail(RAYMAP_ERR_PIPELINE, e.to_string()),
    })
}

/// Fills `out` with the current map statistics.
///
/// # Safety
/// `pipe` must be a live pointer from raymap_pipeline_new and `out` a
/// writable raymap_counts.
#[no_mangle]
pub unsafe extern "C" fn raymap_pipeline_counts(
    pipe: *const raymap_pipeline,
    out: *mut raymap_counts,
) -> raymap_status {
    clear_last_error();
    if pipe.is_null() || out.is_null() {
        return fail(RAYMAP_ERR_NULL_ARGUMENT, "pipe and out must be non-NULL");
    }
    let pipe = &(*pipe).inner;
    let out = &mut *out;
    guarded(move || {
        *out = raymap_counts {
            frames: pipe.frames_processed(),
            semantic_voxels: pipe.semantics().len() as u64,
            ray_entries: pipe.rays().len() as u64,
            occupancy_regions: (pipe.occupancy().fine_cell_count()
                + pipe.occupancy().merged_region_count()) as u64,
            frontiers: pipe.frontiers().len() as u64,
        };
        RAYMAP_OK
    })
}

/// Writes the map artifacts into `out_dir` (created if missing):
/// voxels.csv, rays.txt, and occupancy.txt.
///
/// # Safety
/// `pipe` must be a live pointer from raymap_pipeline_new and `out_dir` a
/// NUL-terminated path string.
#[no_mangle]
pub unsafe extern "C" fn raymap_pipeline_export(
    pipe: *const raymap_pipeline,
    out_dir: *const c_char,
) -> raymap_status {
    clear_last_error();
    if pipe.is_null() || out_dir.is_null() {
        return fail(RAYMAP_ERR_NULL_ARGUMENT, "pipe and out_dir must be non-NULL");
    }
    let pipe = &(*pipe).inner;
    let out_dir = CStr::from_ptr(out_dir);
    guarded(move || {
        let Ok(out_dir) = out_dir.to_str() else {
            return fail(RAYMAP_ERR_INVALID_ARGUMENT, "out_dir is not valid UTF-8");
        };
        let dir = Path::new(out_dir);
        if let Err(e) = std::fs::create_dir_all(dir) {
            return fail(RAYMAP_ERR_IO, format!("creating {out_dir}: {e}"));
        }
        if let Err(e) = pipe.semantics().export_point_cloud(&dir.join("voxels.csv"), None) {
            return fail(RAYMAP_ERR_IO, format!("writing voxels.csv: {e}"));
        }
        if let Err(e) = std::fs::write(dir.join("rays.txt"), pipe.rays().dump_text()) {
            return fail(RAYMAP_ERR_IO, format!("writing rays.txt: {e}"));
        }
        if let Err(e) = std::fs::write(dir.join("occupancy.txt"), pipe.occupancy().dump_text()) {
            return fail(RAYMAP_ERR_IO, format!("writing occupancy.txt: {e}"));
        }
        RAYMAP_OK
    })
}
