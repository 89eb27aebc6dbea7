//! Pipeline configuration: one flat struct holding every mapping
//! hyperparameter, its validated defaults, and a key = value file format
//! whose keys are exactly the field names.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("{key}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invariant(String),
}

/// Which beyond-range representation a run maintains and evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Representation {
    RayFrontiers,
    SemPoses,
    SemVoxels,
    SphericalFronts,
    UnidirectionalFronts,
}

pub const ALL_REPRESENTATIONS: [Representation; 5] = [
    Representation::RayFrontiers,
    Representation::SemPoses,
    Representation::SemVoxels,
    Representation::SphericalFronts,
    Representation::UnidirectionalFronts,
];

impl Representation {
    pub fn as_str(self) -> &'static str {
        match self {
            Representation::RayFrontiers => "ray_frontiers",
            Representation::SemPoses => "sem_poses",
            Representation::SemVoxels => "sem_voxels",
            Representation::SphericalFronts => "spherical_fronts",
            Representation::UnidirectionalFronts => "unidirectional_fronts",
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Representation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_REPRESENTATIONS
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown representation {s:?}"))
    }
}

/// Every mapping and evaluation hyperparameter. Periods are in frames,
/// sizes in meters, angles in degrees, and log-odds quantities in the
/// occupancy grid's integer units.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub vox_size: f64,
    pub fronti_neighborhood_r: u32,
    pub fronti_min_unobserved: u32,
    pub fronti_min_occupied: u32,
    pub fronti_min_empty: u32,
    pub fronti_subsampling: u32,
    pub fronti_subsampling_min_fronti: u32,
    pub ray_erosion: u32,
    pub ray_tracing: bool,
    pub angle_bin_size: f64,
    pub max_occ_cnt: i32,
    pub max_empty_cnt: i32,
    pub occ_observ_weight: i32,
    pub occ_thickness: f64,
    pub occ_pruning_tolerance: f64,
    pub max_dirs_per_frame: u64,
    pub max_pts_per_frame: f64,
    pub max_empty_pts_per_frame: f64,
    pub vox_accum_period: u32,
    pub ray_accum_period: u32,
    pub ray_accum_phase: u32,
    pub stored_feat_dim: u32,
    pub sem_pruning_period: u32,
    pub occ_pruning_period: u32,
    pub prompt_denoising_thresh: f64,
    pub prediction_thresh: f64,
    pub searchvol_thresh: f64,
    pub depth_range: f64,
    pub representation: Representation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            vox_size: 1.0,
            fronti_neighborhood_r: 1,
            fronti_min_unobserved: 9,
            fronti_min_occupied: 0,
            fronti_min_empty: 4,
            fronti_subsampling: 4,
            fronti_subsampling_min_fronti: 5,
            ray_erosion: 32,
            ray_tracing: true,
            angle_bin_size: 30.0,
            max_occ_cnt: 100,
            max_empty_cnt: -10,
            occ_observ_weight: 100,
            occ_thickness: 2.0,
            occ_pruning_tolerance: 2.0,
            max_dirs_per_frame: 10000,
            max_pts_per_frame: f64::INFINITY,
            max_empty_pts_per_frame: f64::INFINITY,
            vox_accum_period: 8,
            ray_accum_period: 8,
            ray_accum_phase: 4,
            stored_feat_dim: 768,
            sem_pruning_period: 32,
            occ_pruning_period: 32,
            prompt_denoising_thresh: 0.5,
            prediction_thresh: 0.1,
            searchvol_thresh: 0.05,
            depth_range: f64::INFINITY,
            representation: Representation::RayFrontiers,
        }
    }
}

/// (key, current value, setter) table driving the file writer, the file
/// parser, and the command-line overrides, so key naming stays in one place.
macro_rules! config_fields {
    ($m:ident) => {
        $m!(
            vox_size,
            fronti_neighborhood_r,
            fronti_min_unobserved,
            fronti_min_occupied,
            fronti_min_empty,
            fronti_subsampling,
            fronti_subsampling_min_fronti,
            ray_erosion,
            ray_tracing,
            angle_bin_size,
            max_occ_cnt,
            max_empty_cnt,
            occ_observ_weight,
            occ_thickness,
            occ_pruning_tolerance,
            max_dirs_per_frame,
            max_pts_per_frame,
            max_empty_pts_per_frame,
            vox_accum_period,
            ray_accum_period,
            ray_accum_phase,
            stored_feat_dim,
            sem_pruning_period,
            occ_pruning_period,
            prompt_denoising_thresh,
            prediction_thresh,
            searchvol_thresh,
            depth_range,
            representation
        )
    };
}

impl PipelineConfig {
    /// Subsampling cap as a count; +infinity means uncapped.
    pub fn cap(limit: f64) -> usize {
        if limit.is_infinite() {
            usize::MAX
        } else {
            limit as usize
        }
    }

    /// Frontier grid resolution in meters.
    pub fn coarse_resolution(&self) -> f64 {
        self.vox_size * self.fronti_subsampling as f64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |msg: String| Err(ConfigError::Invariant(msg));
        if !(self.vox_size > 0.0) {
            return err("vox_size must be positive".into());
        }
        if self.fronti_subsampling < 1 {
            return err("fronti_subsampling must be at least 1".into());
        }
        if !(self.angle_bin_size > 0.0 && self.angle_bin_size <= 180.0) {
            return err("angle_bin_size must be in (0, 180] degrees".into());
        }
        if self.max_empty_cnt > 0 || self.max_occ_cnt < 0 {
            return err("log-odds limits must satisfy max_empty_cnt <= 0 <= max_occ_cnt".into());
        }
        if self.occ_observ_weight <= 0 {
            return err("occ_observ_weight must be positive".into());
        }
        if !(self.occ_thickness > 0.0) {
            return err("occ_thickness must be positive".into());
        }
        if self.occ_pruning_tolerance < 0.0 {
            return err("occ_pruning_tolerance must be nonnegative".into());
        }
        for (name, period) in [
            ("vox_accum_period", self.vox_accum_period),
            ("ray_accum_period", self.ray_accum_period),
            ("sem_pruning_period", self.sem_pruning_period),
            ("occ_pruning_period", self.occ_pruning_period),
        ] {
            if period < 1 {
                return err(format!("{name} must be at least 1"));
            }
        }
        for (name, t) in [
            ("prompt_denoising_thresh", self.prompt_denoising_thresh),
            ("prediction_thresh", self.prediction_thresh),
            ("searchvol_thresh", self.searchvol_thresh),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return err(format!("{name} must be in [0, 1]"));
            }
        }
        for (name, limit) in [
            ("max_pts_per_frame", self.max_pts_per_frame),
            ("max_empty_pts_per_frame", self.max_empty_pts_per_frame),
        ] {
            if limit.is_nan() || limit < 0.0 || (limit.is_finite() && limit.fract() != 0.0) {
                return err(format!("{name} must be a nonnegative count or inf"));
            }
        }
        if self.stored_feat_dim < 1 {
            return err("stored_feat_dim must be at least 1".into());
        }
        if self.depth_range.is_nan() || self.depth_range < 0.0 {
            return err("depth_range must be nonnegative (0 disables depth)".into());
        }
        Ok(())
    }

    /// Serializes as one `key = value` line per field, in declaration order.
    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($($field:ident),+) => {
                $(out.push_str(&format!("{} = {}\n", stringify!($field), self.$field));)+
            };
        }
        config_fields!(emit);
        out
    }

    /// Assigns one field from its textual form.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        macro_rules! assign {
            ($($field:ident),+) => {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse().map_err(|_| ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                        })?;
                    })+
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
            };
        }
        config_fields!(assign);
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored; later lines win.
    pub fn from_file_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            cfg.set_key(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_file_text(&text)
    }
}
