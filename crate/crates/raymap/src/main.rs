//! Command-line front end: map a scene directory, run the online
//! search-volume benchmark or the offline segmentation evaluation, or
//! generate a synthetic scene to run them on.

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use raymap::bench::{run_offline_eval, run_online_benchmark, EvalOptions};
use raymap::config::{PipelineConfig, Representation, ALL_REPRESENTATIONS};
use raymap::dataset::{
    beacon_scene, five_class_scene, generate_scene_dir, single_box_scene, throughput_scene,
};
use raymap::pipeline::run_mapping;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "raymap",
    about = "Open-set 3D semantic mapping with beyond-range semantic rays, \
             and a planner-agnostic search-volume benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Map a scene directory and export voxel, ray, and occupancy dumps.
    Map {
        /// Scene directory (poses, depth, features, intrinsics).
        scene: PathBuf,
        /// Output directory for the exported dumps.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score representations on search-volume reduction over one scene.
    BenchOnline {
        scene: PathBuf,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
        /// Comma-separated subset of representations to run.
        #[arg(long, value_delimiter = ',')]
        representations: Option<Vec<Representation>>,
        /// Frames between evaluation points (default: vox_accum_period).
        #[arg(long)]
        eval_period: Option<u32>,
        /// Search-cone aperture in degrees (default: angle_bin_size).
        #[arg(long)]
        cone_half_angle: Option<f64>,
        /// Nearest predictions per ground-truth cell for segmentation.
        #[arg(long, default_value_t = 5)]
        knn: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Map with a frame skip, then score final segmentation quality.
    BenchOffline {
        scene: PathBuf,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
        /// Keep every Nth frame (1-based).
        #[arg(long, default_value_t = 1)]
        frame_skip: u32,
        #[arg(long, default_value_t = 5)]
        knn: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a synthetic scene directory with ground truth and queries.
    GenScene {
        /// Output scene directory.
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Beacon)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Walled corridor ending in a beyond-range end-cap object.
    Beacon,
    /// Five separated boxes on a ring, orbited by the camera.
    FiveClass,
    /// One box, short camera arc; the smallest smoke-test scene.
    SingleBox,
    /// The beacon corridor at 320x240 with 32-dim features.
    Throughput,
}

/// Every mapping hyperparameter as an optional flag; unset flags fall back
/// to the config file, and the file falls back to the defaults.
#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines using these same names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vox_size: Option<f64>,
    #[arg(long)]
    fronti_neighborhood_r: Option<u32>,
    #[arg(long)]
    fronti_min_unobserved: Option<u32>,
    #[arg(long)]
    fronti_min_occupied: Option<u32>,
    #[arg(long)]
    fronti_min_empty: Option<u32>,
    #[arg(long)]
    fronti_subsampling: Option<u32>,
    #[arg(long)]
    fronti_subsampling_min_fronti: Option<u32>,
    #[arg(long)]
    ray_erosion: Option<u32>,
    #[arg(long)]
    ray_tracing: Option<bool>,
    #[arg(long)]
    angle_bin_size: Option<f64>,
    #[arg(long)]
    max_occ_cnt: Option<i32>,
    #[arg(long)]
    max_empty_cnt: Option<i32>,
    #[arg(long)]
    occ_observ_weight: Option<i32>,
    #[arg(long)]
    occ_thickness: Option<f64>,
    #[arg(long)]
    occ_pruning_tolerance: Option<f64>,
    #[arg(long)]
    max_dirs_per_frame: Option<u64>,
    #[arg(long)]
    max_pts_per_frame: Option<f64>,
    #[arg(long)]
    max_empty_pts_per_frame: Option<f64>,
    #[arg(long)]
    vox_accum_period: Option<u32>,
    #[arg(long)]
    ray_accum_period: Option<u32>,
    #[arg(long)]
    ray_accum_phase: Option<u32>,
    #[arg(long)]
    stored_feat_dim: Option<u32>,
    #[arg(long)]
    sem_pruning_period: Option<u32>,
    #[arg(long)]
    occ_pruning_period: Option<u32>,
    #[arg(long)]
    prompt_denoising_thresh: Option<f64>,
    #[arg(long)]
    prediction_thresh: Option<f64>,
    #[arg(long)]
    searchvol_thresh: Option<f64>,
    #[arg(long)]
    depth_range: Option<f64>,
    #[arg(long)]
    representation: Option<Representation>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => PipelineConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field {
                    cfg.$field = v;
                })*
            };
        }
        apply!(
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
            representation,
        );
        cfg.validate().context("config")?;
        Ok(cfg)
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Map { scene, out, config } => {
            let cfg = config.resolve()?;
            let report = run_mapping(&scene, &cfg, &out)?;
            println!(
                "mapped {} frames in {:.1} ms ({:.1} ms/frame)",
                report.frames,
                report.total_ms,
                report.total_ms / report.frames.max(1) as f64
            );
            for (stage, ms) in &report.stage_ms {
                println!("  {stage:<10} {ms:>9.1} ms");
            }
            println!(
                "map: {} semantic voxels, {} occupancy regions, {} frontiers, {} ray entries",
                report.voxel_count,
                report.occupancy_cell_count,
                report.frontier_count,
                report.ray_entry_count
            );
            for path in &report.outputs {
                println!("wrote {}", path.display());
            }
        }
        Command::BenchOnline {
            scene,
            out,
            representations,
            eval_period,
            cone_half_angle,
            knn,
            config,
        } => {
            let cfg = config.resolve()?;
            let reps = representations.unwrap_or_else(|| ALL_REPRESENTATIONS.to_vec());
            let opts = EvalOptions {
                eval_period,
                cone_half_angle_deg: cone_half_angle,
                knn,
            };
            let result = run_online_benchmark(&scene, &cfg, &reps, &out, &opts)?;
            println!("{:<24} {:>6} {:>10} {:>10}", "representation", "class", "scvr_auc", "miou_auc");
            for row in &result.rows {
                let class = row
                    .class
                    .map(|c| c.to_string())
                    .unwrap_or_else(|| "mean".into());
                println!(
                    "{:<24} {:>6} {:>10.4} {:>10.4}",
                    row.representation.to_string(),
                    class,
                    row.scvr_auc,
                    row.miou_auc
                );
            }
            println!("wrote {}", result.summary_path.display());
        }
        Command::BenchOffline {
            scene,
            out,
            frame_skip,
            knn,
            config,
        } => {
            let cfg = config.resolve()?;
            let report = run_offline_eval(&scene, &cfg, frame_skip, &out, knn)?;
            println!(
                "frames {}  miou {:.4}  f_miou {:.4}  acc {:.4}  (k = {})",
                report.frames_used, report.miou, report.f_miou, report.acc, report.knn
            );
            println!("wrote {}", report.csv_path.display());
        }
        Command::GenScene { out, preset, seed } => {
            let spec = match preset {
                Preset::Beacon => beacon_scene(seed),
                Preset::FiveClass => five_class_scene(seed),
                Preset::SingleBox => single_box_scene(seed),
                Preset::Throughput => throughput_scene(seed),
            };
            generate_scene_dir(&spec, &out)
                .with_context(|| format!("writing scene to {}", out.display()))?;
            println!(
                "wrote {} frames ({} labels, {}x{}) to {}",
                spec.trajectory.len(),
                spec.labels.len(),
                spec.intrinsics.width,
                spec.intrinsics.height,
                out.display()
            );
        }
    }
    Ok(())
}
