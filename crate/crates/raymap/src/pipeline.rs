//! Frame-by-frame mapping engine: one configured pipeline owning the
//! occupancy grid, the semantic voxel map, the frontier sets, and whichever
//! beyond-range representation the configuration selects, with the flush
//! and pruning cadences applied in a fixed stage order per frame.

use crate::baselines::{
    sem_fronts_update, sem_poses_update, SemFrontsState, SemFrontsVariant, SemPosesState,
};
use crate::config::{PipelineConfig, Representation};
use crate::dataset::{
    fit_compressor, read_frame_stream, FeatureCompressor, FrameRecord, SceneHandle,
};
use crate::frontier::{compute_fine_frontiers, diff_frontiers, subsample_frontiers, FrontierSet};
use crate::geom::{CameraIntrinsics, CellIndex, FeatureImage};
use crate::occupancy::{classify_frustum, OccupancyGrid};
use crate::query::{classify, QuerySet};
use crate::rayfront::{observe_out_of_range, associate_rays, RayAccumulationBuffer, RayFrontierMap};
use crate::semvox::{append_classified, LocalUpdateBuffer, SemanticVoxelMap};
use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// Any module failure, tagged with the frame and stage that hit it.
#[derive(Debug, Error)]
#[error("frame {frame}, stage {stage}: {source}")]
pub struct PipelineError {
    pub frame: u64,
    pub stage: &'static str,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

fn stage_err<E: std::error::Error + Send + Sync + 'static>(
    frame: u64,
    stage: &'static str,
) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError {
        frame,
        stage,
        source: Box::new(e),
    }
}

/// Wall-clock totals and final map sizes for one mapping run.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub frames: u64,
    pub total_ms: f64,
    pub stage_ms: BTreeMap<&'static str, f64>,
    pub voxel_count: usize,
    pub ray_entry_count: usize,
    pub occupancy_cell_count: usize,
    pub frontier_count: usize,
    pub outputs: Vec<PathBuf>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    frame_index: u64,
    compressor: Option<FeatureCompressor>,
    occupancy: OccupancyGrid,
    semantics: SemanticVoxelMap,
    vox_buffer: LocalUpdateBuffer,
    frontiers: FrontierSet,
    ray_buffer: RayAccumulationBuffer,
    rays: RayFrontierMap,
    sem_poses: SemPosesState,
    sem_fronts: Option<SemFrontsState>,
    stage_ms: BTreeMap<&'static str, f64>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate().map_err(stage_err(0, "config"))?;
        let beta = cfg.coarse_resolution();
        let sem_fronts = match cfg.representation {
            Representation::SphericalFronts => {
                Some(SemFrontsState::new(beta, SemFrontsVariant::Spherical))
            }
            Representation::UnidirectionalFronts => {
                Some(SemFrontsState::new(beta, SemFrontsVariant::Unidirectional))
            }
            _ => None,
        };
        Ok(Pipeline {
            occupancy: OccupancyGrid::new(cfg.vox_size, cfg.max_empty_cnt, cfg.max_occ_cnt),
            semantics: SemanticVoxelMap::new(cfg.vox_size),
            vox_buffer: LocalUpdateBuffer::default(),
            frontiers: FrontierSet {
                coarse_resolution: beta,
                cells: BTreeSet::new(),
                generation: 0,
            },
            ray_buffer: RayAccumulationBuffer::new(cfg.ray_accum_period, cfg.ray_accum_phase),
            rays: RayFrontierMap::new(beta, cfg.angle_bin_size),
            sem_poses: SemPosesState::default(),
            sem_fronts,
            compressor: None,
            frame_index: 0,
            stage_ms: BTreeMap::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn frames_processed(&self) -> u64 {
        self.frame_index
    }

    pub fn occupancy(&self) -> &OccupancyGrid {
        &self.occupancy
    }

    pub fn semantics(&self) -> &SemanticVoxelMap {
        &self.semantics
    }

    pub fn frontiers(&self) -> &FrontierSet {
        &self.frontiers
    }

    pub fn rays(&self) -> &RayFrontierMap {
        &self.rays
    }

    pub fn sem_poses(&self) -> &SemPosesState {
        &self.sem_poses
    }

    pub fn sem_fronts(&self) -> Option<&SemFrontsState> {
        self.sem_fronts.as_ref()
    }

    pub fn compressor(&self) -> Option<&FeatureCompressor> {
        self.compressor.as_ref()
    }

    pub fn pending_points(&self) -> usize {
        self.vox_buffer.points.len()
    }

    pub fn pending_rays(&self) -> usize {
        self.ray_buffer.pending.len()
    }

    pub fn stage_ms(&self) -> &BTreeMap<&'static str, f64> {
        &self.stage_ms
    }

    fn uses_semantic_voxels(&self) -> bool {
        !matches!(self.cfg.representation, Representation::SemPoses)
    }

    fn uses_frontiers(&self) -> bool {
        matches!(
            self.cfg.representation,
            Representation::RayFrontiers
                | Representation::SphericalFronts
                | Representation::UnidirectionalFronts
        )
    }

    fn uses_rays(&self) -> bool {
        self.uses_frontiers()
    }

    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce(&mut Self) -> T) -> T {
        let start = Instant::now();
        let out = f(self);
        *self.stage_ms.entry(stage).or_insert(0.0) += start.elapsed().as_secs_f64() * 1e3;
        out
    }

    /// Projects the frame's features through the fitted compressor, fitting
    /// it on this frame's pixels first when the stream is wider than
    /// `stored_feat_dim`.
    fn compressed_features<'a>(
        &mut self,
        features: &'a FeatureImage,
    ) -> Result<Cow<'a, FeatureImage>, PipelineError> {
        if features.dim <= self.cfg.stored_feat_dim {
            return Ok(Cow::Borrowed(features));
        }
        let frame = self.frame_index;
        if self.compressor.is_none() {
            let samples: Vec<Vec<f64>> = features
                .values
                .chunks_exact(features.dim as usize)
                .map(|px| px.iter().map(|&v| v as f64).collect())
                .collect();
            let pca = fit_compressor(&samples, self.cfg.stored_feat_dim as usize)
                .map_err(stage_err(frame, "compress"))?;
            self.compressor = Some(pca);
        }
        let pca = self.compressor.as_ref().unwrap();
        let k = pca.output_dim() as u32;
        let mut values = Vec::with_capacity((features.height * features.width * k) as usize);
        for px in features.values.chunks_exact(features.dim as usize) {
            values.extend(pca.compress_f32(px).into_iter().map(|v| v as f32));
        }
        Ok(Cow::Owned(FeatureImage::new(
            features.height,
            features.width,
            k,
            values,
        )))
    }

    /// Runs one frame through every enabled stage.
    pub fn process_frame(
        &mut self,
        frame: &FrameRecord,
        intr: &CameraIntrinsics,
    ) -> Result<(), PipelineError> {
        let i = self.frame_index;
        let features = self.time("compress", |p| p.compressed_features(&frame.features))?;

        if self.cfg.depth_range == 0.0 {
            // Range-free operation: no occupancy, no voxels, no frontiers.
            // Whole-image semantics still flow into the pose-anchored
            // representations.
            if self.cfg.representation == Representation::RayFrontiers {
                let masked = frame.depth.masked_beyond(0.0);
                self.time("rays", |p| {
                    let rays = observe_out_of_range(
                        &frame.pose,
                        intr,
                        &masked,
                        &features,
                        p.cfg.ray_erosion,
                        p.cfg.max_dirs_per_frame as usize,
                    )
                    .map_err(stage_err(i, "rays"))?;
                    p.ray_buffer.pending.extend(rays);
                    if p.ray_buffer.due(i) {
                        let drained = std::mem::take(&mut p.ray_buffer.pending);
                        p.rays
                            .accumulate_at_origin(&drained)
                            .map_err(stage_err(i, "rays"))?;
                    }
                    Ok(())
                })?;
            }
            if self.cfg.representation == Representation::SemPoses {
                self.time("semantics", |p| {
                    sem_poses_update(&mut p.sem_poses, &frame.pose, &features)
                });
            }
            self.frame_index += 1;
            return Ok(());
        }

        let masked = frame.depth.masked_beyond(self.cfg.depth_range);

        // One frustum pass serves both occupancy and the voxel buffer.
        let cls = self.time("occupancy", |p| {
            let cls = classify_frustum(
                p.cfg.vox_size,
                &frame.pose,
                intr,
                &masked,
                p.cfg.occ_thickness,
            )
            .map_err(stage_err(i, "occupancy"))?;
            p.occupancy.apply_classified(
                &cls,
                p.cfg.occ_observ_weight,
                PipelineConfig::cap(p.cfg.max_empty_pts_per_frame),
                PipelineConfig::cap(p.cfg.max_pts_per_frame),
            );
            Ok(cls)
        })?;

        if self.uses_semantic_voxels() {
            self.time("semantics", |p| {
                append_classified(
                    &mut p.vox_buffer,
                    &cls,
                    p.cfg.vox_size,
                    &features,
                    PipelineConfig::cap(p.cfg.max_pts_per_frame),
                );
                if (i + 1) % p.cfg.vox_accum_period as u64 == 0 {
                    p.semantics.fuse_into_global(&mut p.vox_buffer);
                }
            });
        }
        if self.cfg.representation == Representation::SemPoses {
            self.time("semantics", |p| {
                sem_poses_update(&mut p.sem_poses, &frame.pose, &features)
            });
        }

        if self.uses_frontiers() {
            self.time("frontiers", |p| {
                let fine = compute_fine_frontiers(
                    &p.occupancy,
                    p.cfg.fronti_neighborhood_r as i32,
                    p.cfg.fronti_min_unobserved as usize,
                    p.cfg.fronti_min_occupied as usize,
                    p.cfg.fronti_min_empty as usize,
                );
                let mut fresh = subsample_frontiers(
                    &fine,
                    p.cfg.vox_size,
                    p.cfg.fronti_subsampling,
                    p.cfg.fronti_subsampling_min_fronti as usize,
                );
                fresh.generation = p.frontiers.generation + 1;
                let (removed, _added) =
                    diff_frontiers(&p.frontiers, &fresh).map_err(stage_err(i, "frontiers"))?;
                if p.cfg.representation == Representation::RayFrontiers {
                    p.rays
                        .propagate_fronts(&removed, &mut p.ray_buffer, p.cfg.ray_tracing);
                }
                if let Some(state) = &mut p.sem_fronts {
                    state.retain_active(&fresh);
                }
                p.frontiers = fresh;
                Ok(())
            })?;
        }

        if self.uses_rays() {
            self.time("rays", |p| {
                let rays = observe_out_of_range(
                    &frame.pose,
                    intr,
                    &masked,
                    &features,
                    p.cfg.ray_erosion,
                    p.cfg.max_dirs_per_frame as usize,
                )
                .map_err(stage_err(i, "rays"))?;
                p.ray_buffer.pending.extend(rays);
                // A flush with no frontiers would drop every pending ray, so
                // the buffer holds them until frontiers exist.
                if p.ray_buffer.due(i) && !p.frontiers.is_empty() {
                    p.flush_rays().map_err(stage_err(i, "rays"))?;
                }
                Ok(())
            })?;
        }

        self.time("prune", |p| {
            if p.uses_semantic_voxels() && (i + 1) % p.cfg.sem_pruning_period as u64 == 0 {
                p.semantics.prune_with_occupancy(&p.occupancy);
            }
            if (i + 1) % p.cfg.occ_pruning_period as u64 == 0 {
                p.occupancy.prune_merge(p.cfg.occ_pruning_tolerance);
            }
        });

        self.frame_index += 1;
        Ok(())
    }

    fn flush_rays(&mut self) -> Result<(), crate::rayfront::RayFrontError> {
        let drained = std::mem::take(&mut self.ray_buffer.pending);
        if drained.is_empty() {
            return Ok(());
        }
        match self.cfg.representation {
            Representation::RayFrontiers => {
                let results = associate_rays(
                    &drained,
                    &self.frontiers,
                    self.cfg.depth_range,
                    Some(&self.occupancy),
                    self.cfg.ray_tracing,
                )?;
                self.rays.bin_and_accumulate(&drained, &results)?;
            }
            Representation::SphericalFronts | Representation::UnidirectionalFronts => {
                let state = self.sem_fronts.as_mut().unwrap();
                sem_fronts_update(
                    state,
                    &drained,
                    &self.frontiers,
                    self.cfg.depth_range,
                    &self.occupancy,
                )?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Flushes whatever the periodic schedules left buffered. Call once after
    /// the last frame.
    pub fn finish(&mut self) -> Result<(), PipelineError> {
        let i = self.frame_index;
        if self.uses_semantic_voxels() && !self.vox_buffer.points.is_empty() {
            self.time("semantics", |p| {
                p.semantics.fuse_into_global(&mut p.vox_buffer)
            });
        }
        if !self.ray_buffer.pending.is_empty() {
            self.time("rays", |p| {
                if p.cfg.depth_range == 0.0 {
                    let drained = std::mem::take(&mut p.ray_buffer.pending);
                    p.rays
                        .accumulate_at_origin(&drained)
                        .map_err(stage_err(i, "rays"))
                } else if !p.frontiers.is_empty() {
                    p.flush_rays().map_err(stage_err(i, "rays"))
                } else {
                    Ok(())
                }
            })?;
        }
        Ok(())
    }

    /// Classifies every semantic voxel against the query set; voxels below
    /// the prediction threshold or denoised away get no label. Queries are
    /// compressed through the pipeline's compressor when one is active.
    pub fn classified_voxels(
        &self,
        queries: &[(String, Vec<f64>)],
    ) -> Result<BTreeMap<CellIndex, usize>, PipelineError> {
        let frame = self.frame_index;
        let query_set = self
            .query_set(queries)
            .map_err(stage_err(frame, "classify"))?;
        let keys: Vec<CellIndex> = self.semantics.iter().map(|(&k, _)| k).collect();
        let features: Vec<Vec<f64>> = self
            .semantics
            .iter()
            .map(|(_, v)| v.feature.clone())
            .collect();
        let labels = classify(
            &features,
            &query_set,
            self.cfg.prediction_thresh,
            self.cfg.prompt_denoising_thresh,
        )
        .map_err(stage_err(frame, "classify"))?;
        Ok(keys
            .into_iter()
            .zip(labels)
            .filter_map(|(k, l)| l.map(|l| (k, l)))
            .collect())
    }

    /// Builds the classification query set in the pipeline's feature space.
    pub fn query_set(
        &self,
        queries: &[(String, Vec<f64>)],
    ) -> Result<QuerySet, crate::query::QueryError> {
        let mapped: Vec<(String, Vec<f64>)> = match &self.compressor {
            Some(pca) => queries
                .iter()
                .map(|(n, e)| (n.clone(), pca.compress(e)))
                .collect(),
            None => queries.to_vec(),
        };
        QuerySet::normalized(mapped)
    }
}

/// Maps a whole scene directory and writes the artifact dumps: the semantic
/// point cloud (`voxels.csv`, labeled when the scene ships queries), the ray
/// map (`rays.txt`), and the occupancy grid (`occupancy.txt`).
pub fn run_mapping(
    scene_dir: &Path,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<RunReport, PipelineError> {
    let mut pipeline = Pipeline::new(cfg.clone())?;
    let mut stream = read_frame_stream(scene_dir).map_err(stage_err(0, "load"))?;
    let intr = if stream.handle().frame_count() > 0 {
        Some(*stream.handle().intrinsics().map_err(stage_err(0, "load"))?)
    } else {
        None
    };
    let handle: SceneHandle = stream.handle().clone();

    let clock = Instant::now();
    let mut frame_no = 0u64;
    for record in &mut stream {
        let record = record.map_err(stage_err(frame_no, "load"))?;
        pipeline.process_frame(&record, intr.as_ref().unwrap())?;
        frame_no += 1;
    }
    pipeline.finish()?;
    let total_ms = clock.elapsed().as_secs_f64() * 1e3;

    std::fs::create_dir_all(out_dir).map_err(stage_err(frame_no, "export"))?;
    let labels = match handle.read_queries() {
        Ok(queries) => Some(pipeline.classified_voxels(&queries)?),
        Err(_) => None,
    };
    let voxel_path = out_dir.join("voxels.csv");
    pipeline
        .semantics
        .export_point_cloud(&voxel_path, labels.as_ref())
        .map_err(stage_err(frame_no, "export"))?;
    let ray_path = out_dir.join("rays.txt");
    std::fs::write(&ray_path, pipeline.rays.dump_text()).map_err(stage_err(frame_no, "export"))?;
    let occ_path = out_dir.join("occupancy.txt");
    std::fs::write(&occ_path, pipeline.occupancy.dump_text())
        .map_err(stage_err(frame_no, "export"))?;

    Ok(RunReport {
        frames: frame_no,
        total_ms,
        stage_ms: pipeline.stage_ms.clone(),
        voxel_count: pipeline.semantics.len(),
        ray_entry_count: pipeline.rays.len(),
        occupancy_cell_count: pipeline.occupancy.fine_cell_count()
            + pipeline.occupancy.merged_region_count(),
        frontier_count: pipeline.frontiers.len(),
        outputs: vec![voxel_path, ray_path, occ_path],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scene_dir, render_scene, single_box_scene};
    use tempfile::TempDir;

    fn small_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.vox_size = 0.25;
        cfg.depth_range = 6.0;
        cfg.ray_erosion = 1;
        cfg.vox_accum_period = 2;
        cfg.ray_accum_period = 2;
        cfg.ray_accum_phase = 1;
        cfg.sem_pruning_period = 4;
        cfg.occ_pruning_period = 4;
        cfg
    }

    fn run_in_memory(cfg: &PipelineConfig) -> Pipeline {
        let spec = single_box_scene(1);
        let frames = render_scene(&spec).unwrap();
        let mut pipe = Pipeline::new(cfg.clone()).unwrap();
        for f in &frames {
            pipe.process_frame(f, &spec.intrinsics).unwrap();
        }
        pipe.finish().unwrap();
        pipe
    }

    #[test]
    fn maps_a_box_scene() {
        let pipe = run_in_memory(&small_config());
        assert_eq!(pipe.frames_processed(), 8);
        assert!(pipe.occupancy().fine_cell_count() > 0);
        assert!(pipe.semantics().len() > 0);
        assert!(pipe.pending_points() == 0, "finish flushes the buffer");
    }

    #[test]
    fn zero_depth_mode_builds_pose_anchored_rays_only() {
        let mut cfg = small_config();
        cfg.depth_range = 0.0;
        let pipe = run_in_memory(&cfg);
        assert_eq!(pipe.semantics().len(), 0);
        assert_eq!(pipe.occupancy().fine_cell_count(), 0);
        assert!(pipe.frontiers().is_empty());
        assert!(pipe.rays().len() > 0, "rays anchor at the camera cells");
        assert_eq!(pipe.pending_rays(), 0);
    }

    #[test]
    fn voxel_flush_follows_the_period() {
        let spec = single_box_scene(1);
        let frames = render_scene(&spec).unwrap();
        let mut cfg = small_config();
        cfg.vox_accum_period = 4;
        let mut pipe = Pipeline::new(cfg).unwrap();
        for (i, f) in frames.iter().enumerate() {
            pipe.process_frame(f, &spec.intrinsics).unwrap();
            if (i + 1) % 4 == 0 {
                assert_eq!(pipe.pending_points(), 0, "flushed after frame {i}");
            }
        }
    }

    #[test]
    fn identical_runs_produce_identical_maps() {
        let a = run_in_memory(&small_config());
        let b = run_in_memory(&small_config());
        assert_eq!(a.occupancy().dump_text(), b.occupancy().dump_text());
        assert_eq!(a.rays().dump_text(), b.rays().dump_text());
        assert_eq!(a.semantics().len(), b.semantics().len());
    }

    #[test]
    fn rays_anchor_on_live_frontiers() {
        let pipe = run_in_memory(&small_config());
        if pipe.rays().len() > 0 {
            assert!(pipe.rays().anchored_to(pipe.frontiers()));
        }
    }

    #[test]
    fn compressor_engages_above_stored_dim() {
        let mut cfg = small_config();
        cfg.stored_feat_dim = 2;
        let pipe = run_in_memory(&cfg);
        let pca = pipe.compressor().expect("4-dim scene, 2-dim store");
        assert_eq!(pca.output_dim(), 2);
        for (_, v) in pipe.semantics().iter() {
            assert_eq!(v.feature.len(), 2);
        }
    }

    #[test]
    fn spherical_representation_populates_fronts() {
        let mut cfg = small_config();
        cfg.representation = Representation::SphericalFronts;
        let pipe = run_in_memory(&cfg);
        let state = pipe.sem_fronts().unwrap();
        for cell in state.entries.keys() {
            assert!(pipe.frontiers().cells.contains(cell), "stale entry {cell:?}");
        }
    }

    #[test]
    fn run_mapping_writes_artifacts_and_timings() {
        let scene = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        generate_scene_dir(&single_box_scene(2), scene.path()).unwrap();
        let report = run_mapping(scene.path(), &small_config(), out.path()).unwrap();
        assert_eq!(report.frames, 8);
        assert!(report.voxel_count > 0);
        for path in &report.outputs {
            assert!(path.exists(), "{path:?} missing");
        }
        let stage_sum: f64 = report.stage_ms.values().sum();
        assert!(
            stage_sum <= report.total_ms * 1.05,
            "stages {stage_sum} ms exceed total {} ms",
            report.total_ms
        );
    }

    #[test]
    fn run_mapping_on_empty_dir_is_empty_report() {
        let scene = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        let report = run_mapping(scene.path(), &small_config(), out.path()).unwrap();
        assert_eq!(report.frames, 0);
        assert_eq!(report.voxel_count, 0);
        assert!(out.path().join("occupancy.txt").exists());
    }

    #[test]
    fn load_errors_carry_frame_and_stage() {
        let scene = TempDir::new().unwrap();
        let out = TempDir::new().unwrap();
        generate_scene_dir(&single_box_scene(2), scene.path()).unwrap();
        std::fs::remove_file(scene.path().join("000003.feat")).unwrap();
        let err = run_mapping(scene.path(), &small_config(), out.path()).unwrap_err();
        assert_eq!(err.frame, 3);
        assert_eq!(err.stage, "load");
        assert!(err.to_string().contains("frame 3"));
    }

    #[test]
    fn identical_disk_runs_produce_identical_dumps() {
        let scene = TempDir::new().unwrap();
        generate_scene_dir(&single_box_scene(4), scene.path()).unwrap();
        let (out_a, out_b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
        run_mapping(scene.path(), &small_config(), out_a.path()).unwrap();
        run_mapping(scene.path(), &small_config(), out_b.path()).unwrap();
        for name in ["voxels.csv", "rays.txt", "occupancy.txt"] {
            let a = std::fs::read(out_a.path().join(name)).unwrap();
            let b = std::fs::read(out_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }
}
