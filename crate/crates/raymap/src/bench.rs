//! Planner-agnostic benchmark harness. Every representation maps the same
//! frame stream with its own fresh pipeline, converts its beyond-range
//! evidence into per-class search volumes at fixed evaluation points, and
//! gets scored on how much unmapped volume a search for each class could
//! skip (SCV x Recall) plus how well its in-range semantics segment the
//! already-mapped region.

use crate::config::{PipelineConfig, Representation};
use crate::dataset::read_frame_stream;
use crate::eval::{
    miou_time_auc, scvr_auc, scvr_parts, segmentation_metrics, GroundTruth, MetricPoint,
    MetricSeries,
};
use crate::geom::{bin_center_direction, cell_center, Aabb, AngleBin, CellIndex};
use crate::pipeline::{Pipeline, PipelineError};
use crate::query::{
    build_search_volume_rays, build_search_volume_spherical, classify, voxel_evidence_cells,
    mapped_mask, QuerySet, SearchVolumeGrid,
};
use nalgebra::Vector3;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("benchmark setup: {0}")]
    Setup(String),
    #[error("benchmark io: {0}")]
    Io(#[from] std::io::Error),
}

fn setup_err<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> BenchError + '_ {
    move |e| BenchError::Setup(format!("{what}: {e}"))
}

/// Evaluation knobs that are not mapping hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Frames between evaluation points; defaults to the voxel flush period
    /// so the semantic map is freshly fused at each measurement.
    pub eval_period: Option<u32>,
    /// Aperture of the search cones; defaults to the angle bin width, which
    /// covers a bin's whole solid angle from its center direction.
    pub cone_half_angle_deg: Option<f64>,
    /// Neighbors per ground-truth cell for segmentation matching.
    pub knn: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            eval_period: None,
            cone_half_angle_deg: None,
            knn: 5,
        }
    }
}

/// One representation's aggregate scores.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSummaryRow {
    pub representation: Representation,
    /// Class id, or None for the per-representation mean row.
    pub class: Option<u32>,
    pub scvr_auc: f64,
    pub miou_auc: f64,
}

#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub csv_paths: Vec<PathBuf>,
    pub summary_path: PathBuf,
    pub rows: Vec<BenchSummaryRow>,
}

/// Everything the scorer needs from one evaluated timestep.
struct EvalSnapshot {
    timestep: u64,
    miou: f64,
    /// class id -> (scv, recall, scvr, mapped_fraction)
    per_class: BTreeMap<u32, (f64, f64, f64, f64)>,
}

/// Labels one feature batch with the full query set; index = class id.
fn label_features(
    features: &[Vec<f64>],
    queries: &QuerySet,
    cfg: &PipelineConfig,
) -> Result<Vec<Option<usize>>, BenchError> {
    classify(
        features,
        queries,
        cfg.prediction_thresh,
        cfg.prompt_denoising_thresh,
    )
    .map_err(setup_err("classifying evidence"))
}

/// Builds the class's search volume from whatever beyond-range evidence the
/// representation keeps. No evidence means an empty volume, never a fallback
/// to the unconstrained region.
fn class_volume(
    pipe: &Pipeline,
    queries: &QuerySet,
    class: u32,
    voxel_labels: &BTreeMap<CellIndex, usize>,
    bounds: &Aabb,
    gt_resolution: f64,
    mapped: &BTreeSet<CellIndex>,
    cone_half_angle_deg: f64,
) -> Result<SearchVolumeGrid, BenchError> {
    let cfg = pipe.config();
    let want = class as usize;
    let cones = |rays: Vec<(Vector3<f64>, Vector3<f64>)>| {
        build_search_volume_rays(
            &rays,
            cone_half_angle_deg,
            bounds,
            gt_resolution,
            mapped,
            cfg.searchvol_thresh,
        )
    };
    match cfg.representation {
        Representation::RayFrontiers => {
            let entries: Vec<_> = pipe.rays().iter().collect();
            let features: Vec<Vec<f64>> = entries.iter().map(|(_, e)| e.feature.clone()).collect();
            let labels = label_features(&features, queries, cfg)?;
            let rays: Vec<_> = entries
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == Some(want))
                .map(|((&(cell, tb, pb), _), _)| {
                    let bin = AngleBin {
                        theta_bin: tb,
                        phi_bin: pb,
                    };
                    (
                        pipe.rays().origin(cell),
                        bin_center_direction(bin, pipe.rays().psi_deg()),
                    )
                })
                .collect();
            Ok(cones(rays))
        }
        Representation::SemPoses => {
            let entries = &pipe.sem_poses().entries;
            let features: Vec<Vec<f64>> = entries.iter().map(|e| e.feature.clone()).collect();
            let labels = label_features(&features, queries, cfg)?;
            let rays: Vec<_> = entries
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == Some(want))
                .map(|(e, _)| (e.origin, e.dir))
                .collect();
            Ok(cones(rays))
        }
        Representation::UnidirectionalFronts => {
            let state = pipe.sem_fronts().expect("state exists for this variant");
            let entries: Vec<_> = state.entries.iter().collect();
            let features: Vec<Vec<f64>> = entries.iter().map(|(_, e)| e.feature.clone()).collect();
            let labels = label_features(&features, queries, cfg)?;
            let rays: Vec<_> = entries
                .iter()
                .zip(&labels)
                .filter(|((_, e), l)| **l == Some(want) && e.dir.is_some())
                .map(|((&cell, e), _)| {
                    (cell_center(cell, state.coarse_resolution), e.dir.unwrap())
                })
                .collect();
            Ok(cones(rays))
        }
        Representation::SphericalFronts => {
            let state = pipe.sem_fronts().expect("state exists for this variant");
            let entries: Vec<_> = state.entries.iter().collect();
            let features: Vec<Vec<f64>> = entries.iter().map(|(_, e)| e.feature.clone()).collect();
            let labels = label_features(&features, queries, cfg)?;
            let matched: Vec<CellIndex> = entries
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == Some(want))
                .map(|((&cell, _), _)| cell)
                .collect();
            Ok(build_search_volume_spherical(
                &matched,
                pipe.frontiers(),
                bounds,
                gt_resolution,
                mapped,
                cfg.searchvol_thresh,
            ))
        }
        Representation::SemVoxels => {
            let centers = voxel_labels
                .iter()
                .filter(|(_, &l)| l == want)
                .map(|(&cell, _)| cell_center(cell, cfg.vox_size));
            Ok(SearchVolumeGrid {
                resolution: gt_resolution,
                bounds: *bounds,
                cells: voxel_evidence_cells(centers, bounds, gt_resolution),
            })
        }
    }
}

/// Scores one pipeline state against the ground truth.
fn evaluate_snapshot(
    pipe: &Pipeline,
    queries: &QuerySet,
    raw_queries: &[(String, Vec<f64>)],
    gt: &GroundTruth,
    bounds: &Aabb,
    timestep: u64,
    knn: usize,
    cone_half_angle_deg: f64,
) -> Result<EvalSnapshot, BenchError> {
    let mapped = mapped_mask(pipe.occupancy(), bounds, gt.resolution);
    let voxel_labels = pipe.classified_voxels(raw_queries)?;

    let predictions: Vec<(Vector3<f64>, u32)> = voxel_labels
        .iter()
        .map(|(&cell, &l)| (cell_center(cell, pipe.config().vox_size), l as u32))
        .collect();
    let restricted = GroundTruth {
        resolution: gt.resolution,
        cells: gt
            .cells
            .iter()
            .filter(|(k, _)| mapped.contains(*k))
            .map(|(&k, &c)| (k, c))
            .collect(),
    };
    let miou = segmentation_metrics(&predictions, &restricted, knn).miou;

    let mut per_class = BTreeMap::new();
    for class in gt.classes() {
        let volume = class_volume(
            pipe,
            queries,
            class,
            &voxel_labels,
            bounds,
            gt.resolution,
            &mapped,
            cone_half_angle_deg,
        )?;
        let parts = scvr_parts(&volume, gt, class, &mapped);
        let mf = gt.mapped_fraction(class, &mapped);
        per_class.insert(class, (parts.scv, parts.recall, parts.scvr, mf));
    }
    Ok(EvalSnapshot {
        timestep,
        miou,
        per_class,
    })
}

fn write_series_csv(path: &Path, snapshots: &[EvalSnapshot]) -> Result<(), BenchError> {
    let mut s = String::from("timestep,class,scv,recall,scvr,miou,mapped_fraction\n");
    for snap in snapshots {
        for (class, (scv, recall, scvr, mf)) in &snap.per_class {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                snap.timestep, class, scv, recall, scvr, snap.miou, mf
            )
            .expect("string write");
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn summarize(rep: Representation, snapshots: &[EvalSnapshot]) -> Vec<BenchSummaryRow> {
    let classes: Vec<u32> = snapshots
        .first()
        .map(|s| s.per_class.keys().copied().collect())
        .unwrap_or_default();
    let miou_auc = miou_time_auc(
        &snapshots
            .iter()
            .map(|s| (s.timestep as f64, s.miou))
            .collect::<Vec<_>>(),
    );
    let mut rows = Vec::new();
    let mut scvr_sum = 0.0;
    for &class in &classes {
        let series = MetricSeries {
            points: snapshots
                .iter()
                .map(|s| {
                    let (scv, recall, scvr, mf) = s.per_class[&class];
                    MetricPoint {
                        timestep: s.timestep,
                        scv,
                        recall,
                        scvr,
                        mapped_fraction: mf,
                    }
                })
                .collect(),
        };
        let auc = scvr_auc(&series);
        scvr_sum += auc;
        rows.push(BenchSummaryRow {
            representation: rep,
            class: Some(class),
            scvr_auc: auc,
            miou_auc,
        });
    }
    let mean = if classes.is_empty() {
        0.0
    } else {
        scvr_sum / classes.len() as f64
    };
    rows.push(BenchSummaryRow {
        representation: rep,
        class: None,
        scvr_auc: mean,
        miou_auc,
    });
    rows
}

/// Runs every requested representation over the same scene and writes one
/// time-series CSV per representation plus a summary table. Each
/// representation maps with its own pipeline; nothing is shared, so the
/// output is independent of the order they run in.
pub fn run_online_benchmark(
    scene_dir: &Path,
    cfg: &PipelineConfig,
    representations: &[Representation],
    out_dir: &Path,
    opts: &EvalOptions,
) -> Result<BenchOutput, BenchError> {
    cfg.validate().map_err(setup_err("config"))?;
    if opts.knn == 0 {
        return Err(BenchError::Setup("knn must be at least 1".into()));
    }
    let eval_period = opts.eval_period.unwrap_or(cfg.vox_accum_period).max(1) as u64;
    let cone = opts.cone_half_angle_deg.unwrap_or(cfg.angle_bin_size);

    let mut stream = read_frame_stream(scene_dir).map_err(setup_err("opening scene"))?;
    let handle = stream.handle().clone();
    let gt = handle.read_gt().map_err(setup_err("ground truth"))?;
    let raw_queries = handle.read_queries().map_err(setup_err("queries"))?;
    let bounds = handle.read_bounds().unwrap_or_else(|_| gt_bounds(&gt));
    if let Some(max_class) = gt.classes().last().copied() {
        if max_class as usize >= raw_queries.len() {
            return Err(BenchError::Setup(format!(
                "ground truth class {max_class} has no query (only {} queries)",
                raw_queries.len()
            )));
        }
    }
    let intr = *handle.intrinsics().map_err(setup_err("intrinsics"))?;
    let mut frames = Vec::new();
    for record in &mut stream {
        frames.push(record.map_err(setup_err("reading frames"))?);
    }

    std::fs::create_dir_all(out_dir)?;
    let mut csv_paths = Vec::new();
    let mut rows = Vec::new();
    for &rep in representations {
        let mut rep_cfg = cfg.clone();
        rep_cfg.representation = rep;
        let mut pipe = Pipeline::new(rep_cfg)?;
        let queries = pipe
            .query_set(&raw_queries)
            .map_err(setup_err("query set"))?;
        let mut snapshots = Vec::new();
        for (i, frame) in frames.iter().enumerate() {
            pipe.process_frame(frame, &intr)?;
            if (i as u64 + 1) % eval_period == 0 {
                snapshots.push(evaluate_snapshot(
                    &pipe,
                    &queries,
                    &raw_queries,
                    &gt,
                    &bounds,
                    i as u64,
                    opts.knn,
                    cone,
                )?);
            }
        }
        let path = out_dir.join(format!("{rep}.csv"));
        write_series_csv(&path, &snapshots)?;
        csv_paths.push(path);
        rows.extend(summarize(rep, &snapshots));
    }

    let summary_path = out_dir.join("summary.csv");
    let mut s = String::from("representation,class,scvr_auc,miou_auc\n");
    for row in &rows {
        let class = row
            .class
            .map(|c| c.to_string())
            .unwrap_or_else(|| "mean".into());
        writeln!(
            s,
            "{},{},{},{}",
            row.representation, class, row.scvr_auc, row.miou_auc
        )
        .expect("string write");
    }
    std::fs::write(&summary_path, s)?;
    Ok(BenchOutput {
        csv_paths,
        summary_path,
        rows,
    })
}

/// Fallback evaluation bounds: the ground-truth cells' extent padded by one
/// cell, for scenes without a bounds file.
fn gt_bounds(gt: &GroundTruth) -> Aabb {
    let r = gt.resolution;
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    for &[x, y, z] in gt.cells.keys() {
        let lo = Vector3::new(x as f64 * r, y as f64 * r, z as f64 * r);
        min = min.inf(&(lo - Vector3::repeat(r)));
        max = max.sup(&(lo + Vector3::repeat(2.0 * r)));
    }
    if gt.cells.is_empty() {
        return Aabb::new(Vector3::zeros(), Vector3::repeat(r));
    }
    Aabb::new(min, max)
}

/// Final segmentation quality of a mapping run that keeps only every
/// `frame_skip`-th frame (1-based: frames skip-1, 2*skip-1, ...).
#[derive(Debug, Clone)]
pub struct OfflineReport {
    pub miou: f64,
    pub f_miou: f64,
    pub acc: f64,
    pub frames_used: u64,
    pub frame_skip: u32,
    pub knn: usize,
    pub csv_path: PathBuf,
}

pub fn run_offline_eval(
    scene_dir: &Path,
    cfg: &PipelineConfig,
    frame_skip: u32,
    out_dir: &Path,
    knn: usize,
) -> Result<OfflineReport, BenchError> {
    if frame_skip == 0 {
        return Err(BenchError::Setup("frame_skip must be at least 1".into()));
    }
    if knn == 0 {
        return Err(BenchError::Setup("knn must be at least 1".into()));
    }
    let mut stream = read_frame_stream(scene_dir).map_err(setup_err("opening scene"))?;
    let handle = stream.handle().clone();
    let gt = handle.read_gt().map_err(setup_err("ground truth"))?;
    let raw_queries = handle.read_queries().map_err(setup_err("queries"))?;

    let mut pipe = Pipeline::new(cfg.clone())?;
    let mut used = 0u64;
    if handle.frame_count() > 0 {
        let intr = *handle.intrinsics().map_err(setup_err("intrinsics"))?;
        for (i, record) in (&mut stream).enumerate() {
            if (i as u64 + 1) % frame_skip as u64 != 0 {
                continue;
            }
            let frame = record.map_err(setup_err("reading frames"))?;
            pipe.process_frame(&frame, &intr)?;
            used += 1;
        }
    }
    pipe.finish()?;

    let voxel_labels = pipe.classified_voxels(&raw_queries)?;
    let predictions: Vec<(Vector3<f64>, u32)> = voxel_labels
        .iter()
        .map(|(&cell, &l)| (cell_center(cell, cfg.vox_size), l as u32))
        .collect();
    let m = segmentation_metrics(&predictions, &gt, knn);

    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("offline.csv");
    std::fs::write(
        &csv_path,
        format!(
            "miou,f_miou,acc,frames_used,frame_skip,knn\n{},{},{},{},{},{}\n",
            m.miou, m.f_miou, m.acc, used, frame_skip, knn
        ),
    )?;
    Ok(OfflineReport {
        miou: m.miou,
        f_miou: m.f_miou,
        acc: m.acc,
        frames_used: used,
        frame_skip,
        knn,
        csv_path,
    })
}
