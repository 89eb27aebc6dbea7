//! Benchmark metrics: search-cut volume and its recall-weighted variant with
//! time AUCs for the online protocol, and k-NN matched 3D segmentation
//! scores for the offline one.

use crate::geom::{cell_center, CellIndex};
use crate::query::SearchVolumeGrid;
use nalgebra::Vector3;
use std::collections::{BTreeMap, BTreeSet};

/// Scene reference: occupied cells with class labels on a fixed grid.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub resolution: f64,
    pub cells: BTreeMap<CellIndex, u32>,
}

impl GroundTruth {
    /// Distinct class ids present, ascending.
    pub fn classes(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.cells.values().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn class_cells(&self, class: u32) -> impl Iterator<Item = CellIndex> + '_ {
        self.cells
            .iter()
            .filter(move |&(_, &c)| c == class)
            .map(|(&k, _)| k)
    }

    pub fn support(&self, class: u32) -> usize {
        self.cells.values().filter(|&&c| c == class).count()
    }

    /// Fraction of the class's cells whose centers are already observed.
    /// A class with no cells counts as fully mapped.
    pub fn mapped_fraction(&self, class: u32, mapped: &BTreeSet<CellIndex>) -> f64 {
        let mut total = 0usize;
        let mut hit = 0usize;
        for cell in self.class_cells(class) {
            total += 1;
            if mapped.contains(&cell) {
                hit += 1;
            }
        }
        if total == 0 {
            1.0
        } else {
            hit as f64 / total as f64
        }
    }
}

/// SCV, Recall, and their product for one class at one timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScvrParts {
    pub scv: f64,
    pub recall: f64,
    pub scvr: f64,
}

/// One evaluated timestep of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricPoint {
    pub timestep: u64,
    pub scv: f64,
    pub recall: f64,
    pub scvr: f64,
    pub mapped_fraction: f64,
}

/// Per-class metric history; timesteps strictly increasing.
#[derive(Debug, Clone, Default)]
pub struct MetricSeries {
    pub points: Vec<MetricPoint>,
}

fn unmapped_universe(volume: &SearchVolumeGrid, mapped: &BTreeSet<CellIndex>) -> Vec<CellIndex> {
    crate::query::enumerate_cells(&volume.bounds, volume.resolution)
        .into_iter()
        .filter(|k| !mapped.contains(k))
        .collect()
}

/// Search cut volume: 1 - FP/unmapped, where FP counts searched unmapped
/// cells that do not belong to the class. An exhausted unmapped region
/// leaves nothing to cut, scoring 1.
pub fn scv(
    volume: &SearchVolumeGrid,
    gt: &GroundTruth,
    class: u32,
    mapped: &BTreeSet<CellIndex>,
) -> f64 {
    scvr_parts(volume, gt, class, mapped).scv
}

/// SCV x Recall. Zero search volume gives recall 0 and therefore 0; a class
/// with no unmapped cells left has recall 1 by definition.
pub fn scvr(
    volume: &SearchVolumeGrid,
    gt: &GroundTruth,
    class: u32,
    mapped: &BTreeSet<CellIndex>,
) -> f64 {
    scvr_parts(volume, gt, class, mapped).scvr
}

pub fn scvr_parts(
    volume: &SearchVolumeGrid,
    gt: &GroundTruth,
    class: u32,
    mapped: &BTreeSet<CellIndex>,
) -> ScvrParts {
    debug_assert_eq!(volume.resolution, gt.resolution);
    let universe = unmapped_universe(volume, mapped);
    let class_cells: BTreeSet<CellIndex> = gt.class_cells(class).collect();

    let mut fp = 0usize;
    for k in &volume.cells {
        if !mapped.contains(k) && !class_cells.contains(k) {
            fp += 1;
        }
    }
    let scv = if universe.is_empty() {
        1.0
    } else {
        1.0 - fp as f64 / universe.len() as f64
    };

    let mut tp = 0usize;
    let mut class_unmapped = 0usize;
    for k in &universe {
        if class_cells.contains(k) {
            class_unmapped += 1;
            if volume.contains(*k) {
                tp += 1;
            }
        }
    }
    let recall = if class_unmapped == 0 {
        1.0
    } else {
        tp as f64 / class_unmapped as f64
    };

    ScvrParts {
        scv,
        recall,
        scvr: scv * recall,
    }
}

fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    match points.len() {
        0 => 0.0,
        1 => points[0].1,
        _ => {
            let mut area = 0.0;
            for w in points.windows(2) {
                debug_assert!(w[1].0 > w[0].0, "timestamps must strictly increase");
                area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
            }
            area / (points[points.len() - 1].0 - points[0].0)
        }
    }
}

/// Time-normalized trapezoidal area under the SCVR curve, truncated at the
/// first timestep where half the class has entered the mapped region.
/// Classes that never reach 50% integrate over the whole run.
pub fn scvr_auc(series: &MetricSeries) -> f64 {
    if series.points.is_empty() {
        return 0.0;
    }
    let stop = series
        .points
        .iter()
        .position(|p| p.mapped_fraction >= 0.5)
        .unwrap_or(series.points.len() - 1);
    let pts: Vec<(f64, f64)> = series.points[..=stop]
        .iter()
        .map(|p| (p.timestep as f64, p.scvr))
        .collect();
    trapezoid_auc(&pts)
}

/// Time-normalized trapezoidal area under an mIoU curve.
pub fn miou_time_auc(points: &[(f64, f64)]) -> f64 {
    trapezoid_auc(points)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationMetrics {
    pub miou: f64,
    pub f_miou: f64,
    pub acc: f64,
}

/// Scores a labeled point set against the ground truth: every GT cell takes
/// the majority label of its k nearest predictions (majority ties go to the
/// label with the closer representative, then the lower id), and the
/// confusion matrix yields per-class IoU, its unweighted and
/// frequency-weighted means, and overall accuracy. No predictions at all
/// scores 0 across the board.
pub fn segmentation_metrics(
    predictions: &[(Vector3<f64>, u32)],
    gt: &GroundTruth,
    k: usize,
) -> SegmentationMetrics {
    assert!(k >= 1);
    let classes = gt.classes();
    if gt.cells.is_empty() {
        return SegmentationMetrics {
            miou: 0.0,
            f_miou: 0.0,
            acc: 0.0,
        };
    }

    // tp/fp/fn per class id.
    let mut tp: BTreeMap<u32, usize> = BTreeMap::new();
    let mut fp: BTreeMap<u32, usize> = BTreeMap::new();
    let mut fn_: BTreeMap<u32, usize> = BTreeMap::new();
    let mut correct = 0usize;

    for (&cell, &truth) in &gt.cells {
        let assigned = majority_label(cell_center(cell, gt.resolution), predictions, k);
        match assigned {
            Some(label) if label == truth => {
                *tp.entry(truth).or_insert(0) += 1;
                correct += 1;
            }
            Some(label) => {
                *fp.entry(label).or_insert(0) += 1;
                *fn_.entry(truth).or_insert(0) += 1;
            }
            None => {
                *fn_.entry(truth).or_insert(0) += 1;
            }
        }
    }

    let total = gt.cells.len() as f64;
    let mut iou_sum = 0.0;
    let mut f_sum = 0.0;
    for &c in &classes {
        let t = *tp.get(&c).unwrap_or(&0) as f64;
        let denom = t + *fp.get(&c).unwrap_or(&0) as f64 + *fn_.get(&c).unwrap_or(&0) as f64;
        let iou = if denom > 0.0 { t / denom } else { 0.0 };
        iou_sum += iou;
        f_sum += iou * gt.support(c) as f64 / total;
    }

    SegmentationMetrics {
        miou: iou_sum / classes.len() as f64,
        f_miou: f_sum,
        acc: correct as f64 / total,
    }
}

fn majority_label(center: Vector3<f64>, predictions: &[(Vector3<f64>, u32)], k: usize) -> Option<u32> {
    if predictions.is_empty() {
        return None;
    }
    let mut dists: Vec<(f64, usize)> = predictions
        .iter()
        .enumerate()
        .map(|(i, (p, _))| ((p - center).norm(), i))
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists.truncate(k);

    // (count, nearest distance) per candidate label among the k.
    let mut votes: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    for &(d, i) in &dists {
        let label = predictions[i].1;
        let e = votes.entry(label).or_insert((0, f64::INFINITY));
        e.0 += 1;
        if d < e.1 {
            e.1 = d;
        }
    }
    votes
        .into_iter()
        .max_by(|a, b| {
            (a.1 .0 as f64)
                .total_cmp(&(b.1 .0 as f64))
                .then(b.1 .1.total_cmp(&a.1 .1))
                .then(b.0.cmp(&a.0))
        })
        .map(|(label, _)| label)
}
