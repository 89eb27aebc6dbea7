//! Open-set querying: cosine-similarity classification with prompt
//! denoising, and per-class search volumes built from ray cones, frontier
//! balls, or (absent any evidence) the whole unmapped region.

use crate::frontier::FrontierSet;
use crate::geom::{cell_center, voxel_key, Aabb, CellIndex};
use crate::occupancy::{OccupancyClass, OccupancyGrid};
use nalgebra::Vector3;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("query set must contain at least one label")]
    EmptyQuerySet,
    #[error("label {0:?} embedding norm {1} is not unit")]
    NonUnitEmbedding(String, f64),
    #[error("label {0:?} embedding has zero norm")]
    ZeroEmbedding(String),
}

/// Named unit-norm query embeddings.
#[derive(Debug, Clone)]
pub struct QuerySet {
    labels: Vec<(String, Vec<f64>)>,
}

impl QuerySet {
    /// Validates that every embedding is unit-norm within 1e-6.
    pub fn new(labels: Vec<(String, Vec<f64>)>) -> Result<Self, QueryError> {
        if labels.is_empty() {
            return Err(QueryError::EmptyQuerySet);
        }
        for (name, e) in &labels {
            let n = norm(e);
            if (n - 1.0).abs() > 1e-6 {
                return Err(QueryError::NonUnitEmbedding(name.clone(), n));
            }
        }
        Ok(QuerySet { labels })
    }

    /// Normalizes raw embeddings first; zero vectors are rejected.
    pub fn normalized(labels: Vec<(String, Vec<f64>)>) -> Result<Self, QueryError> {
        let mut out = Vec::with_capacity(labels.len());
        for (name, mut e) in labels {
            let n = norm(&e);
            if n < 1e-12 {
                return Err(QueryError::ZeroEmbedding(name));
            }
            for x in &mut e {
                *x /= n;
            }
            out.push((name, e));
        }
        QuerySet::new(out)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|(n, _)| n.as_str())
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index].0
    }

    pub fn embedding(&self, index: usize) -> &[f64] {
        &self.labels[index].1
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Classifies each feature against the query labels. Labels whose best
/// softmax probability across the whole batch stays below `denoise_thresh`
/// are suppressed; each item then takes a softmax over the surviving labels
/// and predicts the argmax when it exceeds `prediction_thresh` (ties break
/// to the lowest label index).
pub fn classify(
    features: &[Vec<f64>],
    queries: &QuerySet,
    prediction_thresh: f64,
    denoise_thresh: f64,
) -> Result<Vec<Option<usize>>, QueryError> {
    if queries.is_empty() {
        return Err(QueryError::EmptyQuerySet);
    }
    let k = queries.len();
    let sims: Vec<Vec<f64>> = features
        .iter()
        .map(|f| (0..k).map(|j| cosine(f, queries.embedding(j))).collect())
        .collect();

    // Denoising pass: a label survives if some item gives it enough mass
    // under the all-labels softmax.
    let mut best = vec![f64::NEG_INFINITY; k];
    for s in &sims {
        for (j, p) in softmax(s).into_iter().enumerate() {
            if p > best[j] {
                best[j] = p;
            }
        }
    }
    let survivors: Vec<usize> = (0..k).filter(|&j| best[j] >= denoise_thresh).collect();
    if survivors.is_empty() {
        return Ok(vec![None; features.len()]);
    }

    Ok(sims
        .iter()
        .map(|s| {
            let sub: Vec<f64> = survivors.iter().map(|&j| s[j]).collect();
            let probs = softmax(&sub);
            let mut arg = 0usize;
            for i in 1..probs.len() {
                if probs[i] > probs[arg] {
                    arg = i;
                }
            }
            (probs[arg] > prediction_thresh).then(|| survivors[arg])
        })
        .collect())
}

/// Binary per-class search volume on the evaluation grid: cells kept after
/// stamping evidence into the unmapped region, max-normalizing, and
/// thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchVolumeGrid {
    pub resolution: f64,
    pub bounds: Aabb,
    pub cells: BTreeSet<CellIndex>,
}

impl SearchVolumeGrid {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, key: CellIndex) -> bool {
        self.cells.contains(&key)
    }

    /// Same text layout as the occupancy dump; volume cells carry value 1.
    pub fn dump_text(&self) -> String {
        let mut s = String::new();
        for k in &self.cells {
            writeln!(s, "{} {} {} 0 1", k[0], k[1], k[2]).unwrap();
        }
        s
    }

    fn from_counts(
        resolution: f64,
        bounds: Aabb,
        counts: BTreeMap<CellIndex, f64>,
        threshold: f64,
    ) -> Self {
        let max = counts.values().copied().fold(0.0f64, f64::max);
        let cells = if max > 0.0 {
            counts
                .into_iter()
                .filter(|&(_, c)| c / max >= threshold)
                .map(|(k, _)| k)
                .collect()
        } else {
            BTreeSet::new()
        };
        SearchVolumeGrid {
            resolution,
            bounds,
            cells,
        }
    }
}

/// Evaluation-resolution cells currently covered by occupancy evidence.
/// When the evaluation grid is coarser than the map, a cell counts as mapped
/// if any of its fine sub-cells is observed.
pub fn mapped_mask(grid: &OccupancyGrid, bounds: &Aabb, resolution: f64) -> BTreeSet<CellIndex> {
    let ratio = resolution / grid.resolution();
    let sub = ratio.round() as i32;
    assert!(
        sub >= 1 && (ratio - sub as f64).abs() < 1e-9,
        "evaluation resolution must be an integer multiple of the map resolution"
    );
    let mut mask = BTreeSet::new();
    for key in enumerate_cells(bounds, resolution) {
        let mapped = if sub == 1 {
            grid.class_of_key(key) != OccupancyClass::Unobserved
        } else {
            let base = [key[0] * sub, key[1] * sub, key[2] * sub];
            'scan: loop {
                for dx in 0..sub {
                    for dy in 0..sub {
                        for dz in 0..sub {
                            if grid.class_of_key([base[0] + dx, base[1] + dy, base[2] + dz])
                                != OccupancyClass::Unobserved
                            {
                                break 'scan true;
                            }
                        }
                    }
                }
                break false;
            }
        };
        if mapped {
            mask.insert(key);
        }
    }
    mask
}

/// Integer keys of every cell whose center falls inside the bounds.
pub fn enumerate_cells(bounds: &Aabb, resolution: f64) -> Vec<CellIndex> {
    let lo = |v: f64| (v / resolution).floor() as i32;
    let hi = |v: f64| (v / resolution).ceil() as i32;
    let mut out = Vec::new();
    for x in lo(bounds.min.x)..=hi(bounds.max.x) {
        for y in lo(bounds.min.y)..=hi(bounds.max.y) {
            for z in lo(bounds.min.z)..=hi(bounds.max.z) {
                let key = [x, y, z];
                if bounds.contains(&cell_center(key, resolution)) {
                    out.push(key);
                }
            }
        }
    }
    out
}

/// Stamps one infinite cone per ray (apex at the ray origin, aperture
/// `cone_half_angle_deg` each side of the axis) into the unmapped cells
/// inside the bounds, then max-normalizes the counts and keeps cells at or
/// above `threshold`. A cell containing a ray's apex counts as inside.
pub fn build_search_volume_rays(
    rays: &[(Vector3<f64>, Vector3<f64>)],
    cone_half_angle_deg: f64,
    bounds: &Aabb,
    resolution: f64,
    mapped: &BTreeSet<CellIndex>,
    threshold: f64,
) -> SearchVolumeGrid {
    let cos_half = cone_half_angle_deg.to_radians().cos();
    let mut counts: BTreeMap<CellIndex, f64> = BTreeMap::new();
    for key in enumerate_cells(bounds, resolution) {
        if mapped.contains(&key) {
            continue;
        }
        let center = cell_center(key, resolution);
        let mut n = 0.0;
        for (origin, dir) in rays {
            let v = center - origin;
            let len = v.norm();
            if len < 1e-12 || v.dot(dir) / len >= cos_half {
                n += 1.0;
            }
        }
        if n > 0.0 {
            counts.insert(key, n);
        }
    }
    SearchVolumeGrid::from_counts(resolution, *bounds, counts, threshold)
}

/// Stamps one ball per matched frontier, with radius equal to the distance
/// to its nearest other frontier (or the coarse cell size when it is
/// alone), into the unmapped cells; normalize/threshold as for cones.
pub fn build_search_volume_spherical(
    matched: &[CellIndex],
    frontiers: &FrontierSet,
    bounds: &Aabb,
    resolution: f64,
    mapped: &BTreeSet<CellIndex>,
    threshold: f64,
) -> SearchVolumeGrid {
    let balls: Vec<(Vector3<f64>, f64)> = matched
        .iter()
        .map(|&cell| {
            let o = frontiers.origin(cell);
            let radius = frontiers
                .cells
                .iter()
                .filter(|&&c| c != cell)
                .map(|&c| (frontiers.origin(c) - o).norm())
                .fold(f64::INFINITY, f64::min);
            let radius = if radius.is_finite() {
                radius
            } else {
                frontiers.coarse_resolution
            };
            (o, radius)
        })
        .collect();

    let mut counts: BTreeMap<CellIndex, f64> = BTreeMap::new();
    for key in enumerate_cells(bounds, resolution) {
        if mapped.contains(&key) {
            continue;
        }
        let center = cell_center(key, resolution);
        let n = balls
            .iter()
            .filter(|(o, r)| (center - o).norm() <= *r)
            .count() as f64;
        if n > 0.0 {
            counts.insert(key, n);
        }
    }
    SearchVolumeGrid::from_counts(resolution, *bounds, counts, threshold)
}

/// The whole unmapped region: the fallback volume when a representation has
/// no evidence at all for a class.
pub fn search_volume_unconstrained(
    bounds: &Aabb,
    resolution: f64,
    mapped: &BTreeSet<CellIndex>,
) -> SearchVolumeGrid {
    SearchVolumeGrid {
        resolution,
        bounds: *bounds,
        cells: enumerate_cells(bounds, resolution)
            .into_iter()
            .filter(|k| !mapped.contains(k))
            .collect(),
    }
}

/// Marks all evaluation cells containing any semantic-voxel center. Used by
/// the voxels-only representation, whose search evidence is exact.
pub fn voxel_evidence_cells(
    centers: impl IntoIterator<Item = Vector3<f64>>,
    bounds: &Aabb,
    resolution: f64,
) -> BTreeSet<CellIndex> {
    centers
        .into_iter()
        .filter(|c| bounds.contains(c))
        .map(|c| voxel_key(&c, resolution))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    fn two_orthogonal() -> QuerySet {
        QuerySet::new(vec![
            ("a".into(), vec![1.0, 0.0]),
            ("b".into(), vec![0.0, 1.0]),
        ])
        .unwrap()
    }

    #[test]
    fn perfect_match_wins() {
        let q = two_orthogonal();
        let out = classify(&[vec![1.0, 0.0]], &q, 0.1, 0.0).unwrap();
        assert_eq!(out, vec![Some(0)]);
    }

    #[test]
    fn uniform_similarity_breaks_ties_to_lowest_index() {
        let q = QuerySet::new(vec![
            ("a".into(), unit(vec![1.0, 0.0, 0.0])),
            ("b".into(), unit(vec![0.0, 1.0, 0.0])),
        ])
        .unwrap();
        // Feature orthogonal to both labels: sims (0,0), softmax 1/2 each.
        let out = classify(&[vec![0.0, 0.0, 1.0]], &q, 0.1, 0.0).unwrap();
        assert_eq!(out, vec![Some(0)]);
        // Zero feature behaves the same (similarity defined as 0).
        let out = classify(&[vec![0.0, 0.0, 0.0]], &q, 0.1, 0.0).unwrap();
        assert_eq!(out, vec![Some(0)]);
    }

    #[test]
    fn weak_label_is_suppressed_globally() {
        let q = two_orthogonal();
        // Both items lean toward label 0 with sims (0.9, 0.1); label 1's
        // best softmax is 1/(1+e^0.8), well below 0.5.
        let f = unit(vec![0.9, 0.1]);
        let scale = norm(&vec![0.9, 0.1]);
        let sims = (0.9 / scale, 0.1 / scale);
        let p1 = (sims.1 - sims.0).exp() / (1.0 + (sims.1 - sims.0).exp());
        assert!(p1 < 0.5);

        let out = classify(&[f.clone(), f], &q, 0.1, 0.5).unwrap();
        // Label 1 suppressed everywhere; survivors = {0}, probability 1.
        assert_eq!(out, vec![Some(0), Some(0)]);

        // With both labels kept, a high prediction threshold blocks the
        // prediction entirely.
        let f2 = unit(vec![0.9, 0.1]);
        let out = classify(&[f2], &q, 0.999, 0.0).unwrap();
        assert_eq!(out, vec![None]);
    }

    #[test]
    fn classification_is_scale_invariant() {
        let q = QuerySet::new(vec![
            ("a".into(), unit(vec![3.0, 1.0, 0.5])),
            ("b".into(), unit(vec![-1.0, 2.0, 0.0])),
            ("c".into(), unit(vec![0.0, 0.2, 1.0])),
        ])
        .unwrap();
        let feats: Vec<Vec<f64>> = vec![
            vec![2.9, 1.1, 0.4],
            vec![-0.8, 1.9, 0.1],
            vec![0.1, 0.3, 0.9],
        ];
        let base = classify(&feats, &q, 0.1, 0.0).unwrap();
        for c in [0.01, 7.3, 1000.0] {
            let scaled: Vec<Vec<f64>> = feats
                .iter()
                .map(|f| f.iter().map(|x| x * c).collect())
                .collect();
            assert_eq!(classify(&scaled, &q, 0.1, 0.0).unwrap(), base);
        }
    }

    #[test]
    fn query_set_validation() {
        assert!(matches!(
            QuerySet::new(vec![]),
            Err(QueryError::EmptyQuerySet)
        ));
        assert!(matches!(
            QuerySet::new(vec![("x".into(), vec![2.0, 0.0])]),
            Err(QueryError::NonUnitEmbedding(..))
        ));
        assert!(matches!(
            QuerySet::normalized(vec![("x".into(), vec![0.0, 0.0])]),
            Err(QueryError::ZeroEmbedding(..))
        ));
        assert!(QuerySet::normalized(vec![("x".into(), vec![3.0, 4.0])]).is_ok());
    }

    fn bounds(side: f64) -> Aabb {
        Aabb::new(Vector3::zeros(), Vector3::new(side, side, side))
    }

    #[test]
    fn single_cone_survives_normalization_entirely() {
        let b = bounds(16.0);
        let rays = vec![(
            Vector3::new(8.0, 8.0, 0.5),
            Vector3::new(0.0, 0.0, 1.0),
        )];
        let vol = build_search_volume_rays(&rays, 15.0, &b, 1.0, &BTreeSet::new(), 0.05);
        assert!(!vol.is_empty());
        // Every stamped cell has count 1 = max, so all survive; recompute
        // membership with the explicit angle test.
        for key in enumerate_cells(&b, 1.0) {
            let v = cell_center(key, 1.0) - rays[0].0;
            let inside = v.norm() < 1e-12
                || (v.dot(&rays[0].1) / v.norm()).clamp(-1.0, 1.0).acos() <= 15.0f64.to_radians();
            assert_eq!(vol.contains(key), inside, "cell {key:?}");
        }
    }

    #[test]
    fn disjoint_cones_both_survive() {
        let b = bounds(16.0);
        let rays = vec![
            (Vector3::new(2.0, 2.0, 0.5), Vector3::new(0.0, 0.0, 1.0)),
            (Vector3::new(14.0, 14.0, 0.5), Vector3::new(0.0, 0.0, 1.0)),
        ];
        let vol = build_search_volume_rays(&rays, 10.0, &b, 1.0, &BTreeSet::new(), 0.05);
        let near_first = vol.cells.iter().any(|k| k[0] < 8);
        let near_second = vol.cells.iter().any(|k| k[0] >= 8);
        assert!(near_first && near_second);
    }

    #[test]
    fn rare_stray_cone_is_thresholded_away() {
        let b = bounds(16.0);
        // 21 coincident cones and one stray: stray cells normalize to
        // 1/21 < 0.05 and drop out.
        let mut rays = vec![];
        for _ in 0..21 {
            rays.push((Vector3::new(2.0, 2.0, 0.5), Vector3::new(0.0, 0.0, 1.0)));
        }
        rays.push((Vector3::new(14.0, 14.0, 0.5), Vector3::new(0.0, 0.0, 1.0)));
        let vol = build_search_volume_rays(&rays, 10.0, &b, 1.0, &BTreeSet::new(), 0.05);
        assert!(!vol.is_empty());
        assert!(vol.cells.iter().all(|k| k[0] < 8), "stray cone survived");

        // With 19 coincident cones the stray sits at 1/19 > 0.05 and stays.
        let mut rays = vec![];
        for _ in 0..19 {
            rays.push((Vector3::new(2.0, 2.0, 0.5), Vector3::new(0.0, 0.0, 1.0)));
        }
        rays.push((Vector3::new(14.0, 14.0, 0.5), Vector3::new(0.0, 0.0, 1.0)));
        let vol = build_search_volume_rays(&rays, 10.0, &b, 1.0, &BTreeSet::new(), 0.05);
        assert!(vol.cells.iter().any(|k| k[0] >= 8));
    }

    #[test]
    fn volumes_exclude_mapped_cells() {
        let b = bounds(8.0);
        let mapped: BTreeSet<CellIndex> = enumerate_cells(&b, 1.0)
            .into_iter()
            .filter(|k| k[2] < 4)
            .collect();
        let rays = vec![(Vector3::new(4.0, 4.0, 0.5), Vector3::new(0.0, 0.0, 1.0))];
        let vol = build_search_volume_rays(&rays, 45.0, &b, 1.0, &mapped, 0.05);
        assert!(!vol.is_empty());
        assert!(vol.cells.iter().all(|k| !mapped.contains(k)));
    }

    fn frontier_set(beta: f64, cells: &[CellIndex]) -> FrontierSet {
        FrontierSet {
            coarse_resolution: beta,
            cells: cells.iter().copied().collect(),
            generation: 0,
        }
    }

    #[test]
    fn lone_frontier_ball_uses_coarse_cell_radius() {
        let b = bounds(16.0);
        let fs = frontier_set(4.0, &[[1, 1, 1]]);
        let vol =
            build_search_volume_spherical(&[[1, 1, 1]], &fs, &b, 1.0, &BTreeSet::new(), 0.05);
        let origin = Vector3::new(6.0, 6.0, 6.0);
        for key in enumerate_cells(&b, 1.0) {
            let inside = (cell_center(key, 1.0) - origin).norm() <= 4.0;
            assert_eq!(vol.contains(key), inside);
        }
    }

    #[test]
    fn ball_radius_reaches_nearest_other_frontier() {
        let b = bounds(16.0);
        // Frontier centers (2,2,2) and (2,2,12): distance 10.
        let fs = frontier_set(4.0, &[[0, 0, 0], [0, 0, 2]]);
        let shifted = FrontierSet {
            coarse_resolution: 4.0,
            cells: [[0, 0, 0], [0, 0, 2]].into_iter().collect(),
            generation: 0,
        };
        assert_eq!(
            (shifted.origin([0, 0, 0]) - shifted.origin([0, 0, 2])).norm(),
            8.0
        );
        let vol =
            build_search_volume_spherical(&[[0, 0, 0]], &fs, &b, 1.0, &BTreeSet::new(), 0.05);
        let origin = Vector3::new(2.0, 2.0, 2.0);
        for key in enumerate_cells(&b, 1.0) {
            let inside = (cell_center(key, 1.0) - origin).norm() <= 8.0;
            assert_eq!(vol.contains(key), inside);
        }
    }

    #[test]
    fn fully_mapped_surroundings_leave_no_ball() {
        let b = bounds(8.0);
        let mapped: BTreeSet<CellIndex> = enumerate_cells(&b, 1.0).into_iter().collect();
        let fs = frontier_set(4.0, &[[0, 0, 0]]);
        let vol = build_search_volume_spherical(&[[0, 0, 0]], &fs, &b, 1.0, &mapped, 0.05);
        assert!(vol.is_empty());
    }

    #[test]
    fn unconstrained_volume_is_exactly_the_unmapped_region() {
        let b = bounds(8.0);
        let all = enumerate_cells(&b, 1.0);
        assert_eq!(
            search_volume_unconstrained(&b, 1.0, &BTreeSet::new()).len(),
            all.len()
        );
        let everything: BTreeSet<CellIndex> = all.iter().copied().collect();
        assert!(search_volume_unconstrained(&b, 1.0, &everything).is_empty());
        let half: BTreeSet<CellIndex> = all.iter().copied().filter(|k| k[0] < 4).collect();
        let vol = search_volume_unconstrained(&b, 1.0, &half);
        assert_eq!(vol.len(), all.len() - half.len());
        assert!(vol.cells.iter().all(|k| k[0] >= 4));
    }

    #[test]
    fn normalization_is_idempotent_on_binary_volumes() {
        let b = bounds(8.0);
        let rays = vec![(Vector3::new(4.0, 4.0, 0.5), Vector3::new(0.0, 0.0, 1.0))];
        let vol = build_search_volume_rays(&rays, 30.0, &b, 1.0, &BTreeSet::new(), 0.05);
        let counts: BTreeMap<CellIndex, f64> =
            vol.cells.iter().map(|&k| (k, 1.0)).collect();
        let rebuilt = SearchVolumeGrid::from_counts(1.0, b, counts, 0.05);
        assert_eq!(rebuilt.cells, vol.cells);
    }

    #[test]
    fn mapped_mask_respects_resolution_ratio() {
        let mut g = OccupancyGrid::new(0.5, -10, 100);
        let cls = crate::occupancy::FrustumClassification {
            free: vec![[0, 0, 0]],
            occupied: vec![],
        };
        g.apply_classified(&cls, 100, usize::MAX, usize::MAX);
        let b = bounds(2.0);
        // One 0.5 m fine cell marks its 1 m evaluation cell as mapped.
        let mask = mapped_mask(&g, &b, 1.0);
        assert_eq!(mask.into_iter().collect::<Vec<_>>(), vec![[0, 0, 0]]);
    }
}
