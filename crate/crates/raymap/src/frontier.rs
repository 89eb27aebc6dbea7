//! Frontier extraction: Free cells bordering enough unobserved space become
//! fine frontiers, which are then pooled onto a coarser grid so downstream
//! ray bookkeeping stays small.

use crate::geom::{cell_center, coarsen_key, CellIndex};
use crate::occupancy::OccupancyGrid;
use nalgebra::Vector3;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrontierError {
    #[error("coarse resolution mismatch: {0} vs {1}")]
    ResolutionMismatch(f64, f64),
}

/// Frontier cells on the coarse grid of size `coarse_resolution`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrontierSet {
    pub coarse_resolution: f64,
    pub cells: BTreeSet<CellIndex>,
    pub generation: u64,
}

impl FrontierSet {
    pub fn origin(&self, key: CellIndex) -> Vector3<f64> {
        cell_center(key, self.coarse_resolution)
    }

    /// Coarse-cell centers in key order.
    pub fn origins(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.cells.iter().map(|&k| self.origin(k))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Finds the Free fine cells whose (2r+1)^3 - 1 surrounding cells contain at
/// least `min_unobsrv` Unobserved, `min_occ` Occupied, and `min_free` Free
/// cells. Space never covered by any observation counts as Unobserved, and
/// merged super-voxels count through their fine cells.
pub fn compute_fine_frontiers(
    grid: &OccupancyGrid,
    r: i32,
    min_unobsrv: usize,
    min_occ: usize,
    min_free: usize,
) -> BTreeSet<CellIndex> {
    assert!(r >= 1);
    let view = grid.fine_view();
    let mut out = BTreeSet::new();
    if view.is_empty() {
        return out;
    }

    // Neighborhood lookups go through a dense scratch grid over the view's
    // bounding box (padded by r); cells outside any observation read back as
    // Unobserved. Degenerate sparse extents fall back to map lookups.
    let mut lo = [i32::MAX; 3];
    let mut hi = [i32::MIN; 3];
    for k in view.keys() {
        for a in 0..3 {
            lo[a] = lo[a].min(k[a]);
            hi[a] = hi[a].max(k[a]);
        }
    }
    let dims: Vec<i128> = (0..3)
        .map(|a| (hi[a] - lo[a]) as i128 + 1 + 2 * r as i128)
        .collect();
    let total = dims[0] * dims[1] * dims[2];

    if total <= (1 << 26) {
        const UNOBSERVED: u8 = 0;
        const FREE: u8 = 1;
        const OCCUPIED: u8 = 2;
        let sx = (dims[1] * dims[2]) as usize;
        let sy = dims[2] as usize;
        let idx = |k: CellIndex| -> usize {
            (k[0] - lo[0] + r) as usize * sx
                + (k[1] - lo[1] + r) as usize * sy
                + (k[2] - lo[2] + r) as usize
        };
        let mut dense = vec![UNOBSERVED; total as usize];
        for (&k, &occupied) in &view {
            dense[idx(k)] = if occupied { OCCUPIED } else { FREE };
        }
        for (&key, &occupied) in &view {
            if occupied {
                continue;
            }
            let mut unobserved = 0usize;
            let mut occ = 0usize;
            let mut free = 0usize;
            for dx in -r..=r {
                for dy in -r..=r {
                    let base = idx([key[0] + dx, key[1] + dy, key[2] - r]);
                    for dz in 0..=2 * r as usize {
                        if dx == 0 && dy == 0 && dz == r as usize {
                            continue;
                        }
                        match dense[base + dz] {
                            OCCUPIED => occ += 1,
                            FREE => free += 1,
                            _ => unobserved += 1,
                        }
                    }
                }
            }
            if unobserved >= min_unobsrv && occ >= min_occ && free >= min_free {
                out.insert(key);
            }
        }
        return out;
    }

    for (&key, &occupied) in &view {
        if occupied {
            continue;
        }
        let mut unobserved = 0usize;
        let mut occ = 0usize;
        let mut free = 0usize;
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    match view.get(&[key[0] + dx, key[1] + dy, key[2] + dz]) {
                        Some(true) => occ += 1,
                        Some(false) => free += 1,
                        None => unobserved += 1,
                    }
                }
            }
        }
        if unobserved >= min_unobsrv && occ >= min_occ && free >= min_free {
            out.insert(key);
        }
    }
    out
}

/// Pools fine frontiers onto a grid `factor` times coarser; a coarse cell
/// survives iff it covers at least `min_fronti` fine frontiers.
pub fn subsample_frontiers(
    fine: &BTreeSet<CellIndex>,
    resolution: f64,
    factor: u32,
    min_fronti: usize,
) -> FrontierSet {
    assert!(factor >= 1);
    let mut counts: BTreeMap<CellIndex, usize> = BTreeMap::new();
    for &key in fine {
        *counts.entry(coarsen_key(key, factor as i32)).or_insert(0) += 1;
    }
    FrontierSet {
        coarse_resolution: resolution * factor as f64,
        cells: counts
            .into_iter()
            .filter(|&(_, n)| n >= min_fronti)
            .map(|(k, _)| k)
            .collect(),
        generation: 0,
    }
}

/// Exact set difference between two frontier snapshots on the same coarse
/// grid: (removed = old minus new, added = new minus old).
pub fn diff_frontiers(
    old: &FrontierSet,
    new: &FrontierSet,
) -> Result<(BTreeSet<CellIndex>, BTreeSet<CellIndex>), FrontierError> {
    if old.coarse_resolution != new.coarse_resolution {
        return Err(FrontierError::ResolutionMismatch(
            old.coarse_resolution,
            new.coarse_resolution,
        ));
    }
    let removed = old.cells.difference(&new.cells).copied().collect();
    let added = new.cells.difference(&old.cells).copied().collect();
    Ok((removed, added))
}
