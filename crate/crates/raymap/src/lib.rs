//! Real-time open-set 3D semantic mapping engine with beyond-range semantic
//! rays, plus a planner-agnostic benchmark for search-volume reduction.
//!
//! The map side fuses posed depth + dense feature frames into:
//! sparse log-odds occupancy ([`occupancy`]), a within-range semantic voxel
//! map ([`semvox`]), exploration frontiers ([`frontier`]), and direction-binned
//! semantic rays anchored at frontiers ([`rayfront`]) that carry open-set
//! semantics for things seen past the depth range. The benchmark side
//! ([`query`], [`eval`], [`bench`]) scores how well any such representation
//! cuts down the unexplored volume a planner would have to search.

pub mod baselines;
pub mod bench;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod frontier;
pub mod geom;
pub mod occupancy;
pub mod pipeline;
pub mod query;
pub mod rayfront;
pub mod semvox;
mod util;
