//! Core library for mouse-contingent attention experiments.
//!
//! The crate is organized bottom-up:
//!
//! - [`config`]: experiment parameters and visual-angle conversions.
//! - [`imaging`]: stimulus blur, bubble compositing and heatmap overlays.
//! - [`maps`]: point sets (clicks, mouse samples, fixations) and attention maps.
//! - [`metrics`]: CC, NSS, inter-observer consistency and dataset reports.
//! - [`analysis`]: power-law extrapolation, element importance, center bias, cost.
//! - [`store`]: the append-only event log, fixation import and click filtering.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod imaging;
pub mod maps;
pub mod metrics;
pub mod store;

mod stats;

pub use analysis::{CostModel, ElementAnnotation, PowerFit, Region};
pub use config::{ExperimentConfig, MapParams, MouseModality, TaskType, TimeLimit, ViewingGeometry};
pub use imaging::Image;
pub use maps::{AttentionMap, Normalization, Point, PointKind, PointSet};
pub use metrics::MetricReport;
pub use store::{EventKind, EventLog, EventRecord, FilterPolicy, Session, SessionStatus};

/// 64-bit FNV-1a, used to derive stable per-item seeds from string ids.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes a base seed with an item key (splitmix64 finalizer).
pub fn derive_seed(base: u64, key: u64) -> u64 {
    let mut z = base ^ key.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
