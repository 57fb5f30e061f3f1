//! Ego-motion compensated multi-sweep aggregation.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{RigidTransform, Vec3};
use crate::ingest::SweepFrame;
use crate::scalar::Real;
use crate::taxonomy::{Taxonomy, TaxonomyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("empty sweep sequence")]
    EmptySequence,
    #[error("sweep index {index} out of range for {len} sweeps")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Number of past and future sweeps merged into the current one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationStrategy {
    pub past: u32,
    pub future: u32,
}

impl AggregationStrategy {
    pub fn current_only() -> Self {
        Self::default()
    }

    /// Sweep indices merged at `idx`, clamped to the sequence bounds.
    pub fn window(&self, len: usize, idx: usize) -> RangeInclusive<usize> {
        let lo = idx.saturating_sub(self.past as usize);
        let hi = (idx + self.future as usize).min(len.saturating_sub(1));
        lo..=hi
    }
}

pub fn strategy_for_class(tax: &Taxonomy, class_label: &str) -> Result<AggregationStrategy, TaxonomyError> {
    tax.get(class_label).map(|c| c.aggregation)
}

/// lidar(current) <- lidar(source).
pub fn compensation(current: &SweepFrame, source: &SweepFrame) -> RigidTransform<f64> {
    current
        .world_from_lidar()
        .inverse()
        .compose(&source.world_from_lidar())
}

/// Merges the sweeps of the strategy's window into the LiDAR frame of
/// sweep `idx`, ordered by sweep index and then by point index.
pub fn aggregate_sweeps<T: Real>(
    seq: &[SweepFrame],
    idx: usize,
    strat: AggregationStrategy,
) -> Result<Vec<Vec3<T>>, AggregateError> {
    if seq.is_empty() {
        return Err(AggregateError::EmptySequence);
    }
    if idx >= seq.len() {
        return Err(AggregateError::IndexOutOfRange {
            index: idx,
            len: seq.len(),
        });
    }
    let window = strat.window(seq.len(), idx);
    let total = seq[window.clone()].iter().map(|s| s.points.len()).sum();
    let mut out = Vec::with_capacity(total);
    let current = &seq[idx];
    for j in window {
        let src = &seq[j];
        let to_point = |p: &[f32; 4]| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64);
        if j == idx {
            out.extend(src.points.iter().map(|p| to_point(p).cast()));
        } else {
            let t = compensation(current, src);
            out.extend(src.points.iter().map(|p| t.apply(to_point(p)).cast()));
        }
    }
    Ok(out)
}
