//! Cuboid confidence: BEV occupancy of the footprint fused with the 2D
//! detector score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate, EvalConfig};
use crate::geom::{Cuboid3D, CuboidFrame, Vec3};
use crate::ingest::ScoredAnnotation;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("{name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("grid size must be at least 1")]
    EmptyGrid,
    #[error("empty validation set")]
    EmptyValidation,
    #[error("no candidate alphas")]
    NoCandidates,
    #[error("prediction {0} carries no score components to re-fuse")]
    MissingComponents(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    /// Cells per side of the BEV occupancy grid.
    pub grid_k: u32,
    /// Weight of the 2D score in the fused score.
    pub alpha: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            grid_k: 7,
            alpha: 0.5,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.grid_k == 0 {
            return Err(ScoreError::EmptyGrid);
        }
        unit("alpha", self.alpha)
    }
}

fn unit(name: &'static str, value: f64) -> Result<(), ScoreError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ScoreError::OutOfRange { name, value })
    }
}

/// Grid cell along one local axis: floor binning over `[-half, half]`, the
/// upper edge belonging to the last cell.
#[inline]
fn cell<T: Real>(coord: T, half: T, k: u32) -> usize {
    let t = (coord + half) / (half + half) * T::lit(k as f64);
    let i = t.floor().to_i64().unwrap_or(0);
    i.clamp(0, k as i64 - 1) as usize
}

/// Fraction of the `k x k` footprint cells (in the cuboid's own yaw-aligned
/// frame) that contain at least one point lying inside the cuboid.
pub fn occupancy_rate<T: Real>(c: &Cuboid3D<T>, points: &[Vec3<T>], k: u32) -> T {
    if k == 0 {
        return T::zero();
    }
    let frame = CuboidFrame::new(c);
    let (hl, hw) = (c.dims.l * T::half(), c.dims.w * T::half());
    let k_us = k as usize;
    let mut occupied = vec![false; k_us * k_us];
    let mut n = 0usize;
    for p in points {
        if !frame.contains(*p) {
            continue;
        }
        let q = frame.to_local(*p);
        let idx = cell(q.x, hl, k) * k_us + cell(q.y, hw, k);
        if !occupied[idx] {
            occupied[idx] = true;
            n += 1;
        }
    }
    T::lit(n as f64) / T::lit((k_us * k_us) as f64)
}

/// `alpha * s2d + (1 - alpha) * s3d`.
pub fn fuse_score(s2d: f64, s3d: f64, alpha: f64) -> Result<f64, ScoreError> {
    unit("s2d", s2d)?;
    unit("s3d", s3d)?;
    unit("alpha", alpha)?;
    Ok((alpha * s2d + (1.0 - alpha) * s3d).clamp(0.0, 1.0))
}

/// `0.00, 0.05, ..., 1.00`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// Picks the alpha whose re-fused scores give the highest 3D mAP on a
/// validation set; ties go to the smaller alpha.
///
/// Every prediction must carry both `score_2d` and `score_3d`.
pub fn tune_alpha(
    preds: &[ScoredAnnotation],
    gts: &[ScoredAnnotation],
    candidates: &[f64],
    cfg: &EvalConfig,
) -> Result<f64, ScoreError> {
    if gts.is_empty() {
        return Err(ScoreError::EmptyValidation);
    }
    if candidates.is_empty() {
        return Err(ScoreError::NoCandidates);
    }
    let parts: Vec<(f64, f64)> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| match (p.score_2d, p.score_3d) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(ScoreError::MissingComponents(i)),
        })
        .collect::<Result<_, _>>()?;
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for alpha in sorted {
        let mut rescored = preds.to_vec();
        for (p, &(s2, s3)) in rescored.iter_mut().zip(&parts) {
            p.score = fuse_score(s2, s3, alpha)?;
        }
        let map = evaluate(&rescored, gts, cfg).map_3d;
        if best.is_none_or(|(_, m)| map > m) {
            best = Some((alpha, map));
        }
    }
    Ok(best.expect("nonempty candidates").0)
}
