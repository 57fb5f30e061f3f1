//! Multi-hypothesis cuboid search.
//!
//! For one detection, a grid of cuboid poses (translation and yaw, with the
//! dimensions fixed by the prior) is scored by
//!
//! ```text
//! objective = coverage + IoU(projected box, detection box)
//! ```
//!
//! where coverage is the fraction of foreground frustum points inside the
//! cuboid. The best pose is chosen with a total tie-break so the result does
//! not depend on evaluation order or thread count.
//!
//! The module also carries the input/output codecs of a point-based box
//! refiner: canonical point transform, 9-dim point features and log-scale
//! dimension offsets.

use std::cmp::Ordering;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frustum::CameraView;
use crate::geom::{
    iou_2d, normalize_angle, project_cuboid_to_box, yaw_diff, Box2D, Cuboid3D, CuboidFrame, Dims, Vec3,
};
use crate::prior::SemanticPrior;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MhtError {
    #[error("empty frustum: no foreground points")]
    EmptyFrustum,
    #[error("empty point set")]
    EmptyPointSet,
    #[error("empty hypothesis grid")]
    EmptyGrid,
    #[error("dimensions must be positive, got {0:?}")]
    NonPositiveDims([f64; 3]),
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
}

/// Number of points fed to the refiner network.
pub const REFINER_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Meters.
    pub trans_step: f64,
    /// Radians.
    pub rot_step: f64,
    /// Half-width of the x and y search around the anchor, meters.
    pub xy_range: f64,
    /// Half-width of the z search around the anchor, meters.
    pub z_range: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            trans_step: 0.5,
            rot_step: std::f64::consts::PI / 10.0,
            xy_range: 2.0,
            z_range: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), MhtError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !pos(self.trans_step) || !pos(self.rot_step) {
            return Err(MhtError::InvalidConfig("step sizes must be positive".into()));
        }
        if self.rot_step > std::f64::consts::TAU {
            return Err(MhtError::InvalidConfig("rot_step exceeds a full turn".into()));
        }
        if !nonneg(self.xy_range) || !nonneg(self.z_range) {
            return Err(MhtError::InvalidConfig("search ranges must be nonnegative".into()));
        }
        Ok(())
    }

    /// Same anchors, both steps halved.
    pub fn refined(&self) -> Self {
        Self {
            trans_step: self.trans_step / 2.0,
            rot_step: self.rot_step / 2.0,
            ..*self
        }
    }
}

/// One evaluated pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypothesis<T> {
    pub cuboid: Cuboid3D<T>,
    pub coverage: T,
    pub proj_iou: T,
    /// `coverage + proj_iou`.
    pub objective: T,
}

/// Fraction of points inside the cuboid; 0 for an empty set.
pub fn coverage_ratio<T: Real>(points: &[Vec3<T>], c: &Cuboid3D<T>) -> T {
    if points.is_empty() {
        return T::zero();
    }
    let frame = CuboidFrame::new(c);
    let inside = points.iter().filter(|p| frame.contains(**p)).count();
    T::lit(inside as f64) / T::lit(points.len() as f64)
}

fn median<T: Real>(mut v: Vec<T>) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * T::half()
    }
}

/// Search anchor: median foreground x/y, bottom face on the lowest point,
/// prior dimensions and heading.
pub fn init_hypothesis<T: Real>(
    foreground: &[Vec3<T>],
    prior: &SemanticPrior<T>,
) -> Result<Cuboid3D<T>, MhtError> {
    if foreground.is_empty() {
        return Err(MhtError::EmptyFrustum);
    }
    let x = median(foreground.iter().map(|p| p.x).collect());
    let y = median(foreground.iter().map(|p| p.y).collect());
    let z_min = foreground
        .iter()
        .map(|p| p.z)
        .fold(T::infinity(), |a, b| a.min(b));
    let center = Vec3::new(x, y, z_min + prior.dims.h * T::half());
    Cuboid3D::new(center, prior.dims, prior.orientation.unwrap_or_else(T::zero))
        .map_err(|_| MhtError::NonPositiveDims(prior.dims.cast::<f64>().to_array()))
}

fn step_count(range: f64, step: f64) -> i64 {
    (range / step + 1e-9).floor() as i64
}

/// Integer yaw offsets (in units of `rot_step`) searched for a prior.
fn yaw_offsets(sector_half_width: f64, full_circle: bool, rot_step: f64) -> Vec<i64> {
    if full_circle {
        let count = ((std::f64::consts::TAU / rot_step).round() as i64).max(1);
        let lo = -((count - 1) / 2);
        (lo..lo + count).collect()
    } else {
        let n = step_count(sector_half_width, rot_step);
        (-n..=n).collect()
    }
}

/// Cartesian pose grid around `init`: x, y within `xy_range`, z within
/// `z_range` (both at `trans_step`) and yaw within the prior's sector at
/// `rot_step`. A full-circle prior yields `round(2pi / rot_step)` distinct
/// yaws. The anchor itself is always part of the grid.
pub fn enumerate_hypotheses<T: Real>(
    init: &Cuboid3D<T>,
    prior: &SemanticPrior<T>,
    cfg: &SearchConfig,
) -> Vec<Cuboid3D<T>> {
    let nxy = step_count(cfg.xy_range, cfg.trans_step);
    let nz = step_count(cfg.z_range, cfg.trans_step);
    let step = T::lit(cfg.trans_step);
    let rot = T::lit(cfg.rot_step);

    let mut yaws: Vec<T> = yaw_offsets(
        prior.sector_half_width.as_f64(),
        prior.is_full_circle(),
        cfg.rot_step,
    )
    .into_iter()
    .map(|k| normalize_angle(init.yaw + T::lit(k as f64) * rot))
    .collect();
    let mut seen = Vec::with_capacity(yaws.len());
    yaws.retain(|y| {
        if seen.contains(y) {
            false
        } else {
            seen.push(*y);
            true
        }
    });

    let offset = |k: i64| T::lit(k as f64) * step;
    let mut grid = Vec::with_capacity(yaws.len() * ((2 * nxy + 1).pow(2) * (2 * nz + 1)) as usize);
    for &yaw in &yaws {
        for kz in -nz..=nz {
            for kx in -nxy..=nxy {
                for ky in -nxy..=nxy {
                    let center = Vec3::new(
                        init.center.x + offset(kx),
                        init.center.y + offset(ky),
                        init.center.z + offset(kz),
                    );
                    grid.push(Cuboid3D {
                        center,
                        dims: init.dims,
                        yaw,
                    });
                }
            }
        }
    }
    grid
}

/// Scores one pose against the foreground points and the detection box.
pub fn evaluate<T: Real>(
    c: &Cuboid3D<T>,
    foreground: &[Vec3<T>],
    det_box: &Box2D<T>,
    view: &CameraView<T>,
) -> Hypothesis<T> {
    let coverage = coverage_ratio(foreground, c);
    let proj_iou = project_cuboid_to_box(c, &view.camera_from_lidar, &view.intrinsics)
        .map(|b| iou_2d(&b, det_box))
        .unwrap_or_else(T::zero);
    Hypothesis {
        cuboid: *c,
        coverage,
        proj_iou,
        objective: coverage + proj_iou,
    }
}

/// Total preference order: `Greater` means `a` is the better hypothesis.
///
/// Higher objective, then higher coverage, then yaw closer to the anchor,
/// then lexicographically smaller center, then smaller yaw.
pub fn compare_hypotheses<T: Real>(a: &Hypothesis<T>, b: &Hypothesis<T>, anchor_yaw: T) -> Ordering {
    let cmp = |x: T, y: T| x.partial_cmp(&y).unwrap_or(Ordering::Equal);
    cmp(a.objective, b.objective)
        .then_with(|| cmp(a.coverage, b.coverage))
        .then_with(|| {
            cmp(
                yaw_diff(b.cuboid.yaw, anchor_yaw),
                yaw_diff(a.cuboid.yaw, anchor_yaw),
            )
        })
        .then_with(|| cmp(b.cuboid.center.x, a.cuboid.center.x))
        .then_with(|| cmp(b.cuboid.center.y, a.cuboid.center.y))
        .then_with(|| cmp(b.cuboid.center.z, a.cuboid.center.z))
        .then_with(|| cmp(b.cuboid.yaw, a.cuboid.yaw))
}

/// Argmax of the objective over the grid.
pub fn select_best<T: Real>(
    grid: &[Cuboid3D<T>],
    foreground: &[Vec3<T>],
    det_box: &Box2D<T>,
    view: &CameraView<T>,
    anchor_yaw: T,
) -> Result<Hypothesis<T>, MhtError> {
    grid.par_iter()
        .map(|c| evaluate(c, foreground, det_box, view))
        .reduce_with(|a, b| match compare_hypotheses(&a, &b, anchor_yaw) {
            Ordering::Less => b,
            _ => a,
        })
        .ok_or(MhtError::EmptyGrid)
}

/// Anchor, grid and argmax in one call.
pub fn fit_cuboid<T: Real>(
    foreground: &[Vec3<T>],
    prior: &SemanticPrior<T>,
    det_box: &Box2D<T>,
    view: &CameraView<T>,
    cfg: &SearchConfig,
) -> Result<Hypothesis<T>, MhtError> {
    let init = init_hypothesis(foreground, prior)?;
    let grid = enumerate_hypotheses(&init, prior, cfg);
    select_best(&grid, foreground, det_box, view, init.yaw)
}

/// Points in the cuboid's local frame: `R(-yaw) (p - center)`.
pub fn canonicalize_points<T: Real>(points: &[Vec3<T>], c: &Cuboid3D<T>) -> Vec<Vec3<T>> {
    let frame = CuboidFrame::new(c);
    points.iter().map(|p| frame.to_local(*p)).collect()
}

/// Per-point features `[p ; d - p ; d + p]` with `d = (l, w, h)`, after
/// resampling to exactly `n` points.
///
/// Fewer than `n` points: all are kept and the rest drawn with replacement.
/// More than `n`: a uniform subset without replacement, in input order.
pub fn encode_point_features_n<T: Real>(
    local_points: &[Vec3<T>],
    dims: &Dims<T>,
    n: usize,
    seed: u64,
) -> Result<Vec<[T; 9]>, MhtError> {
    let m = local_points.len();
    if m == 0 {
        return Err(MhtError::EmptyPointSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<usize> = match m.cmp(&n) {
        Ordering::Equal => (0..m).collect(),
        Ordering::Less => (0..m)
            .chain((m..n).map(|_| rng.random_range(0..m)))
            .collect(),
        Ordering::Greater => {
            let mut idx = index::sample(&mut rng, m, n).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    let d = Vec3::new(dims.l, dims.w, dims.h);
    Ok(picked
        .into_iter()
        .map(|i| {
            let p = local_points[i];
            let a = d - p;
            let b = d + p;
            [p.x, p.y, p.z, a.x, a.y, a.z, b.x, b.y, b.z]
        })
        .collect())
}

pub fn encode_point_features<T: Real>(
    local_points: &[Vec3<T>],
    dims: &Dims<T>,
    seed: u64,
) -> Result<Vec<[T; 9]>, MhtError> {
    encode_point_features_n(local_points, dims, REFINER_POINTS, seed)
}

fn check_dims<T: Real>(d: [T; 3]) -> Result<(), MhtError> {
    if d.iter().all(|v| v.is_finite() && *v > T::zero()) {
        Ok(())
    } else {
        Err(MhtError::NonPositiveDims(d.map(|v| v.as_f64())))
    }
}

/// `log(gt / init)` per axis.
pub fn encode_dim_offsets<T: Real>(gt: [T; 3], init: [T; 3]) -> Result<[T; 3], MhtError> {
    check_dims(gt)?;
    check_dims(init)?;
    Ok([
        (gt[0] / init[0]).ln(),
        (gt[1] / init[1]).ln(),
        (gt[2] / init[2]).ln(),
    ])
}

/// `init * exp(offset)` per axis.
pub fn decode_dim_offsets<T: Real>(init: [T; 3], offsets: [T; 3]) -> Result<[T; 3], MhtError> {
    check_dims(init)?;
    let out = [
        init[0] * offsets[0].exp(),
        init[1] * offsets[1].exp(),
        init[2] * offsets[2].exp(),
    ];
    check_dims(out)?;
    Ok(out)
}
