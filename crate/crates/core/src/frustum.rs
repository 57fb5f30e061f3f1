//! Frustum point selection for 2D detections and mask-based foreground
//! flagging.
//!
//! Occluder points that project onto the object's mask are kept: without
//! depth reasoning a fence in front of a car is indistinguishable from the
//! car once both land on the same pixels.

use rayon::prelude::*;
use thiserror::Error;

use crate::geom::{project_point, Box2D, CameraIntrinsics, RigidTransform, Vec2, Vec3};
use crate::ingest::{Calibration, Detection2D, Mask};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrustumError {
    #[error("no calibration for camera `{0}`")]
    UnknownCamera(String),
}

/// Everything needed to map LiDAR points into one camera image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView<T> {
    pub camera_from_lidar: RigidTransform<T>,
    pub intrinsics: CameraIntrinsics<T>,
}

impl<T: Real> CameraView<T> {
    pub fn from_calibration(calib: &Calibration, camera_id: &str) -> Result<Self, FrustumError> {
        let cam = calib
            .camera(camera_id)
            .ok_or_else(|| FrustumError::UnknownCamera(camera_id.to_string()))?;
        let t = calib
            .camera_from_lidar(camera_id)
            .expect("camera present");
        Ok(Self {
            camera_from_lidar: t.cast(),
            intrinsics: cam.intrinsics.cast(),
        })
    }

    /// Pixel of a LiDAR-frame point, when it lies in front of the camera.
    #[inline]
    pub fn pixel(&self, p: Vec3<T>) -> Option<Vec2<T>> {
        project_point(self.camera_from_lidar.apply(p), &self.intrinsics)
    }
}

/// LiDAR points whose projection falls inside a detection box.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumPoints<T> {
    pub detection_ref: usize,
    /// LiDAR frame, in input order.
    pub points: Vec<Vec3<T>>,
    /// Projected pixel of each point.
    pub pixels: Vec<Vec2<T>>,
    pub foreground_flags: Vec<bool>,
}

impl<T: Real> FrustumPoints<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn foreground(&self) -> Vec<Vec3<T>> {
        self.points
            .iter()
            .zip(&self.foreground_flags)
            .filter_map(|(p, f)| f.then_some(*p))
            .collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground_flags.iter().filter(|f| **f).count()
    }
}

/// Selects points with positive camera depth whose pixel lies inside the
/// (edge-inclusive) box. All selected points start flagged as foreground.
pub fn extract_frustum_in_view<T: Real>(
    points: &[Vec3<T>],
    bbox: &Box2D<T>,
    view: &CameraView<T>,
    detection_ref: usize,
) -> FrustumPoints<T> {
    let hits: Vec<(Vec3<T>, Vec2<T>)> = points
        .par_iter()
        .filter_map(|p| {
            view.pixel(*p)
                .filter(|px| bbox.contains(*px))
                .map(|px| (*p, px))
        })
        .collect();
    let (points, pixels): (Vec<_>, Vec<_>) = hits.into_iter().unzip();
    let n = points.len();
    FrustumPoints {
        detection_ref,
        points,
        pixels,
        foreground_flags: vec![true; n],
    }
}

pub fn extract_frustum<T: Real>(
    points: &[Vec3<T>],
    det: &Detection2D,
    detection_ref: usize,
    calib: &Calibration,
) -> Result<FrustumPoints<T>, FrustumError> {
    let view = CameraView::from_calibration(calib, &det.camera_id)?;
    Ok(extract_frustum_in_view(
        points,
        &det.bbox.cast(),
        &view,
        detection_ref,
    ))
}

/// Mask pixel that a projected point looks up: nearest integer (ties away
/// from zero), clipped into the image.
pub fn mask_pixel<T: Real>(px: Vec2<T>, width: u32, height: u32) -> (u32, u32) {
    let clip = |v: T, n: u32| -> u32 {
        let r = v.round().as_f64();
        r.max(0.0).min(n.saturating_sub(1) as f64) as u32
    };
    (clip(px.x, width), clip(px.y, height))
}

/// Flags each frustum point by its mask pixel; with no mask every point is
/// foreground. Points are never removed.
pub fn filter_foreground<T: Real>(mut fp: FrustumPoints<T>, mask: Option<&Mask>) -> FrustumPoints<T> {
    match mask {
        None => fp.foreground_flags.iter_mut().for_each(|f| *f = true),
        Some(m) => {
            for (flag, px) in fp.foreground_flags.iter_mut().zip(&fp.pixels) {
                let (x, y) = mask_pixel(*px, m.width(), m.height());
                *flag = m.get(x, y);
            }
        }
    }
    fp
}
