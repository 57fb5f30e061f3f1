//! Per-detection size and orientation priors.
//!
//! A prior comes either from an external "expert" record (per-instance
//! dimensions plus the object faces visible in the image, produced offline
//! by a vision-language model) or from the class-average size in the
//! taxonomy. Confident detections with an expert record get a narrow yaw
//! sector around the derived heading; everything else is searched over the
//! full circle.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{normalize_angle, Dims, RigidTransform, Vec3};
use crate::ingest::{read_ndjson, Detection2D, IngestError};
use crate::scalar::Real;
use crate::taxonomy::{Taxonomy, TaxonomyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("expert record lists no visible faces")]
    NoVisibleFaces,
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("invalid prior: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSource {
    PerInstance,
    ClassAverage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticPrior<T> {
    pub dims: Dims<T>,
    /// Yaw in the current LiDAR frame.
    pub orientation: Option<T>,
    /// Half-width of the yaw search sector, in `(0, pi]`.
    pub sector_half_width: T,
    pub source: PriorSource,
}

impl<T: Real> SemanticPrior<T> {
    pub fn new(
        dims: Dims<T>,
        orientation: Option<T>,
        sector_half_width: T,
        source: PriorSource,
    ) -> Result<Self, PriorError> {
        if !(sector_half_width > T::zero() && sector_half_width <= T::PI()) {
            return Err(PriorError::Invalid(format!(
                "sector half-width {:?} outside (0, pi]",
                sector_half_width
            )));
        }
        Ok(Self {
            dims,
            orientation: orientation.map(normalize_angle),
            sector_half_width,
            source,
        })
    }

    /// Full-circle search with no preferred heading.
    pub fn unconstrained(dims: Dims<T>, source: PriorSource) -> Self {
        Self {
            dims,
            orientation: None,
            sector_half_width: T::PI(),
            source,
        }
    }

    pub fn is_full_circle(&self) -> bool {
        self.sector_half_width >= T::PI()
    }

    pub fn cast<U: Real>(&self) -> SemanticPrior<U> {
        SemanticPrior {
            dims: self.dims.cast(),
            orientation: self.orientation.map(|o| U::lit(o.as_f64())),
            sector_half_width: if self.is_full_circle() {
                U::PI()
            } else {
                U::lit(self.sector_half_width.as_f64())
            },
            source: self.source,
        }
    }
}

/// Visible object face, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Face {
    Front,
    Back,
    Left,
    Right,
}

impl Face {
    /// Object heading relative to the camera's optical-axis azimuth when
    /// this face is the one seen.
    pub fn relative_heading(self) -> f64 {
        use std::f64::consts::{FRAC_PI_2, PI};
        match self {
            Face::Back => 0.0,
            Face::Front => PI,
            Face::Left => FRAC_PI_2,
            Face::Right => -FRAC_PI_2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageRegion {
    Left,
    Center,
    Right,
}

/// One line of the expert sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertRecord {
    pub frame_id: String,
    pub camera_id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub dims: [f64; 3],
    pub visible_faces: Vec<Face>,
    pub image_region: ImageRegion,
}

impl ExpertRecord {
    fn validate(&self) -> Result<(), String> {
        if self.visible_faces.is_empty() {
            return Err("expert record lists no visible faces".into());
        }
        Dims::new(self.dims[0], self.dims[1], self.dims[2]).map_err(|e| e.to_string())?;
        if self.bbox.iter().any(|v| !v.is_finite()) {
            return Err("non-finite box".into());
        }
        Ok(())
    }

    pub fn key(&self) -> ExpertKey {
        ExpertKey::new(&self.frame_id, &self.camera_id, self.bbox)
    }
}

/// Join key between detections and expert records: box coordinates are
/// compared at 0.1 px resolution.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExpertKey {
    frame_id: String,
    camera_id: String,
    bbox: [i64; 4],
}

impl ExpertKey {
    pub fn new(frame_id: &str, camera_id: &str, bbox: [f64; 4]) -> Self {
        Self {
            frame_id: frame_id.to_string(),
            camera_id: camera_id.to_string(),
            bbox: bbox.map(|v| (v * 10.0).round() as i64),
        }
    }

    pub fn for_detection(det: &Detection2D) -> Self {
        Self::new(&det.frame_id, &det.camera_id, det.bbox.to_array())
    }
}

/// Read-only lookup of expert records by detection.
#[derive(Debug, Clone, Default)]
pub struct ExpertIndex {
    records: HashMap<ExpertKey, ExpertRecord>,
}

impl ExpertIndex {
    /// Later records with the same key replace earlier ones.
    pub fn new(records: impl IntoIterator<Item = ExpertRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.key(), r)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let records = read_ndjson(path, |line| {
            let rec: ExpertRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            rec.validate()?;
            Ok(rec)
        })?;
        Ok(Self::new(records))
    }

    pub fn lookup(&self, det: &Detection2D) -> Option<&ExpertRecord> {
        self.records.get(&ExpertKey::for_detection(det))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Yaw (LiDAR frame) implied by the faces an expert saw.
///
/// Each face maps to a heading relative to the azimuth of the camera's
/// optical axis; several faces are combined by circular mean. When the
/// headings cancel exactly, the first face in canonical order wins.
pub fn derive_orientation(
    rec: &ExpertRecord,
    ego_from_camera: &RigidTransform<f64>,
    ego_from_lidar: &RigidTransform<f64>,
) -> Result<f64, PriorError> {
    let mut faces = rec.visible_faces.clone();
    faces.sort();
    faces.dedup();
    let first = *faces.first().ok_or(PriorError::NoVisibleFaces)?;

    let lidar_from_camera = ego_from_lidar.inverse().compose(ego_from_camera);
    let axis = lidar_from_camera.apply_vector(Vec3::new(0.0, 0.0, 1.0));
    let azimuth = axis.y.atan2(axis.x);

    let (s, c) = faces.iter().fold((0.0, 0.0), |(s, c), f| {
        let (fs, fc) = f.relative_heading().sin_cos();
        (s + fs, c + fc)
    });
    let relative = if s.hypot(c) < 1e-9 {
        first.relative_heading()
    } else {
        s.atan2(c)
    };
    Ok(normalize_angle(azimuth + relative))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    /// Minimum detection score for using an expert record.
    pub threshold: f64,
    /// Yaw half-width searched around an expert-derived heading.
    pub sector_half_width: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            sector_half_width: std::f64::consts::PI / 6.0,
        }
    }
}

/// Chooses between an expert prior and the class-average fallback.
pub fn route(
    det: &Detection2D,
    expert: Option<&ExpertRecord>,
    tax: &Taxonomy,
    ego_from_camera: &RigidTransform<f64>,
    ego_from_lidar: &RigidTransform<f64>,
    cfg: &RoutingConfig,
) -> Result<SemanticPrior<f64>, PriorError> {
    let class = tax.get(&det.class_label)?;
    match expert {
        Some(rec) if det.score >= cfg.threshold => {
            let dims = Dims::new(rec.dims[0], rec.dims[1], rec.dims[2])
                .map_err(|e| PriorError::Invalid(e.to_string()))?;
            let yaw = derive_orientation(rec, ego_from_camera, ego_from_lidar)?;
            SemanticPrior::new(dims, Some(yaw), cfg.sector_half_width, PriorSource::PerInstance)
        }
        _ => {
            let [l, w, h] = class.avg_dims;
            let dims = Dims::new(l, w, h).map_err(|e| PriorError::Invalid(e.to_string()))?;
            Ok(SemanticPrior::unconstrained(dims, PriorSource::ClassAverage))
        }
    }
}
