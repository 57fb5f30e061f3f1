//! Loading and persisting sweeps, calibration, 2D detections and output
//! annotations.
//!
//! Units everywhere: meters, radians, integer microseconds.
//!
//! Sweep binaries are little-endian `f32` records of `(x, y, z, intensity)`
//! with an optional fifth field (ring index) that is discarded on read. The
//! stride is chosen by configuration and never guessed from the file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Box2D, CameraIntrinsics, Cuboid3D, Dims, GeomError, RigidTransform, Vec3};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}:{line}: {msg}")]
    Line {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl IngestError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn format(path: &Path, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn line(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        Self::Line {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepFormat {
    /// Four floats per point: x, y, z, intensity.
    #[default]
    Xyzi,
    /// Five floats per point, the fifth being the ring index.
    Nuscenes,
}

impl SweepFormat {
    pub fn stride(self) -> usize {
        match self {
            SweepFormat::Xyzi => 4,
            SweepFormat::Nuscenes => 5,
        }
    }
}

pub fn read_points(path: &Path, format: SweepFormat) -> Result<Vec<[f32; 4]>, IngestError> {
    let bytes = std::fs::read(path).map_err(|e| IngestError::io(path, e))?;
    let stride = format.stride();
    let record = stride * 4;
    if bytes.len() % record != 0 {
        return Err(IngestError::format(
            path,
            format!(
                "byte length {} is not a multiple of the {}-float record size",
                bytes.len(),
                stride
            ),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / record);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        let p = [f(0), f(1), f(2), f(3)];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(IngestError::format(
                path,
                format!("non-finite value in point record {i}"),
            ));
        }
        points.push(p);
    }
    Ok(points)
}

/// Writes points in the given layout; the ring field of the five-float
/// layout is written as zero.
pub fn write_points(path: &Path, points: &[[f32; 4]], format: SweepFormat) -> Result<(), IngestError> {
    let mut bytes = Vec::with_capacity(points.len() * format.stride() * 4);
    for p in points {
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        if format == SweepFormat::Nuscenes {
            bytes.extend_from_slice(&0f32.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| IngestError::io(path, e))
}

/// One timestamped LiDAR sweep with its poses.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepFrame {
    pub frame_id: String,
    /// Microseconds.
    pub timestamp: i64,
    /// `(x, y, z, intensity)` in the LiDAR frame.
    pub points: Vec<[f32; 4]>,
    /// world <- ego
    pub ego_pose: RigidTransform<f64>,
    /// ego <- lidar
    pub sensor_pose: RigidTransform<f64>,
}

impl SweepFrame {
    pub fn world_from_lidar(&self) -> RigidTransform<f64> {
        self.ego_pose.compose(&self.sensor_pose)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    /// Quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn to_transform(&self) -> Result<RigidTransform<f64>, GeomError> {
        RigidTransform::from_quaternion(self.rotation, Vec3::from_array(self.translation))
    }

    pub fn from_transform(t: &RigidTransform<f64>) -> Self {
        Self {
            rotation: t.quaternion(),
            translation: t.translation().to_array(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub id: String,
    pub intrinsics: IntrinsicsRecord,
    /// ego <- camera
    pub extrinsics: PoseRecord,
    /// Accepted for compatibility and ignored: images are assumed rectified.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distortion: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarRecord {
    /// ego <- lidar
    pub extrinsics: PoseRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    /// Defaults to the decimal timestamp when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_id: Option<String>,
    pub timestamp: i64,
    /// world <- ego
    pub ego_pose: PoseRecord,
    /// Relative to the manifest's directory.
    pub path: String,
}

impl SweepEntry {
    pub fn frame_id(&self) -> String {
        self.frame_id
            .clone()
            .unwrap_or_else(|| self.timestamp.to_string())
    }
}

/// The scene manifest document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub cameras: Vec<CameraRecord>,
    pub lidar: LidarRecord,
    pub sweeps: Vec<SweepEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: String,
    pub intrinsics: CameraIntrinsics<f64>,
    pub ego_from_camera: RigidTransform<f64>,
}

/// Static sensor calibration of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub cameras: Vec<Camera>,
    pub ego_from_lidar: RigidTransform<f64>,
}

impl Calibration {
    pub fn camera(&self, id: &str) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    /// camera <- lidar for the named camera.
    pub fn camera_from_lidar(&self, id: &str) -> Option<RigidTransform<f64>> {
        self.camera(id)
            .map(|c| c.ego_from_camera.inverse().compose(&self.ego_from_lidar))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub calibration: Calibration,
    pub sweeps: Vec<SweepFrame>,
}

impl Scene {
    pub fn frame_index(&self, frame_id: &str) -> Option<usize> {
        self.sweeps.iter().position(|s| s.frame_id == frame_id)
    }
}

impl SceneManifest {
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| IngestError::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| IngestError::io(path, e))
    }

    pub fn calibration(&self, path: &Path) -> Result<Calibration, IngestError> {
        let geom = |e: GeomError| IngestError::format(path, e.to_string());
        let mut cameras = Vec::with_capacity(self.cameras.len());
        for c in &self.cameras {
            if cameras.iter().any(|k: &Camera| k.id == c.id) {
                return Err(IngestError::format(path, format!("duplicate camera `{}`", c.id)));
            }
            let i = &c.intrinsics;
            cameras.push(Camera {
                id: c.id.clone(),
                intrinsics: CameraIntrinsics::new(i.fx, i.fy, i.cx, i.cy, i.width, i.height)
                    .map_err(geom)?,
                ego_from_camera: c.extrinsics.to_transform().map_err(geom)?,
            });
        }
        Ok(Calibration {
            cameras,
            ego_from_lidar: self.lidar.extrinsics.to_transform().map_err(geom)?,
        })
    }
}

/// Loads one sweep binary, attaching pose metadata from its manifest entry.
pub fn load_sweep(
    path: &Path,
    format: SweepFormat,
    entry: &SweepEntry,
    sensor_pose: RigidTransform<f64>,
) -> Result<SweepFrame, IngestError> {
    let ego_pose = entry
        .ego_pose
        .to_transform()
        .map_err(|e| IngestError::format(path, e.to_string()))?;
    Ok(SweepFrame {
        frame_id: entry.frame_id(),
        timestamp: entry.timestamp,
        points: read_points(path, format)?,
        ego_pose,
        sensor_pose,
    })
}

/// Loads a manifest and every sweep it lists.
pub fn load_scene(manifest_path: &Path, format: SweepFormat) -> Result<Scene, IngestError> {
    let manifest = SceneManifest::load(manifest_path)?;
    let calibration = manifest.calibration(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut sweeps: Vec<SweepFrame> = Vec::with_capacity(manifest.sweeps.len());
    for entry in &manifest.sweeps {
        if let Some(prev) = sweeps.last() {
            if entry.timestamp <= prev.timestamp {
                return Err(IngestError::format(
                    manifest_path,
                    format!(
                        "sweep timestamps must strictly increase ({} after {})",
                        entry.timestamp, prev.timestamp
                    ),
                ));
            }
        }
        let sweep = load_sweep(&base.join(&entry.path), format, entry, calibration.ego_from_lidar)?;
        if sweeps.iter().any(|s| s.frame_id == sweep.frame_id) {
            return Err(IngestError::format(
                manifest_path,
                format!("duplicate frame id `{}`", sweep.frame_id),
            ));
        }
        sweeps.push(sweep);
    }
    Ok(Scene {
        calibration,
        sweeps,
    })
}

/// Binary foreground bitmap in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

/// Run-length encoding of a [`Mask`]: alternating run lengths over the
/// row-major pixel order, starting with a (possibly empty) run of zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRle {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u64>,
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == width as usize * height as usize).then_some(Self {
            width,
            height,
            bits,
        })
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_rle(&self) -> MaskRle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        MaskRle {
            width: self.width,
            height: self.height,
            counts,
        }
    }

    pub fn from_rle(rle: &MaskRle) -> Result<Self, String> {
        let total = rle.width as u64 * rle.height as u64;
        let sum: u64 = rle.counts.iter().sum();
        if sum != total {
            return Err(format!(
                "mask run lengths sum to {sum}, expected {total} ({}x{})",
                rle.width, rle.height
            ));
        }
        let mut bits = Vec::with_capacity(total as usize);
        for (i, &n) in rle.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, n as usize));
        }
        Ok(Self {
            width: rle.width,
            height: rle.height,
            bits,
        })
    }
}

/// A 2D detection from an external detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D {
    pub frame_id: String,
    pub camera_id: String,
    pub class_label: String,
    pub bbox: Box2D<f64>,
    pub score: f64,
    pub mask: Option<Mask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame_id: String,
    pub camera_id: String,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<MaskRle>,
}

impl Detection2D {
    pub fn from_record(rec: DetectionRecord, tax: &Taxonomy) -> Result<Self, String> {
        if !tax.contains(&rec.class) {
            return Err(format!("unknown class `{}`", rec.class));
        }
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(format!("score {} outside [0, 1]", rec.score));
        }
        let [x1, y1, x2, y2] = rec.bbox;
        let bbox = Box2D::new(x1, y1, x2, y2).map_err(|e| e.to_string())?;
        let mask = rec.mask_rle.as_ref().map(Mask::from_rle).transpose()?;
        Ok(Self {
            frame_id: rec.frame_id,
            camera_id: rec.camera_id,
            class_label: rec.class,
            bbox,
            score: rec.score,
            mask,
        })
    }

    pub fn to_record(&self) -> DetectionRecord {
        DetectionRecord {
            frame_id: self.frame_id.clone(),
            camera_id: self.camera_id.clone(),
            class: self.class_label.clone(),
            bbox: self.bbox.to_array(),
            score: self.score,
            mask_rle: self.mask.as_ref().map(Mask::to_rle),
        }
    }

    /// Checks that an attached mask covers exactly the camera image.
    pub fn check_mask_dims(&self, intr: &CameraIntrinsics<f64>) -> Result<(), String> {
        match &self.mask {
            Some(m) if m.width() != intr.width || m.height() != intr.height => Err(format!(
                "mask is {}x{} but camera `{}` images are {}x{}",
                m.width(),
                m.height(),
                self.camera_id,
                intr.width,
                intr.height
            )),
            _ => Ok(()),
        }
    }
}

/// Reads newline-delimited JSON, handing each non-blank line to `parse`.
pub(crate) fn read_ndjson<T>(
    path: &Path,
    mut parse: impl FnMut(&str) -> Result<T, String>,
) -> Result<Vec<T>, IngestError> {
    let file = File::open(path).map_err(|e| IngestError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IngestError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|msg| IngestError::line(path, i + 1, msg))?);
    }
    Ok(out)
}

pub(crate) fn write_ndjson<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), IngestError> {
    let file = File::create(path).map_err(|e| IngestError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| IngestError::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| IngestError::io(path, e))?;
    }
    w.flush().map_err(|e| IngestError::io(path, e))
}

pub fn load_detections(path: &Path, tax: &Taxonomy) -> Result<Vec<Detection2D>, IngestError> {
    read_ndjson(path, |line| {
        let rec: DetectionRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        Detection2D::from_record(rec, tax)
    })
}

pub fn write_detections(items: &[Detection2D], path: &Path) -> Result<(), IngestError> {
    write_ndjson(path, items.iter().map(Detection2D::to_record))
}

/// A final cuboid in the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredAnnotation {
    pub frame_id: String,
    pub cuboid: Cuboid3D<f64>,
    pub class_label: String,
    pub score: f64,
    pub track_id: Option<u64>,
    /// BEV velocity, m/s.
    pub velocity: Option<[f64; 2]>,
    /// Detector confidence the score was fused from, when known.
    pub score_2d: Option<f64>,
    /// Geometric confidence the score was fused from, when known.
    pub score_3d: Option<f64>,
}

impl ScoredAnnotation {
    pub fn new(frame_id: impl Into<String>, class_label: impl Into<String>, cuboid: Cuboid3D<f64>, score: f64) -> Self {
        Self {
            frame_id: frame_id.into(),
            cuboid,
            class_label: class_label.into(),
            score,
            track_id: None,
            velocity: None,
            score_2d: None,
            score_3d: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub frame_id: String,
    pub class: String,
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_2d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_3d: Option<f64>,
}

impl From<&ScoredAnnotation> for AnnotationRecord {
    fn from(a: &ScoredAnnotation) -> Self {
        Self {
            frame_id: a.frame_id.clone(),
            class: a.class_label.clone(),
            center: a.cuboid.center.to_array(),
            dims: a.cuboid.dims.to_array(),
            yaw: a.cuboid.yaw,
            score: a.score,
            track_id: a.track_id,
            velocity: a.velocity,
            score_2d: a.score_2d,
            score_3d: a.score_3d,
        }
    }
}

impl TryFrom<AnnotationRecord> for ScoredAnnotation {
    type Error = String;
    fn try_from(r: AnnotationRecord) -> Result<Self, String> {
        let unit = |name: &str, v: Option<f64>| match v {
            Some(s) if !(0.0..=1.0).contains(&s) => Err(format!("{name} {s} outside [0, 1]")),
            _ => Ok(()),
        };
        unit("score", Some(r.score))?;
        unit("score_2d", r.score_2d)?;
        unit("score_3d", r.score_3d)?;
        if let Some(v) = r.velocity {
            if v.iter().any(|x| !x.is_finite()) {
                return Err("non-finite velocity".into());
            }
        }
        let dims = Dims::new(r.dims[0], r.dims[1], r.dims[2]).map_err(|e| e.to_string())?;
        let cuboid = Cuboid3D::new(Vec3::from_array(r.center), dims, r.yaw).map_err(|e| e.to_string())?;
        Ok(Self {
            frame_id: r.frame_id,
            cuboid,
            class_label: r.class,
            score: r.score,
            track_id: r.track_id,
            velocity: r.velocity,
            score_2d: r.score_2d,
            score_3d: r.score_3d,
        })
    }
}

pub fn write_annotations(items: &[ScoredAnnotation], path: &Path) -> Result<(), IngestError> {
    write_ndjson(path, items.iter().map(AnnotationRecord::from))
}

pub fn load_annotations(path: &Path) -> Result<Vec<ScoredAnnotation>, IngestError> {
    read_ndjson(path, |line| {
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        ScoredAnnotation::try_from(rec)
    })
}
