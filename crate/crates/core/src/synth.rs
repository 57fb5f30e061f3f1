//! Synthetic scenes with known cuboids.
//!
//! Objects are boxes; each sweep samples points uniformly over the faces
//! whose outward normal points at the sensor, adds isotropic Gaussian noise
//! in the world frame and stores the result in the LiDAR frame. Oracle 2D
//! detections are the projected-cuboid boxes of fully visible objects, with
//! masks rasterized from the object's own projected points.
//!
//! All randomness comes from a ChaCha8 stream seeded with `spec.seed`, so a
//! spec always produces the same bytes.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::match_predictions;
use crate::frustum::{mask_pixel, CameraView};
use crate::geom::{
    cuboid_corners, project_point, yaw_diff, Box2D, Cuboid3D, Dims, Mat3, RigidTransform, Vec2, Vec3,
};
use crate::ingest::{
    write_annotations, write_detections, write_ndjson, write_points, CameraRecord, Detection2D,
    IngestError, IntrinsicsRecord, LidarRecord, Mask, PoseRecord, Scene, SceneManifest, ScoredAnnotation,
    SweepEntry, SweepFormat, SweepFrame,
};
use crate::pipeline::{annotate, annotate_with, PipelineConfig, PipelineError};
use crate::prior::{ExpertIndex, ExpertRecord, Face, ImageRegion, PriorSource, SemanticPrior};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Invalid(String),
    #[error("could not place object {0} without overlap")]
    Placement(usize),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class: String,
    /// World frame at the first timestamp.
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    /// BEV velocity, m/s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 2]>,
}

impl ObjectSpec {
    fn cuboid_at(&self, dt: f64) -> Result<Cuboid3D<f64>, SynthError> {
        let [vx, vy] = self.velocity.unwrap_or([0.0, 0.0]);
        let c = Vec3::new(self.center[0] + vx * dt, self.center[1] + vy * dt, self.center[2]);
        let dims = Dims::new(self.dims[0], self.dims[1], self.dims[2])
            .map_err(|e| SynthError::Invalid(format!("object `{}`: {e}", self.class)))?;
        Cuboid3D::new(c, dims, self.yaw).map_err(|e| SynthError::Invalid(e.to_string()))
    }
}

/// Static box that returns points but is never detected, e.g. a wall or
/// fence standing in front of an object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccluderSpec {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    /// Points sampled per sweep.
    pub points: usize,
}

fn default_dilation() -> u32 {
    2
}

fn default_detection_score() -> f64 {
    0.9
}

fn identity_pose() -> PoseRecord {
    PoseRecord::from_transform(&RigidTransform::identity())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    pub cameras: Vec<CameraRecord>,
    /// ego <- lidar
    #[serde(default = "identity_pose")]
    pub lidar: PoseRecord,
    /// Microseconds, strictly increasing.
    pub timestamps: Vec<i64>,
    /// world <- ego, one per timestamp.
    pub ego_poses: Vec<PoseRecord>,
    /// Inclusive range of points sampled per object and sweep.
    pub points_per_object: [usize; 2],
    /// Standard deviation of the per-axis point noise, meters.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub occluders: Vec<OccluderSpec>,
    /// Square dilation radius of oracle masks, pixels.
    #[serde(default = "default_dilation")]
    pub mask_dilation: u32,
    #[serde(default = "default_detection_score")]
    pub detection_score: f64,
}

/// `(sweep, object)` a detection or annotation was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectRef {
    pub sweep: usize,
    pub object: usize,
}

#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub manifest: SceneManifest,
    pub scene: Scene,
    pub detections: Vec<Detection2D>,
    pub detection_truth: Vec<ObjectRef>,
    pub experts: Vec<ExpertRecord>,
    /// World-frame boxes of every object detected in a sweep.
    pub ground_truth: Vec<ScoredAnnotation>,
    pub ground_truth_refs: Vec<ObjectRef>,
    /// World-frame cuboid of each object per sweep.
    pub cuboids: Vec<Vec<Cuboid3D<f64>>>,
    /// Noise-free world-frame samples, `[sweep][object]`.
    pub object_points: Vec<Vec<Vec<Vec3<f64>>>>,
}

pub fn frame_id(sweep: usize) -> String {
    format!("sweep{sweep:04}")
}

fn sweep_path(sweep: usize) -> String {
    format!("sweeps/{sweep:04}.bin")
}

/// Separating-axis overlap test of two BEV rectangles grown by `margin`.
pub fn bev_overlap(a: &Cuboid3D<f64>, b: &Cuboid3D<f64>, margin: f64) -> bool {
    let rect = |c: &Cuboid3D<f64>| crate::geom::bev_rect(c);
    let (ra, rb) = (rect(a), rect(b));
    let axes = [a.yaw, a.yaw + std::f64::consts::FRAC_PI_2, b.yaw, b.yaw + std::f64::consts::FRAC_PI_2];
    axes.iter().all(|&t| {
        let axis = Vec2::new(t.cos(), t.sin());
        let span = |r: &[Vec2<f64>; 4]| {
            r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let d = p.x * axis.x + p.y * axis.y;
                (lo.min(d), hi.max(d))
            })
        };
        let (a0, a1) = span(&ra);
        let (b0, b1) = span(&rb);
        a0 <= b1 + margin && b0 <= a1 + margin
    })
}

struct Rig {
    views: Vec<CameraView<f64>>,
    ego_from_camera: Vec<RigidTransform<f64>>,
    ego_from_lidar: RigidTransform<f64>,
    world_from_ego: Vec<RigidTransform<f64>>,
}

impl Rig {
    fn new(spec: &SceneSpec, manifest: &SceneManifest) -> Result<Self, SynthError> {
        let calib = manifest
            .calibration(Path::new("<spec>"))
            .map_err(|e| SynthError::Invalid(e.to_string()))?;
        let views = calib
            .cameras
            .iter()
            .map(|c| CameraView::from_calibration(&calib, &c.id).expect("camera listed"))
            .collect();
        let world_from_ego = spec
            .ego_poses
            .iter()
            .map(|p| p.to_transform().map_err(|e| SynthError::Invalid(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            views,
            ego_from_camera: calib.cameras.iter().map(|c| c.ego_from_camera).collect(),
            ego_from_lidar: calib.ego_from_lidar,
            world_from_ego,
        })
    }

    fn world_from_lidar(&self, sweep: usize) -> RigidTransform<f64> {
        self.world_from_ego[sweep].compose(&self.ego_from_lidar)
    }
}

/// Image box of a LiDAR-frame cuboid when every corner is in front of the
/// camera and the box lies inside the image.
fn full_view_box(c: &Cuboid3D<f64>, view: &CameraView<f64>) -> Option<Box2D<f64>> {
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for corner in cuboid_corners(c) {
        let px = project_point(view.camera_from_lidar.apply(corner), &view.intrinsics)?;
        b = (b.0.min(px.x), b.1.min(px.y), b.2.max(px.x), b.3.max(px.y));
    }
    let (w, h) = (view.intrinsics.width as f64, view.intrinsics.height as f64);
    let inside = b.0 >= 0.0 && b.1 >= 0.0 && b.2 <= w && b.3 <= h;
    (inside && b.2 - b.0 >= 1.0 && b.3 - b.1 >= 1.0)
        .then(|| Box2D::new(b.0, b.1, b.2, b.3).expect("ordered box"))
}

/// Face index: 0 +x front, 1 -x back, 2 +y left, 3 -y right, 4 +z, 5 -z.
const FACE_NORMALS: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
];

fn face_visible(c: &Cuboid3D<f64>, face: usize, eye: Vec3<f64>) -> bool {
    let r = Mat3::rot_z(c.yaw);
    let n = r.mul_vec(Vec3::from_array(FACE_NORMALS[face]));
    let half = [c.dims.l / 2.0, c.dims.w / 2.0, c.dims.h / 2.0];
    let axis = face / 2;
    let mut local = [0.0; 3];
    local[axis] = FACE_NORMALS[face][axis] * half[axis];
    let center = c.center + r.mul_vec(Vec3::from_array(local));
    n.dot(eye - center) > 0.0
}

// Keeps rotated samples inside the closed box despite rounding.
const INSET: f64 = 1.0 - 1e-12;

/// Uniform samples over the faces of `c` visible from `eye`.
fn sample_surface(c: &Cuboid3D<f64>, eye: Vec3<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3<f64>> {
    let d = [c.dims.l, c.dims.w, c.dims.h];
    let faces: Vec<(usize, f64)> = (0..6)
        .filter(|&f| face_visible(c, f, eye))
        .map(|f| {
            let axis = f / 2;
            (f, d[(axis + 1) % 3] * d[(axis + 2) % 3])
        })
        .collect();
    let total: f64 = faces.iter().map(|f| f.1).sum();
    if faces.is_empty() {
        return Vec::new();
    }
    let r = Mat3::rot_z(c.yaw);
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut face = faces[faces.len() - 1].0;
            for &(f, a) in &faces {
                if pick < a {
                    face = f;
                    break;
                }
                pick -= a;
            }
            let axis = face / 2;
            let mut local = [0.0; 3];
            local[axis] = FACE_NORMALS[face][axis] * d[axis] / 2.0 * INSET;
            for k in [(axis + 1) % 3, (axis + 2) % 3] {
                local[k] = (rng.random::<f64>() - 0.5) * d[k] * INSET;
            }
            c.center + r.mul_vec(Vec3::from_array(local))
        })
        .collect()
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.cameras.is_empty() {
            return bad("no cameras".into());
        }
        if self.timestamps.is_empty() {
            return bad("no timestamps".into());
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return bad("timestamps must strictly increase".into());
        }
        if self.ego_poses.len() != self.timestamps.len() {
            return bad(format!(
                "{} ego poses for {} timestamps",
                self.ego_poses.len(),
                self.timestamps.len()
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        let [lo, hi] = self.points_per_object;
        if lo > hi {
            return bad(format!("points_per_object range [{lo}, {hi}] is empty"));
        }
        if !(0.0..=1.0).contains(&self.detection_score) {
            return bad(format!("detection_score {} outside [0, 1]", self.detection_score));
        }
        for sweep in 0..self.timestamps.len() {
            let dt = self.dt(sweep);
            let boxes = self
                .objects
                .iter()
                .map(|o| o.cuboid_at(dt))
                .collect::<Result<Vec<_>, _>>()?;
            for i in 0..boxes.len() {
                for j in i + 1..boxes.len() {
                    if bev_overlap(&boxes[i], &boxes[j], 0.0) {
                        return bad(format!("objects {i} and {j} overlap in sweep {sweep}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Seconds since the first timestamp.
    fn dt(&self, sweep: usize) -> f64 {
        (self.timestamps[sweep] - self.timestamps[0]) as f64 * 1e-6
    }

    fn manifest(&self) -> SceneManifest {
        SceneManifest {
            cameras: self.cameras.clone(),
            lidar: LidarRecord {
                extrinsics: self.lidar.clone(),
            },
            sweeps: self
                .timestamps
                .iter()
                .zip(&self.ego_poses)
                .enumerate()
                .map(|(i, (&t, p))| SweepEntry {
                    frame_id: Some(frame_id(i)),
                    timestamp: t,
                    ego_pose: p.clone(),
                    path: sweep_path(i),
                })
                .collect(),
        }
    }
}

fn image_region(b: &Box2D<f64>, width: u32) -> ImageRegion {
    let cx = (b.x1 + b.x2) / 2.0;
    let w = width as f64;
    if cx < w / 3.0 {
        ImageRegion::Left
    } else if cx > 2.0 * w / 3.0 {
        ImageRegion::Right
    } else {
        ImageRegion::Center
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<GeneratedScene, SynthError> {
    spec.validate()?;
    let manifest = spec.manifest();
    let rig = Rig::new(spec, &manifest)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| SynthError::Invalid(e.to_string()))?;
    let calib = manifest
        .calibration(Path::new("<spec>"))
        .map_err(|e| SynthError::Invalid(e.to_string()))?;

    let mut out = GeneratedScene {
        manifest: manifest.clone(),
        scene: Scene {
            calibration: calib,
            sweeps: Vec::new(),
        },
        detections: Vec::new(),
        detection_truth: Vec::new(),
        experts: Vec::new(),
        ground_truth: Vec::new(),
        ground_truth_refs: Vec::new(),
        cuboids: Vec::new(),
        object_points: Vec::new(),
    };

    for sweep in 0..spec.timestamps.len() {
        let world_from_lidar = rig.world_from_lidar(sweep);
        let lidar_from_world = world_from_lidar.inverse();
        let eye = world_from_lidar.translation();
        let dt = spec.dt(sweep);
        let cuboids = spec
            .objects
            .iter()
            .map(|o| o.cuboid_at(dt))
            .collect::<Result<Vec<_>, _>>()?;

        let [lo, hi] = spec.points_per_object;
        let clean: Vec<Vec<Vec3<f64>>> = cuboids
            .iter()
            .map(|c| {
                let n = rng.random_range(lo..=hi);
                sample_surface(c, eye, n, &mut rng)
            })
            .collect();
        let mut occluder_points = Vec::new();
        for occ in &spec.occluders {
            let dims = Dims::new(occ.dims[0], occ.dims[1], occ.dims[2])
                .map_err(|e| SynthError::Invalid(format!("occluder: {e}")))?;
            let c = Cuboid3D::new(Vec3::from_array(occ.center), dims, occ.yaw)
                .map_err(|e| SynthError::Invalid(e.to_string()))?;
            occluder_points.extend(sample_surface(&c, eye, occ.points, &mut rng));
        }

        let mut jitter = |p: Vec3<f64>| {
            if spec.noise_sigma > 0.0 {
                p + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                p
            }
        };
        let to_record = |p: Vec3<f64>| {
            let q = lidar_from_world.apply(p);
            [q.x as f32, q.y as f32, q.z as f32, 0.5f32]
        };
        let object_records: Vec<Vec<[f32; 4]>> = clean
            .iter()
            .map(|pts| pts.iter().map(|p| to_record(jitter(*p))).collect())
            .collect();
        let occluder_records: Vec<[f32; 4]> =
            occluder_points.iter().map(|p| to_record(jitter(*p))).collect();

        let fid = frame_id(sweep);
        for (oi, (obj, c_world)) in spec.objects.iter().zip(&cuboids).enumerate() {
            let c_lidar = c_world.transformed(&lidar_from_world);
            let mut detected = false;
            for (ci, view) in rig.views.iter().enumerate() {
                let Some(bbox) = full_view_box(&c_lidar, view) else {
                    continue;
                };
                let (w, h) = (view.intrinsics.width, view.intrinsics.height);
                let mut mask = Mask::filled(w, h, false);
                let r = spec.mask_dilation as i64;
                for p in &object_records[oi] {
                    let q = Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64);
                    let Some(px) = view.pixel(q) else { continue };
                    if px.x < -0.5 || px.y < -0.5 || px.x > w as f64 - 0.5 || px.y > h as f64 - 0.5 {
                        continue;
                    }
                    let (mx, my) = mask_pixel(px, w, h);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (x, y) = (mx as i64 + dx, my as i64 + dy);
                            if x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
                                mask.set(x as u32, y as u32, true);
                            }
                        }
                    }
                }
                let camera_id = spec.cameras[ci].id.clone();
                let cam_pos = rig.world_from_ego[sweep]
                    .compose(&rig.ego_from_camera[ci])
                    .translation();
                let faces: Vec<Face> = [Face::Front, Face::Back, Face::Left, Face::Right]
                    .into_iter()
                    .zip(0..4)
                    .filter(|&(_, f)| face_visible(c_world, f, cam_pos))
                    .map(|(face, _)| face)
                    .collect();
                if !faces.is_empty() {
                    out.experts.push(ExpertRecord {
                        frame_id: fid.clone(),
                        camera_id: camera_id.clone(),
                        bbox: bbox.to_array(),
                        dims: obj.dims,
                        visible_faces: faces,
                        image_region: image_region(&bbox, w),
                    });
                }
                out.detections.push(Detection2D {
                    frame_id: fid.clone(),
                    camera_id,
                    class_label: obj.class.clone(),
                    bbox,
                    score: spec.detection_score,
                    mask: Some(mask),
                });
                out.detection_truth.push(ObjectRef { sweep, object: oi });
                detected = true;
            }
            if detected {
                let mut gt = ScoredAnnotation::new(fid.clone(), obj.class.clone(), *c_world, 1.0);
                gt.track_id = Some(oi as u64);
                gt.velocity = Some(obj.velocity.unwrap_or([0.0, 0.0]));
                out.ground_truth.push(gt);
                out.ground_truth_refs.push(ObjectRef { sweep, object: oi });
            }
        }

        let mut points: Vec<[f32; 4]> = object_records.into_iter().flatten().collect();
        points.extend(occluder_records);
        out.scene.sweeps.push(SweepFrame {
            frame_id: fid,
            timestamp: spec.timestamps[sweep],
            points,
            ego_pose: rig.world_from_ego[sweep],
            sensor_pose: rig.ego_from_lidar,
        });
        out.cuboids.push(cuboids);
        out.object_points.push(clean);
    }
    Ok(out)
}

/// Files written by [`write_scene`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenePaths {
    pub manifest: PathBuf,
    pub detections: PathBuf,
    pub experts: PathBuf,
    pub ground_truth: PathBuf,
}

/// Writes the scene in the ingest formats: `scene.json`, `sweeps/*.bin`,
/// `detections.ndjson`, `experts.ndjson` and `ground_truth.ndjson`.
pub fn write_scene(gen: &GeneratedScene, dir: &Path, format: SweepFormat) -> Result<ScenePaths, SynthError> {
    let sweeps = dir.join("sweeps");
    std::fs::create_dir_all(&sweeps).map_err(|e| IngestError::io(&sweeps, e))?;
    for (i, s) in gen.scene.sweeps.iter().enumerate() {
        write_points(&dir.join(sweep_path(i)), &s.points, format)?;
    }
    let paths = ScenePaths {
        manifest: dir.join("scene.json"),
        detections: dir.join("detections.ndjson"),
        experts: dir.join("experts.ndjson"),
        ground_truth: dir.join("ground_truth.ndjson"),
    };
    gen.manifest.save(&paths.manifest)?;
    write_detections(&gen.detections, &paths.detections)?;
    write_ndjson(&paths.experts, &gen.experts)?;
    write_annotations(&gen.ground_truth, &paths.ground_truth)?;
    Ok(paths)
}

/// Knobs of [`random_scene_spec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomSceneOptions {
    pub objects: [usize; 2],
    /// Empty means every taxonomy class.
    pub classes: Vec<String>,
    pub sweeps: usize,
    pub sweep_interval_us: i64,
    /// Forward ego speed range, m/s.
    pub ego_speed: [f64; 2],
    /// Object distance range from the ego origin, meters.
    pub distance: [f64; 2],
    pub points_per_object: [usize; 2],
    pub noise_sigma: f64,
    pub cameras: usize,
}

impl Default for RandomSceneOptions {
    fn default() -> Self {
        Self {
            objects: [5, 20],
            classes: Vec::new(),
            sweeps: 3,
            sweep_interval_us: 500_000,
            ego_speed: [0.0, 2.0],
            distance: [8.0, 45.0],
            points_per_object: [300, 600],
            noise_sigma: 0.0,
            cameras: 6,
        }
    }
}

/// `n` cameras at equal yaw spacing, each spanning exactly its share of
/// the horizon, 800 x 450 pixels, 1.6 m above the ego origin.
pub fn surround_cameras(n: usize) -> Vec<CameraRecord> {
    let (w, h) = (800u32, 450u32);
    let half_fov = std::f64::consts::PI / n as f64;
    let f = (w as f64 / 2.0) / half_fov.tan();
    // ego <- camera for a camera looking along ego +x
    let forward = Mat3::from_rows([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]);
    (0..n)
        .map(|k| {
            let yaw = k as f64 * std::f64::consts::TAU / n as f64;
            let rot = Mat3::rot_z(yaw).mul_mat(&forward);
            let t = Vec3::new(0.5 * yaw.cos(), 0.5 * yaw.sin(), 1.6);
            CameraRecord {
                id: format!("CAM_{k}"),
                intrinsics: IntrinsicsRecord {
                    fx: f,
                    fy: f,
                    cx: w as f64 / 2.0,
                    cy: h as f64 / 2.0,
                    width: w,
                    height: h,
                },
                extrinsics: PoseRecord::from_transform(&RigidTransform::new(rot, t).expect("rotation")),
                distortion: None,
            }
        })
        .collect()
}

/// Random scene of static class-average boxes on the ground around an ego
/// driving along +x. Objects are kept apart in BEV and in every camera image,
/// and each is fully inside one camera view in every sweep.
pub fn random_scene_spec(seed: u64, tax: &Taxonomy, opts: &RandomSceneOptions) -> Result<SceneSpec, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<String> = if opts.classes.is_empty() {
        tax.names().map(str::to_string).collect()
    } else {
        opts.classes.clone()
    };
    if classes.is_empty() || opts.sweeps == 0 || opts.cameras == 0 {
        return Err(SynthError::Invalid("need classes, sweeps and cameras".into()));
    }
    let speed = rng.random_range(opts.ego_speed[0]..=opts.ego_speed[1]);
    let timestamps: Vec<i64> = (0..opts.sweeps as i64).map(|i| i * opts.sweep_interval_us).collect();
    let ego_poses: Vec<PoseRecord> = timestamps
        .iter()
        .map(|&t| {
            let x = speed * t as f64 * 1e-6;
            PoseRecord::from_transform(&RigidTransform::from_translation(Vec3::new(x, 0.0, 0.0)))
        })
        .collect();
    let mut spec = SceneSpec {
        seed,
        objects: Vec::new(),
        cameras: surround_cameras(opts.cameras),
        lidar: PoseRecord::from_transform(&RigidTransform::from_translation(Vec3::new(0.0, 0.0, 1.8))),
        timestamps,
        ego_poses,
        points_per_object: opts.points_per_object,
        noise_sigma: opts.noise_sigma,
        occluders: Vec::new(),
        mask_dilation: default_dilation(),
        detection_score: default_detection_score(),
    };
    let manifest = spec.manifest();
    let rig = Rig::new(&spec, &manifest)?;
    let lidar_from_world: Vec<RigidTransform<f64>> = (0..opts.sweeps)
        .map(|s| rig.world_from_lidar(s).inverse())
        .collect();

    let n = rng.random_range(opts.objects[0]..=opts.objects[1]);
    let sector = std::f64::consts::TAU / opts.cameras as f64;
    // clipped image boxes per placed object: [sweep][camera]
    let mut placed: Vec<Vec<Vec<Option<Box2D<f64>>>>> = Vec::new();
    let mut cuboids: Vec<Cuboid3D<f64>> = Vec::new();
    for i in 0..n {
        let class = &classes[rng.random_range(0..classes.len())];
        let dims = tax
            .get(class)
            .map_err(|e| SynthError::Invalid(e.to_string()))?
            .avg_dims;
        let mut ok = false;
        for _ in 0..500 {
            let cam = rng.random_range(0..opts.cameras) as f64;
            let bearing = cam * sector + (rng.random::<f64>() - 0.5) * sector * 0.8;
            let r = rng.random_range(opts.distance[0]..=opts.distance[1]);
            let yaw = (rng.random::<f64>() * 2.0 - 1.0) * std::f64::consts::PI;
            let c = Cuboid3D::new(
                Vec3::new(r * bearing.cos(), r * bearing.sin(), dims[2] / 2.0),
                Dims::new(dims[0], dims[1], dims[2]).map_err(|e| SynthError::Invalid(e.to_string()))?,
                yaw,
            )
            .expect("finite");
            if cuboids.iter().any(|o| bev_overlap(o, &c, 0.5)) {
                continue;
            }
            let mut boxes = Vec::with_capacity(opts.sweeps);
            let mut fits = true;
            for (s, lfw) in lidar_from_world.iter().enumerate() {
                let cl = c.transformed(lfw);
                if !rig.views.iter().any(|v| full_view_box(&cl, v).is_some()) {
                    fits = false;
                    break;
                }
                let per_cam: Vec<Option<Box2D<f64>>> = rig
                    .views
                    .iter()
                    .map(|v| {
                        crate::geom::project_cuboid_to_box(&cl, &v.camera_from_lidar, &v.intrinsics)
                            .filter(|b| b.area() > 0.0)
                    })
                    .collect();
                let pad = spec.mask_dilation as f64 + 2.0;
                let clash = placed.iter().any(|other| {
                    other[s].iter().zip(&per_cam).any(|(a, b)| match (a, b) {
                        (Some(a), Some(b)) => {
                            a.x1 - pad <= b.x2 && b.x1 - pad <= a.x2 && a.y1 - pad <= b.y2 && b.y1 - pad <= a.y2
                        }
                        _ => false,
                    })
                });
                if clash {
                    fits = false;
                    break;
                }
                boxes.push(per_cam);
            }
            if !fits {
                continue;
            }
            placed.push(boxes);
            cuboids.push(c);
            spec.objects.push(ObjectSpec {
                class: class.clone(),
                center: c.center.to_array(),
                dims,
                yaw: c.yaw,
                velocity: None,
            });
            ok = true;
            break;
        }
        if !ok {
            return Err(SynthError::Placement(i));
        }
    }
    Ok(spec)
}

/// Where the search prior of a synthetic round trip comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// True dimensions and heading, searched within the routing sector.
    Oracle,
    /// Taxonomy average dimensions over the full circle.
    ClassAverage,
    /// Generated expert records, routed like real ones.
    Expert,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectRecovery {
    pub truth: ObjectRef,
    pub class_label: String,
    /// `None` when no cuboid came out of the object's detections.
    pub center_error: Option<f64>,
    pub yaw_error: Option<f64>,
    /// Largest absolute dimension error.
    pub dim_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRecall {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub objects: Vec<ObjectRecovery>,
    pub predictions: usize,
    pub ground_truth: usize,
    pub thresholds: Vec<ThresholdRecall>,
}

impl RecoveryReport {
    /// Fraction of objects recovered within both tolerances.
    pub fn recovered_fraction(&self, max_center: f64, max_yaw: f64) -> f64 {
        if self.objects.is_empty() {
            return 1.0;
        }
        let ok = self
            .objects
            .iter()
            .filter(|o| {
                matches!((o.center_error, o.yaw_error), (Some(c), Some(y)) if c <= max_center && y <= max_yaw)
            })
            .count();
        ok as f64 / self.objects.len() as f64
    }

    pub fn recall_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| t.threshold == threshold)
            .map(|t| t.recall)
    }
}

/// Generates the scene, annotates it and compares against the truth.
pub fn verify_roundtrip(
    spec: &SceneSpec,
    cfg: &PipelineConfig,
    mode: PriorMode,
) -> Result<RecoveryReport, SynthError> {
    let gen = generate_scene(spec)?;
    let output = match mode {
        PriorMode::Expert => annotate(
            &gen.scene,
            &gen.detections,
            &ExpertIndex::new(gen.experts.iter().cloned()),
            cfg,
        )?,
        PriorMode::ClassAverage => annotate_with(&gen.scene, &gen.detections, cfg, |_, det, _| {
            let d = cfg.taxonomy.get(&det.class_label)?.avg_dims;
            let dims = Dims::new(d[0], d[1], d[2])
                .map_err(|e| crate::prior::PriorError::Invalid(e.to_string()))?;
            Ok(SemanticPrior::unconstrained(dims, PriorSource::ClassAverage))
        })?,
        PriorMode::Oracle => annotate_with(&gen.scene, &gen.detections, cfg, |i, _, _| {
            let t = gen.detection_truth[i];
            let c = &gen.cuboids[t.sweep][t.object];
            let yaw = c.yaw - gen.scene.sweeps[t.sweep].world_from_lidar().yaw();
            SemanticPrior::new(c.dims, Some(yaw), cfg.routing.sector_half_width, PriorSource::PerInstance)
        })?,
    };

    let preds = &output.annotations;
    let objects: Vec<ObjectRecovery> = gen
        .ground_truth_refs
        .par_iter()
        .zip(&gen.ground_truth)
        .map(|(r, gt)| {
            let best = output
                .sources
                .iter()
                .zip(preds)
                .filter(|(s, _)| gen.detection_truth[**s] == *r)
                .map(|(_, p)| p)
                .min_by(|a, b| {
                    let ea = (a.cuboid.center - gt.cuboid.center).norm();
                    let eb = (b.cuboid.center - gt.cuboid.center).norm();
                    ea.total_cmp(&eb)
                });
            ObjectRecovery {
                truth: *r,
                class_label: gt.class_label.clone(),
                center_error: best.map(|p| (p.cuboid.center - gt.cuboid.center).norm()),
                yaw_error: best.map(|p| yaw_diff(p.cuboid.yaw, gt.cuboid.yaw)),
                dim_error: best.map(|p| {
                    let (a, b) = (p.cuboid.dims.to_array(), gt.cuboid.dims.to_array());
                    (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max)
                }),
            }
        })
        .collect();

    let mut classes: Vec<&str> = gen.ground_truth.iter().map(|g| g.class_label.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let thresholds = cfg
        .eval
        .dist_thresholds
        .iter()
        .map(|&thr| {
            let tp: usize = classes
                .iter()
                .map(|c| match_predictions(preds, &gen.ground_truth, c, thr).num_tp())
                .sum();
            let ratio = |n: usize| if n == 0 { 1.0 } else { tp as f64 / n as f64 };
            ThresholdRecall {
                threshold: thr,
                recall: ratio(gen.ground_truth.len()),
                precision: ratio(preds.len()),
            }
        })
        .collect();
    Ok(RecoveryReport {
        objects,
        predictions: preds.len(),
        ground_truth: gen.ground_truth.len(),
        thresholds,
    })
}
