//! Module invariants as seeded property checks.
//!
//! Each check returns `Err` with the shrunk counterexample on failure so the
//! same functions back both the per-module test target and the acceptance
//! harness.

use std::f64::consts::{PI, TAU};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use autolift::aggregate::{aggregate_sweeps, compensation, AggregationStrategy};
use autolift::eval::{
    adapted_nds, average_precision, evaluate, interpolated_precision, match_predictions, nds, EvalConfig,
};
use autolift::frustum::{extract_frustum_in_view, filter_foreground, CameraView};
use autolift::geom::{
    cuboid_corners, iou_2d, normalize_angle, point_in_cuboid, project_cuboid_to_box, yaw_diff, Box2D,
    CameraIntrinsics, Cuboid3D, Dims, Mat3, RigidTransform, Vec3,
};
use autolift::ingest::{
    load_annotations, load_detections, load_scene, read_points, write_annotations, write_detections,
    write_points, Detection2D, Mask, SceneManifest, ScoredAnnotation, SweepFormat, SweepFrame,
};
use autolift::mht::{enumerate_hypotheses, fit_cuboid, init_hypothesis, select_best, SearchConfig};
use autolift::pipeline::with_threads;
use autolift::prior::{derive_orientation, route, ExpertIndex, ExpertRecord, Face, ImageRegion, PriorSource, RoutingConfig, SemanticPrior};
use autolift::refine::{associate, refine_scores};
use autolift::score::{fuse_score, occupancy_rate};
use autolift::synth::{generate_scene, random_scene_spec, write_scene, RandomSceneOptions};
use autolift::taxonomy::Taxonomy;

use super::{camera_pose, cuboid};

pub type Check = fn() -> Result<(), String>;

pub fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut cfg = Config::with_cases(cases);
    cfg.failure_persistence = None;
    let mut runner = TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

pub fn cuboid_strategy() -> impl Strategy<Value = Cuboid3D<f64>> {
    (
        -20.0..20.0f64,
        -20.0..20.0f64,
        -3.0..3.0f64,
        0.2..8.0f64,
        0.2..4.0f64,
        0.2..4.0f64,
        -PI..PI,
    )
        .prop_map(|(x, y, z, l, w, h, yaw)| cuboid([x, y, z], [l, w, h], yaw))
}

pub fn yaw_transform_strategy() -> impl Strategy<Value = RigidTransform<f64>> {
    (-PI..PI, -50.0..50.0f64, -50.0..50.0f64, -5.0..5.0f64)
        .prop_map(|(yaw, x, y, z)| RigidTransform::from_yaw(yaw, Vec3::new(x, y, z)))
}

/// Points scattered over the cuboid's neighborhood so that roughly half
/// land inside.
pub fn points_near(c: &Cuboid3D<f64>, n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec3<f64>>> {
    let c = *c;
    prop::collection::vec((-0.8..0.8f64, -0.8..0.8f64, -0.8..0.8f64), n).prop_map(move |v| {
        let t = RigidTransform::from_yaw(c.yaw, c.center);
        v.into_iter()
            .map(|(a, b, h)| t.apply(Vec3::new(a * c.dims.l, b * c.dims.w, h * c.dims.h)))
            .collect()
    })
}

pub fn cuboid_with_points(n: std::ops::Range<usize>) -> impl Strategy<Value = (Cuboid3D<f64>, Vec<Vec3<f64>>)> {
    cuboid_strategy().prop_flat_map(move |c| (Just(c), points_near(&c, n.clone())))
}

/// Camera at the LiDAR origin looking along LiDAR +x.
pub fn forward_view() -> CameraView<f64> {
    let camera_from_lidar = camera_pose(0.0, [0.0, 0.0, 0.0]).inverse();
    CameraView {
        camera_from_lidar,
        intrinsics: CameraIntrinsics::new(700.0, 700.0, 400.0, 225.0, 800, 450).unwrap(),
    }
}

pub fn box_strategy() -> impl Strategy<Value = Box2D<f64>> {
    (0.0..800.0f64, 0.0..450.0f64, 0.0..400.0f64, 0.0..225.0f64)
        .prop_map(|(x, y, w, h)| Box2D::new(x, y, x + w, y + h).unwrap())
}

fn frontal_points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec3<f64>>> {
    prop::collection::vec((0.5..30.0f64, -15.0..15.0f64, -4.0..4.0f64), n)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
}

fn is_subsequence(small: &[Vec3<f64>], big: &[Vec3<f64>]) -> bool {
    let mut it = big.iter();
    small.iter().all(|p| it.any(|q| q == p))
}

// ---- geom ----

pub fn geom_rigid_invariance() -> Result<(), String> {
    let s = (cuboid_strategy(), yaw_transform_strategy()).prop_flat_map(|(c, t)| {
        (Just(c), Just(t), points_near(&c, 1..4))
    });
    run(1500, s, |(c, t, pts)| {
        let moved = c.transformed(&t);
        for p in pts {
            prop_assert_eq!(point_in_cuboid(p, &c), point_in_cuboid(t.apply(p), &moved));
        }
        Ok(())
    })
}

pub fn geom_iou_symmetric_bounded() -> Result<(), String> {
    let b = (-50.0..50.0f64, -50.0..50.0f64, 0.0..40.0f64, 0.0..40.0f64)
        .prop_map(|(x, y, w, h)| Box2D::new(x, y, x + w, y + h).unwrap());
    run(2000, (b.clone(), b), |(a, b)| {
        let ab = iou_2d(&a, &b);
        prop_assert_eq!(ab, iou_2d(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        Ok(())
    })
}

pub fn geom_projection_shrinks_with_distance() -> Result<(), String> {
    let intr = CameraIntrinsics::new(500.0, 500.0, 1000.0, 1000.0, 2000, 2000).unwrap();
    let s = (0.2..3.0f64, 0.2..3.0f64, 0.2..3.0f64, -PI..PI, 0.0..40.0f64, 0.05..20.0f64);
    run(1000, s, |(l, w, h, yaw, d, delta)| {
        // camera frame as sensor frame: cuboid z runs along the optical axis
        let near = 5.0 + h + d;
        let area = |z: f64| {
            let c = cuboid([0.0, 0.0, z], [l, w, h], yaw);
            project_cuboid_to_box(&c, &RigidTransform::identity(), &intr)
                .unwrap()
                .area()
        };
        prop_assert!(area(near + delta) < area(near));
        Ok(())
    })
}

pub fn geom_corner_roundtrip() -> Result<(), String> {
    let s = (
        -50.0..50.0f64,
        -50.0..50.0f64,
        -5.0..5.0f64,
        0.1..12.0f64,
        0.1..4.0f64,
        0.1..4.0f64,
        0.0..PI,
    );
    run(2000, s, |(x, y, z, l, w, h, yaw)| {
        let k = cuboid_corners(&cuboid([x, y, z], [l, w, h], yaw));
        let sum = k.iter().fold(Vec3::zeros(), |a, b| a + *b);
        let center = sum * 0.125;
        // corner 0 is front-left-bottom, 3 rear-left-bottom, 1 front-right-bottom
        let along = k[0] - k[3];
        let across = k[0] - k[1];
        let l2 = along.norm();
        let w2 = across.norm();
        let h2 = k[4].z - k[0].z;
        let yaw2 = along.y.atan2(along.x).rem_euclid(PI);
        for (a, b) in [(center.x, x), (center.y, y), (center.z, z), (l2, l), (w2, w), (h2, h)] {
            prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
        // heading is only defined modulo pi by the corner set
        let dy = (yaw2 - yaw).rem_euclid(PI);
        prop_assert!(dy.min(PI - dy) <= 1e-6);
        Ok(())
    })
}

// ---- ingest ----

pub fn ingest_rejects_non_finite() -> Result<(), String> {
    let s = (
        prop::collection::vec(prop::array::uniform4(-100.0..100.0f32), 1..20),
        any::<prop::sample::Index>(),
        0..4usize,
        prop::sample::select(vec![f32::NAN, f32::INFINITY, f32::NEG_INFINITY]),
        prop::bool::ANY,
    );
    run(64, s, |(mut pts, at, k, bad, nus)| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let i = at.index(pts.len());
        pts[i][k] = bad;
        let fmt = if nus { SweepFormat::Nuscenes } else { SweepFormat::Xyzi };
        write_points(&path, &pts, fmt).unwrap();
        let err = read_points(&path, fmt).unwrap_err().to_string();
        prop_assert!(err.contains("non-finite") && err.contains(&format!("record {i}")), "{}", err);
        Ok(())
    })?;

    // JSON cannot spell NaN; an overflowing literal is the way in
    let tax = Taxonomy::default();
    let dir = tempfile::tempdir().unwrap();
    let det = dir.path().join("d.ndjson");
    std::fs::write(
        &det,
        "{\"frame_id\":\"a\",\"camera_id\":\"c\",\"class\":\"car\",\"box\":[1,2,1e999,4],\"score\":0.5}\n",
    )
    .unwrap();
    let err = load_detections(&det, &tax).unwrap_err().to_string();
    if !err.contains(":1:") {
        return Err(format!("detection error lacks line number: {err}"));
    }
    let ann = dir.path().join("a.ndjson");
    std::fs::write(
        &ann,
        "{\"frame_id\":\"a\",\"class\":\"car\",\"center\":[1,2,-1e400],\"dims\":[1,1,1],\"yaw\":0,\"score\":0.5}\n",
    )
    .unwrap();
    load_annotations(&ann).err().ok_or("annotation with infinite center accepted")?;
    let exp = dir.path().join("e.ndjson");
    std::fs::write(
        &exp,
        "{\"frame_id\":\"a\",\"camera_id\":\"c\",\"box\":[1,2,3,4],\"dims\":[1e999,1,1],\"visible_faces\":[\"back\"],\"image_region\":\"left\"}\n",
    )
    .unwrap();
    ExpertIndex::load(&exp).err().ok_or("expert with infinite dims accepted")?;
    let man = dir.path().join("m.json");
    std::fs::write(
        &man,
        r#"{"cameras":[],"lidar":{"extrinsics":{"rotation":[1,0,0,0],"translation":[0,0,1e999]}},"sweeps":[]}"#,
    )
    .unwrap();
    SceneManifest::load(&man).err().ok_or("manifest with infinite translation accepted")?;
    Ok(())
}

fn annotation_strategy() -> impl Strategy<Value = ScoredAnnotation> {
    (
        cuboid_strategy(),
        0.0..=1.0f64,
        prop::option::of(any::<u64>()),
        prop::option::of((-30.0..30.0f64, -30.0..30.0f64)),
        prop::option::of(0.0..=1.0f64),
        prop::option::of(0.0..=1.0f64),
        prop::sample::select(vec!["car", "adult", "traffic-cone"]),
        "[a-z0-9_]{1,12}",
    )
        .prop_map(|(c, score, track, vel, s2, s3, class, frame)| {
            let mut a = ScoredAnnotation::new(frame, class, c, score);
            a.track_id = track;
            a.velocity = vel.map(|(x, y)| [x, y]);
            a.score_2d = s2;
            a.score_3d = s3;
            a
        })
}

fn detection_strategy() -> impl Strategy<Value = Detection2D> {
    (
        box_strategy(),
        0.0..=1.0f64,
        prop::option::of((1u32..40, 1u32..30).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(prop::bool::ANY, (w * h) as usize))
        })),
        prop::sample::select(vec!["car", "bus", "adult"]),
        "[a-z0-9]{1,8}",
        "CAM_[0-9]",
    )
        .prop_map(|(bbox, score, mask, class, frame, cam)| Detection2D {
            frame_id: frame,
            camera_id: cam,
            class_label: class.into(),
            bbox,
            score,
            mask: mask.map(|(w, h, bits)| Mask::new(w, h, bits).unwrap()),
        })
}

pub fn ingest_roundtrip_identity() -> Result<(), String> {
    let pts = prop::collection::vec(prop::array::uniform4(-1e4..1e4f32), 0..50);
    run(64, (pts, prop::bool::ANY), |(pts, nus)| {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        let fmt = if nus { SweepFormat::Nuscenes } else { SweepFormat::Xyzi };
        write_points(&p, &pts, fmt).unwrap();
        prop_assert_eq!(read_points(&p, fmt).unwrap(), pts);
        Ok(())
    })?;
    let anns = prop::collection::vec(annotation_strategy(), 0..8);
    run(128, anns, |anns| {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ndjson");
        write_annotations(&anns, &p).unwrap();
        prop_assert_eq!(load_annotations(&p).unwrap(), anns);
        Ok(())
    })?;
    let tax = Taxonomy::default();
    run(128, prop::collection::vec(detection_strategy(), 0..6), |dets| {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ndjson");
        write_detections(&dets, &p).unwrap();
        prop_assert_eq!(load_detections(&p, &tax).unwrap(), dets);
        Ok(())
    })?;
    let faces = prop::sample::subsequence(vec![Face::Front, Face::Back, Face::Left, Face::Right], 1..=4);
    let expert = (box_strategy(), prop::array::uniform3(0.1..15.0f64), faces, 0..3usize).prop_map(
        |(b, dims, visible_faces, r)| ExpertRecord {
            frame_id: "f".into(),
            camera_id: "CAM_0".into(),
            bbox: b.to_array(),
            dims,
            visible_faces,
            image_region: [ImageRegion::Left, ImageRegion::Center, ImageRegion::Right][r],
        },
    );
    run(128, expert, |rec| {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ndjson");
        std::fs::write(&p, serde_json::to_string(&rec).unwrap() + "\n").unwrap();
        let idx = ExpertIndex::load(&p).unwrap();
        let det = Detection2D {
            frame_id: rec.frame_id.clone(),
            camera_id: rec.camera_id.clone(),
            class_label: "car".into(),
            bbox: Box2D::new(rec.bbox[0], rec.bbox[1], rec.bbox[2], rec.bbox[3]).unwrap(),
            score: 1.0,
            mask: None,
        };
        prop_assert_eq!(idx.lookup(&det), Some(&rec));
        Ok(())
    })?;
    // manifest and sweeps through the scene loader
    let tax = Taxonomy::default();
    let opts = RandomSceneOptions {
        objects: [1, 3],
        points_per_object: [20, 40],
        sweeps: 2,
        ..Default::default()
    };
    run(8, (any::<u64>(), prop::bool::ANY), |(seed, nus)| {
        let gen = generate_scene(&random_scene_spec(seed, &tax, &opts).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let fmt = if nus { SweepFormat::Nuscenes } else { SweepFormat::Xyzi };
        let paths = write_scene(&gen, dir.path(), fmt).unwrap();
        prop_assert_eq!(&SceneManifest::load(&paths.manifest).unwrap(), &gen.manifest);
        prop_assert_eq!(&load_scene(&paths.manifest, fmt).unwrap(), &gen.scene);
        Ok(())
    })
}

// ---- frustum ----

pub fn frustum_monotone_in_box() -> Result<(), String> {
    let s = (frontal_points(0..200), box_strategy(), prop::array::uniform4(0.0..60.0f64));
    let view = forward_view();
    run(500, s, |(pts, b, grow)| {
        let big = Box2D::new(b.x1 - grow[0], b.y1 - grow[1], b.x2 + grow[2], b.y2 + grow[3]).unwrap();
        let small = extract_frustum_in_view(&pts, &b, &view, 0);
        let large = extract_frustum_in_view(&pts, &big, &view, 0);
        prop_assert!(is_subsequence(&small.points, &large.points));
        Ok(())
    })
}

pub fn frustum_filter_only_flags() -> Result<(), String> {
    let mask = (1u32..60, 1u32..60).prop_flat_map(|(w, h)| {
        prop::collection::vec(prop::bool::ANY, (w * h) as usize).prop_map(move |b| Mask::new(w, h, b).unwrap())
    });
    let s = (frontal_points(0..200), box_strategy(), prop::option::of(mask));
    let view = forward_view();
    run(500, s, |(pts, b, mask)| {
        let fp = extract_frustum_in_view(&pts, &b, &view, 3);
        let before = fp.points.clone();
        let out = filter_foreground(fp, mask.as_ref());
        prop_assert_eq!(&out.points, &before);
        prop_assert_eq!(out.foreground_flags.len(), before.len());
        prop_assert!(out.foreground_count() <= before.len());
        prop_assert!(out.foreground().len() <= before.len());
        if mask.is_none() {
            prop_assert_eq!(out.foreground_count(), before.len());
        }
        Ok(())
    })
}

pub fn frustum_preserves_order() -> Result<(), String> {
    let s = (frontal_points(0..300), box_strategy());
    let view = forward_view();
    run(500, s, |(pts, b)| {
        let fp = extract_frustum_in_view(&pts, &b, &view, 0);
        prop_assert!(is_subsequence(&fp.points, &pts));
        Ok(())
    })
}

// ---- aggregate ----

fn sweep_sequence() -> impl Strategy<Value = Vec<SweepFrame>> {
    let sweep = (
        yaw_transform_strategy(),
        prop::collection::vec(prop::array::uniform4(-60.0..60.0f32), 0..40),
    );
    (prop::collection::vec(sweep, 1..8), yaw_transform_strategy()).prop_map(|(v, sensor)| {
        v.into_iter()
            .enumerate()
            .map(|(i, (pose, points))| SweepFrame {
                frame_id: format!("s{i}"),
                timestamp: i as i64 * 100_000,
                points,
                ego_pose: pose,
                sensor_pose: sensor,
            })
            .collect()
    })
}

pub fn aggregate_count_matches_window() -> Result<(), String> {
    let s = (sweep_sequence(), any::<prop::sample::Index>(), 0..10u32, 0..10u32);
    run(300, s, |(seq, at, past, future)| {
        let idx = at.index(seq.len());
        let strat = AggregationStrategy { past, future };
        let pts: Vec<Vec3<f64>> = aggregate_sweeps(&seq, idx, strat).unwrap();
        let lo = idx.saturating_sub(past as usize);
        let hi = (idx + future as usize).min(seq.len() - 1);
        let expect: usize = (lo..=hi).map(|j| seq[j].points.len()).sum();
        prop_assert_eq!(pts.len(), expect);
        Ok(())
    })
}

pub fn aggregate_current_only_is_identity() -> Result<(), String> {
    let s = (sweep_sequence(), any::<prop::sample::Index>());
    run(300, s, |(seq, at)| {
        let idx = at.index(seq.len());
        let pts: Vec<Vec3<f64>> = aggregate_sweeps(&seq, idx, AggregationStrategy::current_only()).unwrap();
        let expect: Vec<Vec3<f64>> = seq[idx]
            .points
            .iter()
            .map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64))
            .collect();
        prop_assert_eq!(pts, expect);
        Ok(())
    })
}

pub fn aggregate_compensation_inverts() -> Result<(), String> {
    let s = (sweep_sequence(), any::<prop::sample::Index>(), any::<prop::sample::Index>());
    run(300, s, |(seq, a, b)| {
        let (cur, src) = (&seq[a.index(seq.len())], &seq[b.index(seq.len())]);
        let t = compensation(cur, src);
        let back = t.inverse();
        for p in &src.points {
            let p = Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64);
            let q = back.apply(t.apply(p));
            prop_assert!((q - p).norm() <= 1e-9, "{:?} -> {:?}", p, q);
        }
        Ok(())
    })
}

// ---- prior ----

fn faces_strategy() -> impl Strategy<Value = Vec<Face>> {
    prop::collection::vec(
        prop::sample::select(vec![Face::Front, Face::Back, Face::Left, Face::Right]),
        1..5,
    )
}

fn record(faces: Vec<Face>, dims: [f64; 3]) -> ExpertRecord {
    ExpertRecord {
        frame_id: "f".into(),
        camera_id: "CAM".into(),
        bbox: [10.0, 10.0, 50.0, 40.0],
        dims,
        visible_faces: faces,
        image_region: ImageRegion::Center,
    }
}

/// ego <- camera with some pitch so the optical axis is not horizontal.
fn camera_strategy() -> impl Strategy<Value = RigidTransform<f64>> {
    (-PI..PI, -0.4..0.4f64, prop::array::uniform3(-3.0..3.0f64)).prop_map(|(yaw, pitch, t)| {
        let (s, c) = pitch.sin_cos();
        // tilt about the camera x axis, then place
        let tilt = Mat3::from_rows([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]);
        let base = camera_pose(yaw, t);
        RigidTransform::new(base.rotation().mul_mat(&tilt), base.translation()).unwrap()
    })
}

pub fn prior_orientation_in_range() -> Result<(), String> {
    let s = (faces_strategy(), camera_strategy(), yaw_transform_strategy());
    run(2000, s, |(faces, cam, lidar)| {
        let yaw = derive_orientation(&record(faces, [4.0, 2.0, 1.5]), &cam, &lidar).unwrap();
        prop_assert!(yaw > -PI && yaw <= PI, "{}", yaw);
        Ok(())
    })
}

pub fn prior_rotation_equivariance() -> Result<(), String> {
    let s = (faces_strategy(), camera_strategy(), yaw_transform_strategy(), -TAU..TAU);
    run(2000, s, |(faces, cam, lidar, phi)| {
        let rec = record(faces, [4.0, 2.0, 1.5]);
        let yaw = derive_orientation(&rec, &cam, &lidar).unwrap();
        // rotate the camera by phi about the LiDAR z axis
        let spin = lidar
            .compose(&RigidTransform::from_yaw(phi, Vec3::zeros()))
            .compose(&lidar.inverse());
        let yaw2 = derive_orientation(&rec, &spin.compose(&cam), &lidar).unwrap();
        prop_assert!(yaw_diff(yaw2, normalize_angle(yaw + phi)) <= 1e-9, "{} {} {}", yaw, yaw2, phi);
        Ok(())
    })
}

pub fn prior_route_dims_positive() -> Result<(), String> {
    let tax = Taxonomy::default();
    let names: Vec<String> = tax.names().map(str::to_string).collect();
    let s = (
        prop::sample::select(names),
        0.0..=1.0f64,
        prop::option::of((faces_strategy(), prop::array::uniform3(-2.0..10.0f64))),
        camera_strategy(),
        0.0..=1.0f64,
    );
    run(2000, s, |(class, score, expert, cam, threshold)| {
        let det = Detection2D {
            frame_id: "f".into(),
            camera_id: "CAM".into(),
            class_label: class,
            bbox: Box2D::new(10.0, 10.0, 50.0, 40.0).unwrap(),
            score,
            mask: None,
        };
        let rec = expert.map(|(f, d)| record(f, d));
        let cfg = RoutingConfig {
            threshold,
            ..Default::default()
        };
        if let Ok(p) = route(&det, rec.as_ref(), &tax, &cam, &RigidTransform::identity(), &cfg) {
            prop_assert!(p.dims.l > 0.0 && p.dims.w > 0.0 && p.dims.h > 0.0);
        }
        Ok(())
    })
}

// ---- mht ----

/// A detection on a box in front of the forward camera: foreground points
/// sampled around the box and the detection box from its projection.
#[derive(Debug, Clone)]
pub struct SearchCase {
    pub points: Vec<Vec3<f64>>,
    pub det_box: Box2D<f64>,
    pub prior: SemanticPrior<f64>,
}

pub fn search_case(sector: bool, max_points: usize) -> impl Strategy<Value = SearchCase> {
    (
        (6.0..25.0f64, -5.0..5.0f64, -1.0..0.5f64),
        prop::array::uniform3(0.5..4.5f64),
        -PI..PI,
        prop::array::uniform3(-0.6..0.6f64),
        -0.5..0.5f64,
        0.05..PI,
        prop::bool::ANY,
    )
        .prop_flat_map(move |((x, y, z), d, yaw, dim_err, yaw_err, half, oriented)| {
            let truth = cuboid([x, y, z], d, yaw);
            let dims = Dims::new(
                (d[0] * (1.0 + dim_err[0])).max(0.2),
                (d[1] * (1.0 + dim_err[1])).max(0.2),
                (d[2] * (1.0 + dim_err[2])).max(0.2),
            )
            .unwrap();
            let prior = if sector || oriented {
                SemanticPrior::new(dims, Some(yaw + yaw_err), half, PriorSource::PerInstance).unwrap()
            } else {
                SemanticPrior::unconstrained(dims, PriorSource::ClassAverage)
            };
            let view = forward_view();
            let det_box = project_cuboid_to_box(&truth, &view.camera_from_lidar, &view.intrinsics)
                .unwrap_or_else(|| Box2D::new(0.0, 0.0, 1.0, 1.0).unwrap());
            (points_near(&truth, 1..max_points), Just(det_box), Just(prior))
        })
        .prop_map(|(points, det_box, prior)| SearchCase { points, det_box, prior })
}

pub fn mht_nested_grid_monotone() -> Result<(), String> {
    let view = forward_view();
    run(60, search_case(false, 60), |case| {
        let cfg = SearchConfig::default();
        let coarse = fit_cuboid(&case.points, &case.prior, &case.det_box, &view, &cfg).unwrap();
        let fine = fit_cuboid(&case.points, &case.prior, &case.det_box, &view, &cfg.refined()).unwrap();
        prop_assert!(fine.objective >= coarse.objective, "{} < {}", fine.objective, coarse.objective);
        Ok(())
    })
}

pub fn mht_deterministic_across_threads() -> Result<(), String> {
    let view = forward_view();
    run(40, search_case(false, 60), |case| {
        let cfg = SearchConfig::default();
        let init = init_hypothesis(&case.points, &case.prior).unwrap();
        let mut grid = enumerate_hypotheses(&init, &case.prior, &cfg);
        let pick = |g: &[Cuboid3D<f64>], threads: usize| {
            with_threads(threads, || select_best(g, &case.points, &case.det_box, &view, init.yaw).unwrap())
        };
        let reference = pick(&grid, 1);
        for threads in [2, 4, 8] {
            prop_assert_eq!(pick(&grid, threads), reference);
        }
        grid.reverse();
        prop_assert_eq!(pick(&grid, 4), reference);
        Ok(())
    })
}

pub fn mht_terms_bounded() -> Result<(), String> {
    let view = forward_view();
    run(40, search_case(false, 40), |case| {
        let cfg = SearchConfig::default();
        let init = init_hypothesis(&case.points, &case.prior).unwrap();
        for c in enumerate_hypotheses(&init, &case.prior, &cfg).iter().step_by(7) {
            let h = autolift::mht::evaluate(c, &case.points, &case.det_box, &view);
            prop_assert!((0.0..=1.0).contains(&h.coverage));
            prop_assert!((0.0..=1.0).contains(&h.proj_iou));
            prop_assert!((0.0..=2.0).contains(&h.objective));
        }
        Ok(())
    })
}

pub fn mht_yaw_within_sector() -> Result<(), String> {
    let view = forward_view();
    run(200, search_case(true, 40), |case| {
        let h = fit_cuboid(&case.points, &case.prior, &case.det_box, &view, &SearchConfig::default()).unwrap();
        let theta = case.prior.orientation.unwrap();
        prop_assert!(yaw_diff(h.cuboid.yaw, theta) <= case.prior.sector_half_width + 1e-9);
        Ok(())
    })
}

// ---- score ----

pub fn score_occupancy_rigid_invariance() -> Result<(), String> {
    let s = (cuboid_with_points(0..80), yaw_transform_strategy(), 1u32..12);
    run(1000, s, |((c, pts), t, k)| {
        let moved: Vec<Vec3<f64>> = pts.iter().map(|p| t.apply(*p)).collect();
        prop_assert_eq!(occupancy_rate(&c, &pts, k), occupancy_rate(&c.transformed(&t), &moved, k));
        Ok(())
    })
}

pub fn score_occupancy_monotone() -> Result<(), String> {
    let s = cuboid_strategy().prop_flat_map(|c| (Just(c), points_near(&c, 0..60), points_near(&c, 0..30), 1u32..12));
    run(1000, s, |(c, pts, extra, k)| {
        let before = occupancy_rate(&c, &pts, k);
        let mut more = pts.clone();
        more.extend(extra);
        let after = occupancy_rate(&c, &more, k);
        prop_assert!(after >= before);
        prop_assert!((0.0..=1.0).contains(&after));
        Ok(())
    })
}

pub fn score_fuse_monotone_affine() -> Result<(), String> {
    let u = || 0.0..=1.0f64;
    run(5000, (u(), u(), u(), u(), u()), |(a, b, c, d, alpha)| {
        let (s2_lo, s2_hi) = (a.min(b), a.max(b));
        let (s3_lo, s3_hi) = (c.min(d), c.max(d));
        let f = |x, y| fuse_score(x, y, alpha).unwrap();
        prop_assert!(f(s2_hi, s3_lo) >= f(s2_lo, s3_lo));
        prop_assert!(f(s2_lo, s3_hi) >= f(s2_lo, s3_lo));
        prop_assert!((f(a, c) - (alpha * a + (1.0 - alpha) * c)).abs() <= 1e-15);
        Ok(())
    })
}

// ---- refine ----

/// Frames of annotations moving by small random steps, of two classes.
fn track_frames() -> impl Strategy<Value = Vec<Vec<ScoredAnnotation>>> {
    let obj = (
        prop::sample::select(vec!["car", "adult"]),
        -30.0..30.0f64,
        -30.0..30.0f64,
        0.01..1.0f64,
    );
    let frame = prop::collection::vec(obj, 0..7);
    prop::collection::vec(frame, 1..7).prop_map(|frames| {
        frames
            .into_iter()
            .enumerate()
            .map(|(f, objs)| {
                objs.into_iter()
                    .map(|(class, x, y, s)| super::ann(&format!("f{f}"), class, [x, y], s))
                    .collect()
            })
            .collect()
    })
}

pub fn refine_preserves_sums() -> Result<(), String> {
    let tax = Taxonomy::default();
    run(500, track_frames(), |frames| {
        let tracks = associate(&frames, &tax);
        let mut refined = frames.clone();
        refine_scores(&tracks, &mut refined);
        let count = |f: &[Vec<ScoredAnnotation>]| f.iter().map(Vec::len).sum::<usize>();
        prop_assert_eq!(count(&refined), count(&frames));
        let members: usize = tracks.iter().map(|t| t.members.len()).sum();
        prop_assert_eq!(members, count(&frames));
        for t in &tracks {
            let sum = |f: &[Vec<ScoredAnnotation>]| t.members.iter().map(|m| f[m.frame][m.index].score).sum::<f64>();
            prop_assert!((sum(&refined) - sum(&frames)).abs() <= 1e-12 * t.members.len() as f64);
        }
        Ok(())
    })
}

pub fn refine_time_reversal() -> Result<(), String> {
    use std::collections::BTreeSet;
    let tax = Taxonomy::default();
    run(500, track_frames(), |frames| {
        let n = frames.len();
        let partition = |f: &[Vec<ScoredAnnotation>], flip: bool| -> BTreeSet<BTreeSet<(usize, usize)>> {
            associate(f, &tax)
                .into_iter()
                .map(|t| {
                    t.members
                        .iter()
                        .map(|m| (if flip { n - 1 - m.frame } else { m.frame }, m.index))
                        .collect()
                })
                .collect()
        };
        let reversed: Vec<Vec<ScoredAnnotation>> = frames.iter().rev().cloned().collect();
        prop_assert_eq!(partition(&frames, false), partition(&reversed, true));
        Ok(())
    })
}

pub fn refine_no_class_mixing() -> Result<(), String> {
    let tax = Taxonomy::default();
    run(500, track_frames(), |frames| {
        for t in associate(&frames, &tax) {
            for m in &t.members {
                prop_assert_eq!(&frames[m.frame][m.index].class_label, &t.class_label);
            }
        }
        Ok(())
    })
}

// ---- eval ----

/// Predictions and ground truth of one class over two frames on a coarse
/// grid, so distance ties are common.
fn eval_case() -> impl Strategy<Value = (Vec<ScoredAnnotation>, Vec<ScoredAnnotation>)> {
    let item = |scored: bool| {
        (
            prop::sample::select(vec!["a", "b"]),
            -6i32..6,
            -6i32..6,
            if scored { (1u32..20).boxed() } else { Just(20u32).boxed() },
        )
            .prop_map(|(f, x, y, s)| super::ann(f, "car", [x as f64 * 0.5, y as f64 * 0.5], s as f64 / 20.0))
    };
    (prop::collection::vec(item(true), 0..14), prop::collection::vec(item(false), 1..10))
}

pub fn eval_ap_monotone_in_threshold() -> Result<(), String> {
    run(2000, eval_case(), |(preds, gts)| {
        let aps: Vec<f64> = [0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&t| average_precision(&match_predictions(&preds, &gts, "car", t)))
            .collect();
        for w in aps.windows(2) {
            prop_assert!(w[0] <= w[1], "{:?}", aps);
        }
        Ok(())
    })
}

pub fn eval_zero_score_fp() -> Result<(), String> {
    let s = (eval_case(), -6i32..6);
    run(2000, s, |((preds, gts), x)| {
        let before = match_predictions(&preds, &gts, "car", 1.0);
        let mut more = preds.clone();
        // far from every ground truth: always a false positive
        more.push(super::ann("a", "car", [100.0 + x as f64, 100.0], 0.0));
        let after = match_predictions(&more, &gts, "car", 1.0);
        let final_recall = before.num_tp() as f64 / before.num_gt as f64;
        let (p0, p1) = (interpolated_precision(&before), interpolated_precision(&after));
        for i in 0..101 {
            if (i as f64 / 100.0) < final_recall {
                prop_assert_eq!(p0[i], p1[i], "recall {}", i);
            }
        }
        prop_assert!(average_precision(&after) <= average_precision(&before));
        Ok(())
    })
}

pub fn eval_top_tp_never_hurts() -> Result<(), String> {
    run(2000, eval_case(), |(preds, gts)| {
        let before = average_precision(&match_predictions(&preds, &gts, "car", 1.0));
        let mut p2 = preds.clone();
        let mut g2 = gts.clone();
        // a new object in its own frame, found with the highest score
        g2.push(super::ann("new", "car", [0.0, 0.0], 1.0));
        p2.push(super::ann("new", "car", [0.0, 0.0], 1.0));
        let after = average_precision(&match_predictions(&p2, &g2, "car", 1.0));
        prop_assert!(after >= before, "{} < {}", after, before);
        Ok(())
    })
}

pub fn eval_nds_monotone() -> Result<(), String> {
    let u = || 0.0..1.0f64;
    let s = (u(), u(), prop::array::uniform5(u()), 0..5usize, 0.001..0.5f64);
    run(5000, s, |(m0, m1, errs, k, bump)| {
        let (lo, hi) = (m0.min(m1), m0.max(m1));
        prop_assert!(nds(hi, errs) >= nds(lo, errs));
        prop_assert!(adapted_nds(hi, errs[0], errs[1], errs[2]) >= adapted_nds(lo, errs[0], errs[1], errs[2]));
        let mut worse = errs;
        worse[k] = (errs[k] + bump).min(1.0);
        prop_assert!(nds(lo, worse) <= nds(lo, errs));
        if worse[k] > errs[k] {
            prop_assert!(nds(lo, worse) < nds(lo, errs));
        }
        if k < 3 {
            prop_assert!(
                adapted_nds(lo, worse[0], worse[1], worse[2]) <= adapted_nds(lo, errs[0], errs[1], errs[2])
            );
        }
        prop_assert!(nds(hi, errs) > nds(lo, errs) || hi == lo);
        Ok(())
    })
}

pub fn eval_perfect_predictions() -> Result<(), String> {
    let names = vec!["car", "bus", "adult", "barrier"];
    let item = (
        prop::sample::select(names),
        prop::sample::select(vec!["f0", "f1", "f2"]),
        cuboid_strategy(),
        prop::option::of((-10.0..10.0f64, -10.0..10.0f64)),
    );
    run(300, prop::collection::vec(item, 1..30), |items| {
        let gts: Vec<ScoredAnnotation> = items
            .iter()
            .map(|(class, frame, c, v)| {
                let mut a = ScoredAnnotation::new(*frame, *class, *c, 1.0);
                a.velocity = v.map(|(x, y)| [x, y]);
                a
            })
            .collect();
        let r = evaluate(&gts, &gts, &EvalConfig::default());
        prop_assert_eq!(r.map_3d, 1.0);
        prop_assert_eq!((r.m_ate, r.m_ase, r.m_aoe), (0.0, 0.0, 0.0));
        prop_assert_eq!(r.adapted_nds, 1.0);
        // attributes are never predicted, so the attribute term stays at its worst
        prop_assert_eq!(r.m_aae, 1.0);
        match r.m_ave {
            Some(v) => {
                prop_assert_eq!(v, 0.0);
                prop_assert!((r.nds - 0.9).abs() < 1e-12);
            }
            None => prop_assert!((r.nds - 0.8).abs() < 1e-12),
        }
        Ok(())
    })
}

// ---- synth ----

fn small_options() -> RandomSceneOptions {
    RandomSceneOptions {
        objects: [2, 6],
        points_per_object: [40, 120],
        sweeps: 2,
        ..Default::default()
    }
}

pub fn synth_deterministic() -> Result<(), String> {
    let tax = Taxonomy::default();
    run(6, any::<u64>(), |seed| {
        let write = || {
            let gen = generate_scene(&random_scene_spec(seed, &tax, &small_options()).unwrap()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            write_scene(&gen, dir.path(), SweepFormat::Xyzi).unwrap();
            dir
        };
        let (a, b) = (write(), write());
        let files = super::list_files(a.path());
        prop_assert!(files.len() > 4);
        prop_assert_eq!(&files, &super::list_files(b.path()));
        for f in files {
            prop_assert!(std::fs::read(a.path().join(&f)).unwrap() == std::fs::read(b.path().join(&f)).unwrap(), "{}", f);
        }
        Ok(())
    })
}

pub fn synth_points_inside_generator() -> Result<(), String> {
    let tax = Taxonomy::default();
    run(20, any::<u64>(), |seed| {
        let gen = generate_scene(&random_scene_spec(seed, &tax, &small_options()).unwrap()).unwrap();
        for (boxes, clouds) in gen.cuboids.iter().zip(&gen.object_points) {
            for (c, pts) in boxes.iter().zip(clouds) {
                prop_assert!(!pts.is_empty());
                for p in pts {
                    prop_assert!(point_in_cuboid(*p, c));
                }
            }
        }
        Ok(())
    })
}

pub fn synth_boxes_contain_projections() -> Result<(), String> {
    let tax = Taxonomy::default();
    let opts = RandomSceneOptions {
        noise_sigma: 0.05,
        ..small_options()
    };
    run(20, any::<u64>(), |seed| {
        let gen = generate_scene(&random_scene_spec(seed, &tax, &opts).unwrap()).unwrap();
        prop_assert!(!gen.detections.is_empty());
        for (det, truth) in gen.detections.iter().zip(&gen.detection_truth) {
            let lidar_from_world = gen.scene.sweeps[truth.sweep].world_from_lidar().inverse();
            let view = CameraView::<f64>::from_calibration(&gen.scene.calibration, &det.camera_id).unwrap();
            for p in &gen.object_points[truth.sweep][truth.object] {
                let px = view.pixel(lidar_from_world.apply(*p)).expect("in front of the camera");
                prop_assert!(det.bbox.contains(px), "{:?} outside {:?}", px, det.bbox);
            }
        }
        Ok(())
    })
}

/// Every invariant check, labelled by module.
pub const ALL: &[(&str, Check)] = &[
    ("geom: containment invariant under rigid motion", geom_rigid_invariance),
    ("geom: iou symmetric and bounded", geom_iou_symmetric_bounded),
    ("geom: projection shrinks with distance", geom_projection_shrinks_with_distance),
    ("geom: corner reconstruction", geom_corner_roundtrip),
    ("ingest: non-finite input rejected", ingest_rejects_non_finite),
    ("ingest: write/read identity", ingest_roundtrip_identity),
    ("frustum: monotone in the box", frustum_monotone_in_box),
    ("frustum: filter only flags", frustum_filter_only_flags),
    ("frustum: input order kept", frustum_preserves_order),
    ("aggregate: count over clamped window", aggregate_count_matches_window),
    ("aggregate: current-only identity", aggregate_current_only_is_identity),
    ("aggregate: compensation inverts", aggregate_compensation_inverts),
    ("prior: orientation range", prior_orientation_in_range),
    ("prior: rotation equivariance", prior_rotation_equivariance),
    ("prior: routed dims positive", prior_route_dims_positive),
    ("mht: nested grid monotone", mht_nested_grid_monotone),
    ("mht: thread-count determinism", mht_deterministic_across_threads),
    ("mht: terms bounded", mht_terms_bounded),
    ("mht: yaw within sector", mht_yaw_within_sector),
    ("score: occupancy rigid invariance", score_occupancy_rigid_invariance),
    ("score: occupancy monotone", score_occupancy_monotone),
    ("score: fusion monotone and affine", score_fuse_monotone_affine),
    ("refine: sums and count preserved", refine_preserves_sums),
    ("refine: time reversal", refine_time_reversal),
    ("refine: no class mixing", refine_no_class_mixing),
    ("eval: AP monotone in threshold", eval_ap_monotone_in_threshold),
    ("eval: zero-score false positive", eval_zero_score_fp),
    ("eval: top-score true positive", eval_top_tp_never_hurts),
    ("eval: NDS monotone", eval_nds_monotone),
    ("eval: perfect predictions", eval_perfect_predictions),
    ("synth: deterministic files", synth_deterministic),
    ("synth: points inside their box", synth_points_inside_generator),
    ("synth: boxes contain projections", synth_boxes_contain_projections),
];
