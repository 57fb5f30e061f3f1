//! End-to-end annotation of a scene.
//!
//! Per detection: aggregate the class's sweep window, select the frustum
//! (flagging mask foreground), pick a prior, search the cuboid, score its
//! occupancy and fuse with the detector score. Cuboids are then moved to
//! the world frame and refined over the whole sequence by tracking.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{aggregate_sweeps, AggregateError, AggregationStrategy};
use crate::eval::EvalConfig;
use crate::frustum::{extract_frustum_in_view, filter_foreground, CameraView};
use crate::geom::Vec3;
use crate::ingest::{Calibration, Detection2D, Scene, ScoredAnnotation, SweepFormat};
use crate::mht::{fit_cuboid, MhtError, SearchConfig};
use crate::prior::{route, ExpertIndex, PriorError, RoutingConfig, SemanticPrior};
use crate::refine::refine_sequence;
use crate::score::{fuse_score, occupancy_rate, ScoreError, ScoringConfig};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("detection {index}: unknown frame `{frame_id}`")]
    UnknownFrame { index: usize, frame_id: String },
    #[error("detection {index}: unknown camera `{camera_id}`")]
    UnknownCamera { index: usize, camera_id: String },
    #[error("detection {index}: unknown class `{class}`")]
    UnknownClass { index: usize, class: String },
    #[error("detection {index}: {msg}")]
    BadDetection { index: usize, msg: String },
    #[error("detection {index}: {source}")]
    Prior { index: usize, source: PriorError },
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub taxonomy: Taxonomy,
    pub search: SearchConfig,
    pub scoring: ScoringConfig,
    pub routing: RoutingConfig,
    pub eval: EvalConfig,
    pub sweep_format: SweepFormat,
    /// Worker threads; 0 picks the number of cores.
    pub threads: usize,
    pub seed: u64,
    /// Fill BEV velocities from tracks.
    pub velocity: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            taxonomy: Taxonomy::default(),
            search: SearchConfig::default(),
            scoring: ScoringConfig::default(),
            routing: RoutingConfig::default(),
            eval: EvalConfig::default(),
            sweep_format: SweepFormat::default(),
            threads: 0,
            seed: 0,
            velocity: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: String| PipelineError::Config(e);
        self.search.validate().map_err(|e| cfg(e.to_string()))?;
        self.scoring.validate().map_err(|e| cfg(e.to_string()))?;
        let r = &self.routing;
        if !(0.0..=1.0).contains(&r.threshold) {
            return Err(cfg(format!("routing threshold {} outside [0, 1]", r.threshold)));
        }
        if !(r.sector_half_width > 0.0 && r.sector_half_width <= std::f64::consts::PI) {
            return Err(cfg(format!(
                "sector half-width {} outside (0, pi]",
                r.sector_half_width
            )));
        }
        if self.eval.dist_thresholds.is_empty() {
            return Err(cfg("no distance thresholds".into()));
        }
        Ok(())
    }
}

/// Why a detection produced no cuboid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    EmptyFrustum,
    NoForeground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDetection {
    pub index: usize,
    pub frame_id: String,
    pub camera_id: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateSummary {
    pub detections: usize,
    pub annotations: usize,
    pub tracks: usize,
    pub skipped: Vec<SkippedDetection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotateOutput {
    /// Frame order of the scene, then detection order.
    pub annotations: Vec<ScoredAnnotation>,
    /// Detection index of each annotation.
    pub sources: Vec<usize>,
    pub summary: AnnotateSummary,
}

/// Checks a detection against the scene and returns its sweep index.
fn resolve(
    index: usize,
    det: &Detection2D,
    scene: &Scene,
    tax: &Taxonomy,
) -> Result<(usize, AggregationStrategy), PipelineError> {
    let frame = scene
        .frame_index(&det.frame_id)
        .ok_or_else(|| PipelineError::UnknownFrame {
            index,
            frame_id: det.frame_id.clone(),
        })?;
    let cam = scene
        .calibration
        .camera(&det.camera_id)
        .ok_or_else(|| PipelineError::UnknownCamera {
            index,
            camera_id: det.camera_id.clone(),
        })?;
    det.check_mask_dims(&cam.intrinsics)
        .map_err(|msg| PipelineError::BadDetection { index, msg })?;
    let strat = tax
        .get(&det.class_label)
        .map_err(|_| PipelineError::UnknownClass {
            index,
            class: det.class_label.clone(),
        })?
        .aggregation;
    Ok((frame, strat))
}

enum Lifted {
    Done(ScoredAnnotation),
    Skipped(SkipReason),
}

/// Runs the pipeline with priors supplied by `prior_for(index, detection,
/// calibration)`.
pub fn annotate_with<F>(
    scene: &Scene,
    detections: &[Detection2D],
    cfg: &PipelineConfig,
    prior_for: F,
) -> Result<AnnotateOutput, PipelineError>
where
    F: Fn(usize, &Detection2D, &Calibration) -> Result<SemanticPrior<f64>, PriorError> + Sync,
{
    cfg.validate()?;
    let tax = &cfg.taxonomy;
    let resolved = detections
        .iter()
        .enumerate()
        .map(|(i, d)| resolve(i, d, scene, tax))
        .collect::<Result<Vec<_>, _>>()?;

    let keys: Vec<(usize, AggregationStrategy)> = resolved
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let clouds: HashMap<(usize, AggregationStrategy), Vec<Vec3<f64>>> = keys
        .par_iter()
        .map(|&(f, s)| aggregate_sweeps(&scene.sweeps, f, s).map(|pts| ((f, s), pts)))
        .collect::<Result<_, _>>()?;

    let lifted: Vec<Lifted> = detections
        .par_iter()
        .enumerate()
        .map(|(i, det)| {
            let (frame, strat) = resolved[i];
            let points = &clouds[&(frame, strat)];
            let view = CameraView::<f64>::from_calibration(&scene.calibration, &det.camera_id)
                .expect("camera resolved above");
            let fp = extract_frustum_in_view(points, &det.bbox, &view, i);
            if fp.is_empty() {
                return Ok(Lifted::Skipped(SkipReason::EmptyFrustum));
            }
            let fg = filter_foreground(fp, det.mask.as_ref()).foreground();
            if fg.is_empty() {
                return Ok(Lifted::Skipped(SkipReason::NoForeground));
            }
            let prior = prior_for(i, det, &scene.calibration)
                .map_err(|source| PipelineError::Prior { index: i, source })?;
            let hyp = match fit_cuboid(&fg, &prior, &det.bbox, &view, &cfg.search) {
                Ok(h) => h,
                Err(MhtError::EmptyFrustum) => return Ok(Lifted::Skipped(SkipReason::NoForeground)),
                Err(e) => return Err(PipelineError::Config(e.to_string())),
            };
            let s3d = occupancy_rate(&hyp.cuboid, points, cfg.scoring.grid_k);
            let score = fuse_score(det.score, s3d, cfg.scoring.alpha)?;
            let world = hyp.cuboid.transformed(&scene.sweeps[frame].world_from_lidar());
            let mut ann = ScoredAnnotation::new(&det.frame_id, &det.class_label, world, score);
            ann.score_2d = Some(det.score);
            ann.score_3d = Some(s3d);
            Ok(Lifted::Done(ann))
        })
        .collect::<Result<_, PipelineError>>()?;

    let mut frames: Vec<Vec<ScoredAnnotation>> = vec![Vec::new(); scene.sweeps.len()];
    let mut frame_sources: Vec<Vec<usize>> = vec![Vec::new(); scene.sweeps.len()];
    let mut skipped = Vec::new();
    for (i, l) in lifted.into_iter().enumerate() {
        match l {
            Lifted::Done(a) => {
                frames[resolved[i].0].push(a);
                frame_sources[resolved[i].0].push(i);
            }
            Lifted::Skipped(reason) => skipped.push(SkippedDetection {
                index: i,
                frame_id: detections[i].frame_id.clone(),
                camera_id: detections[i].camera_id.clone(),
                reason,
            }),
        }
    }
    let timestamps: Vec<i64> = scene.sweeps.iter().map(|s| s.timestamp).collect();
    let tracks = refine_sequence(&mut frames, &timestamps, tax, cfg.velocity);

    let annotations: Vec<ScoredAnnotation> = frames.into_iter().flatten().collect();
    let sources: Vec<usize> = frame_sources.into_iter().flatten().collect();
    Ok(AnnotateOutput {
        summary: AnnotateSummary {
            detections: detections.len(),
            annotations: annotations.len(),
            tracks: tracks.len(),
            skipped,
        },
        annotations,
        sources,
    })
}

/// Runs the pipeline with expert records routed by detection confidence.
pub fn annotate(
    scene: &Scene,
    detections: &[Detection2D],
    experts: &ExpertIndex,
    cfg: &PipelineConfig,
) -> Result<AnnotateOutput, PipelineError> {
    annotate_with(scene, detections, cfg, |_, det, calib| {
        let cam = calib.camera(&det.camera_id).expect("camera resolved");
        route(
            det,
            experts.lookup(det),
            &cfg.taxonomy,
            &cam.ego_from_camera,
            &calib.ego_from_lidar,
            &cfg.routing,
        )
    })
}

/// Runs `f` on a pool of `threads` workers (0 = one per core).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(f)
}
