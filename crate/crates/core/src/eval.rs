//! Detection metrics in the nuScenes style: AP over BEV center-distance
//! thresholds, true-positive error terms, NDS and its reduced variant,
//! plus IoU-matched 2D mAP.
//!
//! AP conventions: precision is linearly interpolated at 101 evenly spaced
//! recall levels (zero beyond the highest reached recall); levels at or
//! below recall 0.1 are dropped, 0.1 is subtracted from the remaining
//! precisions with negatives set to zero, and the mean is rescaled by
//! `1 / 0.9`. Classes without ground truth are excluded from every mean.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geom::{iou_2d, yaw_diff, Box2D};
use crate::ingest::ScoredAnnotation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// BEV center-distance thresholds, meters.
    pub dist_thresholds: Vec<f64>,
    /// Threshold at which true-positive errors are measured.
    pub tp_threshold: f64,
    pub min_recall: f64,
    pub min_precision: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dist_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
            min_recall: 0.1,
            min_precision: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchEntry {
    pub pred_index: usize,
    pub score: f64,
    pub is_tp: bool,
    pub gt_index: Option<usize>,
}

/// Greedy matching outcome for one class at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub class_label: String,
    pub threshold: f64,
    /// Sorted by descending score.
    pub entries: Vec<MatchEntry>,
    pub num_gt: usize,
}

impl MatchResult {
    pub fn tp_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries
            .iter()
            .filter_map(|e| e.gt_index.map(|g| (e.pred_index, g)))
    }

    pub fn num_tp(&self) -> usize {
        self.entries.iter().filter(|e| e.is_tp).count()
    }
}

pub fn bev_distance(a: &ScoredAnnotation, b: &ScoredAnnotation) -> f64 {
    let d = a.cuboid.center - b.cuboid.center;
    d.x.hypot(d.y)
}

/// Indices of `preds` of one class ordered by descending score, equal
/// scores keeping input order.
fn ranked(preds: &[ScoredAnnotation], class: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len())
        .filter(|&i| preds[i].class_label == class)
        .collect();
    idx.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    idx
}

/// Greedy matching: predictions in descending score order each take the
/// nearest unmatched ground truth of the same class and frame whose BEV
/// center distance is at most `threshold` (nearest ties: lowest index).
pub fn match_predictions(
    preds: &[ScoredAnnotation],
    gts: &[ScoredAnnotation],
    class: &str,
    threshold: f64,
) -> MatchResult {
    let mut by_frame: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut num_gt = 0;
    for (i, g) in gts.iter().enumerate() {
        if g.class_label == class {
            by_frame.entry(g.frame_id.as_str()).or_default().push(i);
            num_gt += 1;
        }
    }
    let mut taken = vec![false; gts.len()];
    let entries = ranked(preds, class)
        .into_iter()
        .map(|pi| {
            let p = &preds[pi];
            let mut best: Option<(f64, usize)> = None;
            for &gi in by_frame.get(p.frame_id.as_str()).into_iter().flatten() {
                if taken[gi] {
                    continue;
                }
                let d = bev_distance(p, &gts[gi]);
                if d <= threshold && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, gi));
                }
            }
            if let Some((_, gi)) = best {
                taken[gi] = true;
            }
            MatchEntry {
                pred_index: pi,
                score: p.score,
                is_tp: best.is_some(),
                gt_index: best.map(|(_, g)| g),
            }
        })
        .collect();
    MatchResult {
        class_label: class.to_string(),
        threshold,
        entries,
        num_gt,
    }
}

/// `np.interp`-style lookup: linear between bracketing samples, first value
/// below the range, zero above it. `xs` must be nondecreasing.
fn interp(x: f64, xs: &[f64], ys: &[f64]) -> f64 {
    let (Some(&first), Some(&last)) = (xs.first(), xs.last()) else {
        return 0.0;
    };
    if x < first {
        return ys[0];
    }
    if x > last {
        return 0.0;
    }
    // largest j with xs[j] <= x
    let j = xs.partition_point(|&v| v <= x) - 1;
    if j + 1 >= xs.len() {
        return ys[j];
    }
    let t = (x - xs[j]) / (xs[j + 1] - xs[j]);
    ys[j] + t * (ys[j + 1] - ys[j])
}

/// Precision sampled at recall `0.00, 0.01, ..., 1.00`.
pub fn interpolated_precision(m: &MatchResult) -> [f64; 101] {
    let mut out = [0.0; 101];
    if m.num_gt == 0 || m.entries.is_empty() {
        return out;
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut rec = Vec::with_capacity(m.entries.len());
    let mut prec = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        if e.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        prec.push(tp as f64 / (tp + fp) as f64);
        rec.push(tp as f64 / m.num_gt as f64);
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o = interp(i as f64 / 100.0, &rec, &prec);
    }
    out
}

/// Clipped, rescaled AP with explicit clipping levels.
pub fn average_precision_with(m: &MatchResult, min_recall: f64, min_precision: f64) -> f64 {
    if m.num_gt == 0 {
        return 0.0;
    }
    let prec = interpolated_precision(m);
    let start = (100.0 * min_recall).round() as usize + 1;
    let kept = &prec[start.min(101)..];
    if kept.is_empty() {
        return 0.0;
    }
    let mean = kept
        .iter()
        .map(|p| (p - min_precision).max(0.0))
        .sum::<f64>()
        / kept.len() as f64;
    // summing 90 equal terms can overshoot 1 by an ulp or two
    (mean / (1.0 - min_precision)).clamp(0.0, 1.0)
}

pub fn average_precision(m: &MatchResult) -> f64 {
    average_precision_with(m, 0.1, 0.1)
}

/// Mean true-positive errors of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    /// Mean BEV center distance, meters.
    pub ate: f64,
    /// Mean `1 - IoU` of center- and yaw-aligned boxes.
    pub ase: f64,
    /// Mean absolute yaw difference, radians.
    pub aoe: f64,
    /// Mean BEV velocity error over pairs that both carry velocity.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ave: Option<f64>,
}

impl TpErrors {
    /// Value used for classes without any true positive.
    pub fn worst() -> Self {
        Self {
            ate: 1.0,
            ase: 1.0,
            aoe: 1.0,
            ave: None,
        }
    }
}

/// `1 - IoU` of two boxes sharing center and yaw.
pub fn aligned_scale_error(a: [f64; 3], b: [f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let union = a.iter().product::<f64>() + b.iter().product::<f64>() - inter;
    1.0 - inter / union
}

/// Errors over the true positives of `m`; `None` when there are none.
pub fn tp_errors(m: &MatchResult, preds: &[ScoredAnnotation], gts: &[ScoredAnnotation]) -> Option<TpErrors> {
    let pairs: Vec<(usize, usize)> = m.tp_pairs().collect();
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let mut ate = 0.0;
    let mut ase = 0.0;
    let mut aoe = 0.0;
    let mut vel = (0.0, 0usize);
    for &(pi, gi) in &pairs {
        let (p, g) = (&preds[pi], &gts[gi]);
        ate += bev_distance(p, g);
        ase += aligned_scale_error(p.cuboid.dims.to_array(), g.cuboid.dims.to_array());
        aoe += yaw_diff(p.cuboid.yaw, g.cuboid.yaw);
        if let (Some(pv), Some(gv)) = (p.velocity, g.velocity) {
            vel.0 += (pv[0] - gv[0]).hypot(pv[1] - gv[1]);
            vel.1 += 1;
        }
    }
    Some(TpErrors {
        ate: ate / n,
        ase: ase / n,
        aoe: aoe / n,
        ave: (vel.1 > 0).then(|| vel.0 / vel.1 as f64),
    })
}

/// nuScenes detection score:
/// `(5 mAP + sum_k (1 - min(1, err_k))) / 10` over
/// `(mATE, mASE, mAOE, mAVE, mAAE)`.
pub fn nds(map: f64, tp_means: [f64; 5]) -> f64 {
    let tp: f64 = tp_means.iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / 10.0
}

/// Reduced score without velocity and attribute terms:
/// `(5 mAP + sum_k (1 - min(1, err_k))) / 8` over `(mATE, mASE, mAOE)`.
pub fn adapted_nds(map: f64, ate: f64, ase: f64, aoe: f64) -> f64 {
    let tp: f64 = [ate, ase, aoe].iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / 8.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub threshold: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub num_gt: usize,
    pub num_pred: usize,
    pub ap: Vec<ThresholdAp>,
    pub mean_ap: f64,
    /// `None` when the class has no true positive at the error threshold.
    pub tp_errors: Option<TpErrors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub map_3d: f64,
    pub m_ate: f64,
    pub m_ase: f64,
    pub m_aoe: f64,
    /// Present only when some matched pairs carry velocities on both sides.
    pub m_ave: Option<f64>,
    /// Attributes are never predicted; reported as the worst-case 1.0.
    pub m_aae: f64,
    pub nds: f64,
    pub adapted_nds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_2d: Option<f64>,
}

/// Full 3D evaluation over every class that has ground truth.
pub fn evaluate(preds: &[ScoredAnnotation], gts: &[ScoredAnnotation], cfg: &EvalConfig) -> MetricsReport {
    let classes: BTreeSet<&str> = gts.iter().map(|g| g.class_label.as_str()).collect();
    let mut per_class = BTreeMap::new();
    for class in &classes {
        let ap: Vec<ThresholdAp> = cfg
            .dist_thresholds
            .iter()
            .map(|&t| {
                let m = match_predictions(preds, gts, class, t);
                ThresholdAp {
                    threshold: t,
                    ap: average_precision_with(&m, cfg.min_recall, cfg.min_precision),
                }
            })
            .collect();
        let mean_ap = if ap.is_empty() {
            0.0
        } else {
            ap.iter().map(|a| a.ap).sum::<f64>() / ap.len() as f64
        };
        let m = match_predictions(preds, gts, class, cfg.tp_threshold);
        per_class.insert(
            class.to_string(),
            ClassMetrics {
                num_gt: m.num_gt,
                num_pred: m.entries.len(),
                ap,
                mean_ap,
                tp_errors: tp_errors(&m, preds, gts),
            },
        );
    }

    let n = per_class.len().max(1) as f64;
    let mean_of = |f: &dyn Fn(&ClassMetrics) -> f64| per_class.values().map(f).sum::<f64>() / n;
    let err = |c: &ClassMetrics| c.tp_errors.unwrap_or_else(TpErrors::worst);
    let map_3d = mean_of(&|c| c.mean_ap);
    let m_ate = mean_of(&|c| err(c).ate);
    let m_ase = mean_of(&|c| err(c).ase);
    let m_aoe = mean_of(&|c| err(c).aoe);
    // classes without velocity pairs are left out instead of counting as worst
    let aves: Vec<f64> = per_class.values().filter_map(|c| c.tp_errors.and_then(|e| e.ave)).collect();
    let m_ave = (!aves.is_empty()).then(|| aves.iter().sum::<f64>() / aves.len() as f64);
    let m_aae = 1.0;
    MetricsReport {
        nds: nds(map_3d, [m_ate, m_ase, m_aoe, m_ave.unwrap_or(1.0), m_aae]),
        adapted_nds: adapted_nds(map_3d, m_ate, m_ase, m_aoe),
        per_class,
        map_3d,
        m_ate,
        m_ase,
        m_aoe,
        m_ave,
        m_aae,
        map_2d: None,
    }
}

impl MetricsReport {
    /// Fixed-width plain-text summary.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let thresholds: Vec<f64> = self
            .per_class
            .values()
            .next()
            .map(|c| c.ap.iter().map(|a| a.threshold).collect())
            .unwrap_or_default();
        let _ = write!(s, "{:<24}{:>6}", "class", "gt");
        for t in &thresholds {
            let _ = write!(s, "{:>9}", format!("AP@{t}"));
        }
        let _ = writeln!(s, "{:>9}{:>8}{:>8}{:>8}", "mAP", "ATE", "ASE", "AOE");
        for (name, c) in &self.per_class {
            let _ = write!(s, "{:<24}{:>6}", name, c.num_gt);
            for a in &c.ap {
                let _ = write!(s, "{:>9.4}", a.ap);
            }
            let e = c.tp_errors.unwrap_or_else(TpErrors::worst);
            let _ = writeln!(s, "{:>9.4}{:>8.3}{:>8.3}{:>8.3}", c.mean_ap, e.ate, e.ase, e.aoe);
        }
        let _ = writeln!(s, "mAP3D        {:.4}", self.map_3d);
        let _ = writeln!(s, "mATE         {:.4}", self.m_ate);
        let _ = writeln!(s, "mASE         {:.4}", self.m_ase);
        let _ = writeln!(s, "mAOE         {:.4}", self.m_aoe);
        match self.m_ave {
            Some(v) => {
                let _ = writeln!(s, "mAVE         {v:.4}");
            }
            None => {
                let _ = writeln!(s, "mAVE         n/a");
            }
        }
        let _ = writeln!(s, "NDS          {:.4}", self.nds);
        let _ = writeln!(s, "adapted NDS  {:.4}", self.adapted_nds);
        if let Some(m) = self.map_2d {
            let _ = writeln!(s, "mAP2D        {m:.4}");
        }
        s
    }
}

/// Distance band `[lo, hi)` from the ego vehicle, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceBand {
    pub lo: f64,
    pub hi: f64,
}

pub fn default_bands() -> Vec<DistanceBand> {
    [(0.0, 10.0), (10.0, 20.0), (20.0, 30.0), (0.0, 50.0)]
        .into_iter()
        .map(|(lo, hi)| DistanceBand { lo, hi })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub band: DistanceBand,
    pub report: MetricsReport,
}

/// Re-evaluates on the boxes whose BEV distance from the frame's ego
/// position falls in each band. Frames without an ego position are
/// measured from the origin.
pub fn stratify(
    preds: &[ScoredAnnotation],
    gts: &[ScoredAnnotation],
    ego_xy: &HashMap<String, [f64; 2]>,
    bands: &[DistanceBand],
    cfg: &EvalConfig,
) -> Vec<BandReport> {
    let dist = |a: &ScoredAnnotation| {
        let e = ego_xy.get(&a.frame_id).copied().unwrap_or([0.0, 0.0]);
        (a.cuboid.center.x - e[0]).hypot(a.cuboid.center.y - e[1])
    };
    bands
        .iter()
        .map(|band| {
            let keep = |a: &&ScoredAnnotation| {
                let d = dist(a);
                d >= band.lo && d < band.hi
            };
            let p: Vec<ScoredAnnotation> = preds.iter().filter(keep).cloned().collect();
            let g: Vec<ScoredAnnotation> = gts.iter().filter(keep).cloned().collect();
            BandReport {
                band: *band,
                report: evaluate(&p, &g, cfg),
            }
        })
        .collect()
}

/// One 2D box for IoU-matched evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Box2DRecord {
    pub image_id: String,
    pub class_label: String,
    pub bbox: Box2D<f64>,
    pub score: f64,
}

/// 101-point AP with the monotone precision envelope and no clipping.
fn ap_101_envelope(is_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || is_tp.is_empty() {
        return 0.0;
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut rec = Vec::with_capacity(is_tp.len());
    let mut prec = Vec::with_capacity(is_tp.len());
    for &t in is_tp {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        rec.push(tp as f64 / num_gt as f64);
        prec.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let i = rec.partition_point(|&v| v < r);
            prec.get(i).copied().unwrap_or(0.0)
        })
        .sum::<f64>()
        / 101.0
}

/// Per-class AP at an IoU threshold, averaged over classes with ground truth.
pub fn map2d(preds: &[Box2DRecord], gts: &[Box2DRecord], iou_threshold: f64) -> f64 {
    let classes: BTreeSet<&str> = gts.iter().map(|g| g.class_label.as_str()).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for class in &classes {
        let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
        let mut num_gt = 0;
        for (i, g) in gts.iter().enumerate() {
            if g.class_label == *class {
                by_image.entry(g.image_id.as_str()).or_default().push(i);
                num_gt += 1;
            }
        }
        let mut order: Vec<usize> = (0..preds.len())
            .filter(|&i| preds[i].class_label == *class)
            .collect();
        order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
        let mut taken = vec![false; gts.len()];
        let is_tp: Vec<bool> = order
            .iter()
            .map(|&pi| {
                let p = &preds[pi];
                let mut best: Option<(f64, usize)> = None;
                for &gi in by_image.get(p.image_id.as_str()).into_iter().flatten() {
                    if taken[gi] {
                        continue;
                    }
                    let iou = iou_2d(&p.bbox, &gts[gi].bbox);
                    if iou >= iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                        best = Some((iou, gi));
                    }
                }
                if let Some((_, gi)) = best {
                    taken[gi] = true;
                }
                best.is_some()
            })
            .collect();
        total += ap_101_envelope(&is_tp, num_gt);
    }
    total / classes.len() as f64
}
