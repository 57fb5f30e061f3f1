//! Track-based score refinement.
//!
//! Cuboids of consecutive frames are linked greedily by ascending BEV
//! center distance within a per-class radius. A missed frame ends a track.
//! Every member of a track then takes the track's mean score.

use crate::ingest::ScoredAnnotation;
use crate::taxonomy::Taxonomy;

/// Reference to `frames[frame][index]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemberRef {
    pub frame: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Track {
    pub track_id: u64,
    pub class_label: String,
    /// Strictly increasing frames.
    pub members: Vec<MemberRef>,
}

fn bev_dist(a: &ScoredAnnotation, b: &ScoredAnnotation) -> f64 {
    let d = a.cuboid.center - b.cuboid.center;
    d.x.hypot(d.y)
}

fn radius(tax: &Taxonomy, class: &str) -> f64 {
    tax.get(class).map(|c| c.match_radius).unwrap_or(2.0)
}

/// Greedy frame-to-frame association. Track ids follow first appearance
/// (frame order, then index within the frame). Classes missing from the
/// taxonomy use a 2 m radius.
pub fn associate(frames: &[Vec<ScoredAnnotation>], tax: &Taxonomy) -> Vec<Track> {
    let mut tracks: Vec<Track> = Vec::new();
    // track index owning each annotation of the previous frame
    let mut prev_owner: Vec<usize> = Vec::new();
    for (f, anns) in frames.iter().enumerate() {
        let mut owner = vec![usize::MAX; anns.len()];
        if f > 0 {
            let prev = &frames[f - 1];
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for (i, a) in prev.iter().enumerate() {
                let r = radius(tax, &a.class_label);
                for (j, b) in anns.iter().enumerate() {
                    if a.class_label != b.class_label {
                        continue;
                    }
                    let d = bev_dist(a, b);
                    if d <= r {
                        pairs.push((d, i, j));
                    }
                }
            }
            pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut used_prev = vec![false; prev.len()];
            for (_, i, j) in pairs {
                if used_prev[i] || owner[j] != usize::MAX {
                    continue;
                }
                used_prev[i] = true;
                owner[j] = prev_owner[i];
                tracks[prev_owner[i]].members.push(MemberRef { frame: f, index: j });
            }
        }
        for (j, a) in anns.iter().enumerate() {
            if owner[j] == usize::MAX {
                owner[j] = tracks.len();
                tracks.push(Track {
                    track_id: tracks.len() as u64,
                    class_label: a.class_label.clone(),
                    members: vec![MemberRef { frame: f, index: j }],
                });
            }
        }
        prev_owner = owner;
    }
    tracks
}

/// Replaces each member's score by its track's mean score and stamps the
/// track id. Other fields are left alone.
pub fn refine_scores(tracks: &[Track], frames: &mut [Vec<ScoredAnnotation>]) {
    for t in tracks {
        let n = t.members.len() as f64;
        let mean = t
            .members
            .iter()
            .map(|m| frames[m.frame][m.index].score)
            .sum::<f64>()
            / n;
        for m in &t.members {
            let a = &mut frames[m.frame][m.index];
            if t.members.len() > 1 {
                a.score = mean.clamp(0.0, 1.0);
            }
            a.track_id = Some(t.track_id);
        }
    }
}

/// BEV velocity per member by finite differences over timestamps
/// (microseconds): central inside the track, one-sided at the ends.
/// Single-member tracks get `None`.
pub fn estimate_velocity(
    track: &Track,
    frames: &[Vec<ScoredAnnotation>],
    timestamps: &[i64],
) -> Vec<Option<[f64; 2]>> {
    let n = track.members.len();
    if n < 2 {
        return vec![None; n];
    }
    let pos = |k: usize| {
        let m = track.members[k];
        let c = frames[m.frame][m.index].cuboid.center;
        (c.x, c.y, timestamps[m.frame] as f64 * 1e-6)
    };
    (0..n)
        .map(|k| {
            let (a, b) = if k == 0 {
                (0, 1)
            } else if k == n - 1 {
                (n - 2, n - 1)
            } else {
                (k - 1, k + 1)
            };
            let (xa, ya, ta) = pos(a);
            let (xb, yb, tb) = pos(b);
            let dt = tb - ta;
            Some([(xb - xa) / dt, (yb - ya) / dt])
        })
        .collect()
}

/// Associates, refines scores and (optionally) fills velocities in place.
pub fn refine_sequence(
    frames: &mut [Vec<ScoredAnnotation>],
    timestamps: &[i64],
    tax: &Taxonomy,
    with_velocity: bool,
) -> Vec<Track> {
    let tracks = associate(frames, tax);
    refine_scores(&tracks, frames);
    if with_velocity {
        for t in &tracks {
            for (m, v) in t.members.iter().zip(estimate_velocity(t, frames, timestamps)) {
                frames[m.frame][m.index].velocity = v;
            }
        }
    }
    tracks
}
