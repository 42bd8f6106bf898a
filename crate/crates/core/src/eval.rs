//! Detection/classification scoring against point ground truth, plus the
//! test-time rule that integrates per-slice predictions into one decision
//! per nucleus.

use crate::error::{Error, Result};
use crate::model::AnnotationSet;

/// A predicted nucleus location with class and confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub z: u32,
    pub class_id: u32,
    /// In [0,1]; 1 when the producer does not score detections.
    pub confidence: f64,
}

impl Detection {
    pub fn new(x: f64, y: f64, z: u32, class_id: u32) -> Self {
        Self {
            x,
            y,
            z,
            class_id,
            confidence: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub det: usize,
    pub gt: usize,
    pub det_class: u32,
    pub gt_class: u32,
    pub distance: f64,
}

/// One-to-one matching between detections and ground-truth points.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    matched: Vec<MatchedPair>,
    det_classes: Vec<u32>,
    gt_classes: Vec<u32>,
}

impl MatchResult {
    pub fn matched(&self) -> &[MatchedPair] {
        &self.matched
    }

    pub fn tp(&self) -> usize {
        self.matched.len()
    }

    pub fn fp(&self) -> usize {
        self.det_classes.len() - self.matched.len()
    }

    pub fn fn_count(&self) -> usize {
        self.gt_classes.len() - self.matched.len()
    }

    pub fn detection_count(&self) -> usize {
        self.det_classes.len()
    }

    pub fn gt_count(&self) -> usize {
        self.gt_classes.len()
    }

    /// (TP_k, FP_k, FN_k) for class `k`: a true positive needs both sides
    /// matched and agreeing on `k`.
    pub fn class_counts(&self, k: u32) -> (usize, usize, usize) {
        let matched_det: std::collections::HashMap<usize, &MatchedPair> =
            self.matched.iter().map(|p| (p.det, p)).collect();
        let matched_gt: std::collections::HashMap<usize, &MatchedPair> =
            self.matched.iter().map(|p| (p.gt, p)).collect();
        let tp = self
            .matched
            .iter()
            .filter(|p| p.det_class == k && p.gt_class == k)
            .count();
        let fp = self
            .det_classes
            .iter()
            .enumerate()
            .filter(|&(i, &c)| {
                c == k
                    && match matched_det.get(&i) {
                        Some(p) => p.gt_class != k,
                        None => true,
                    }
            })
            .count();
        let fn_ = self
            .gt_classes
            .iter()
            .enumerate()
            .filter(|&(i, &c)| {
                c == k
                    && match matched_gt.get(&i) {
                        Some(p) => p.det_class != k,
                        None => true,
                    }
            })
            .count();
        (tp, fp, fn_)
    }

    /// All class ids appearing on either side, ascending.
    pub fn classes(&self) -> Vec<u32> {
        let mut all: Vec<u32> = self
            .det_classes
            .iter()
            .chain(self.gt_classes.iter())
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

fn candidate_pairs(dets: &[Detection], gts: &AnnotationSet, radius: f64) -> Vec<MatchedPair> {
    let mut cands = Vec::new();
    for (d, det) in dets.iter().enumerate() {
        for (g, gt) in gts.points().iter().enumerate() {
            let dx = det.x - gt.x as f64;
            let dy = det.y - gt.y as f64;
            let dist = (dx * dx + dy * dy).sqrt();
            if dist <= radius {
                cands.push(MatchedPair {
                    det: d,
                    gt: g,
                    det_class: det.class_id,
                    gt_class: gt.class_id,
                    distance: dist,
                });
            }
        }
    }
    cands
}

fn result_from_pairs(
    pairs: Vec<MatchedPair>,
    dets: &[Detection],
    gts: &AnnotationSet,
) -> MatchResult {
    MatchResult {
        matched: pairs,
        det_classes: dets.iter().map(|d| d.class_id).collect(),
        gt_classes: gts.points().iter().map(|p| p.class_id).collect(),
    }
}

/// Greedy one-to-one matching by ascending 2D distance (ties by detection
/// index, then ground-truth index); a pair is eligible iff its distance is
/// within `radius`.
pub fn match_points(dets: &[Detection], gts: &AnnotationSet, radius: f64) -> MatchResult {
    assert!(radius > 0.0, "matching radius must be positive");
    let mut cands = candidate_pairs(dets, gts, radius);
    cands.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.det.cmp(&b.det))
            .then(a.gt.cmp(&b.gt))
    });
    let mut det_used = vec![false; dets.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for c in cands {
        if !det_used[c.det] && !gt_used[c.gt] {
            det_used[c.det] = true;
            gt_used[c.gt] = true;
            pairs.push(c);
        }
    }
    result_from_pairs(pairs, dets, gts)
}

/// Exhaustive maximum-cardinality matching (minimal total distance among
/// maximum matchings). Exponential — intended for small instances and for
/// validating the greedy matcher.
pub fn match_points_exact(dets: &[Detection], gts: &AnnotationSet, radius: f64) -> MatchResult {
    assert!(radius > 0.0, "matching radius must be positive");
    let cands = candidate_pairs(dets, gts, radius);
    // Candidate pairs grouped by detection for the backtracking search.
    let mut by_det: Vec<Vec<&MatchedPair>> = vec![Vec::new(); dets.len()];
    for c in &cands {
        by_det[c.det].push(c);
    }
    struct Search<'a> {
        by_det: &'a [Vec<&'a MatchedPair>],
        gt_used: Vec<bool>,
        current: Vec<MatchedPair>,
        best: Vec<MatchedPair>,
        best_key: (usize, f64),
    }
    impl Search<'_> {
        fn run(&mut self, det: usize) {
            if det == self.by_det.len() {
                let dist: f64 = self.current.iter().map(|p| p.distance).sum();
                let key = (self.current.len(), -dist);
                if key.0 > self.best_key.0 || (key.0 == self.best_key.0 && key.1 > self.best_key.1)
                {
                    self.best_key = key;
                    self.best = self.current.clone();
                }
                return;
            }
            for &pair in &self.by_det[det] {
                if !self.gt_used[pair.gt] {
                    self.gt_used[pair.gt] = true;
                    self.current.push(*pair);
                    self.run(det + 1);
                    self.current.pop();
                    self.gt_used[pair.gt] = false;
                }
            }
            self.run(det + 1); // leave this detection unmatched
        }
    }
    let mut search = Search {
        by_det: &by_det,
        gt_used: vec![false; gts.len()],
        current: Vec::new(),
        best: Vec::new(),
        best_key: (0, f64::NEG_INFINITY),
    };
    search.run(0);
    let mut pairs = search.best;
    pairs.sort_by_key(|p| p.det);
    result_from_pairs(pairs, dets, gts)
}

/// Precision, recall, F1 from the match counts; 0/0 ratios are 0.
pub fn prf1(m: &MatchResult) -> (f64, f64, f64) {
    let tp = m.tp() as f64;
    let fp = m.fp() as f64;
    let fn_ = m.fn_count() as f64;
    let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    (
        ratio(tp, tp + fp),
        ratio(tp, tp + fn_),
        ratio(2.0 * tp, 2.0 * tp + fp + fn_),
    )
}

/// F1 for one class under the matched-and-correct convention.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ClassScore {
    pub class_id: u32,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub f1: f64,
}

/// Per-class F1 scores plus the class-agnostic detection F1.
pub fn classification_scores(m: &MatchResult) -> (Vec<ClassScore>, f64) {
    let mut scores = Vec::new();
    for k in m.classes() {
        let (tp, fp, fn_) = m.class_counts(k);
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
        scores.push(ClassScore {
            class_id: k,
            tp,
            fp,
            fn_count: fn_,
            f1,
        });
    }
    let (_, _, detection_f1) = prf1(m);
    (scores, detection_f1)
}

/// Per-slice detections chained into one physical nucleus.
#[derive(Debug, Clone, PartialEq)]
pub struct NucleusTrack {
    members: Vec<Detection>,
}

impl NucleusTrack {
    /// Members must be ordered by strictly increasing slice index.
    pub fn new(members: Vec<Detection>) -> Result<Self> {
        if members.windows(2).any(|w| w[1].z <= w[0].z) {
            return Err(Error::InvalidParameter(
                "track members must have strictly increasing slice indices".into(),
            ));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Detection] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Greedy nearest-neighbor chaining across consecutive slices.
/// `per_slice_dets[z]` holds slice z's detections; a detection joins the
/// track whose previous-slice tail is nearest within `link_radius`,
/// otherwise it starts a new track.
pub fn link_tracks(per_slice_dets: &[Vec<Detection>], link_radius: f64) -> Vec<NucleusTrack> {
    assert!(link_radius > 0.0, "link radius must be positive");
    let mut tracks: Vec<Vec<Detection>> = Vec::new();
    for (z, dets) in per_slice_dets.iter().enumerate() {
        // Tracks whose tail sits on the previous slice are open.
        let open: Vec<usize> = tracks
            .iter()
            .enumerate()
            .filter(|(_, t)| z > 0 && t.last().unwrap().z as usize == z - 1)
            .map(|(i, _)| i)
            .collect();
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (di, det) in dets.iter().enumerate() {
            for &ti in &open {
                let tail = tracks[ti].last().unwrap();
                let dx = det.x - tail.x;
                let dy = det.y - tail.y;
                let dist = (dx * dx + dy * dy).sqrt();
                if dist <= link_radius {
                    cands.push((dist, ti, di));
                }
            }
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; tracks.len()];
        let mut det_used = vec![false; dets.len()];
        for (_, ti, di) in cands {
            if !track_used[ti] && !det_used[di] {
                track_used[ti] = true;
                det_used[di] = true;
                tracks[ti].push(dets[di]);
            }
        }
        for (di, det) in dets.iter().enumerate() {
            if !det_used[di] {
                tracks.push(vec![*det]);
            }
        }
    }
    tracks
        .into_iter()
        .map(|members| NucleusTrack { members })
        .collect()
}

/// A track's integrated decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratedNucleus {
    pub class_id: u32,
    /// The member with the highest confidence (earliest slice on ties).
    pub representative: Detection,
}

/// Collapses a track to one prediction: positive (nonzero class) iff any
/// member is positive. The decision depends only on the member set, not
/// their order.
pub fn integrate_slices(track: &NucleusTrack) -> Result<IntegratedNucleus> {
    if track.is_empty() {
        return Err(Error::EmptyTrack);
    }
    let best = |members: &[Detection]| -> Detection {
        let mut best = members[0];
        for m in &members[1..] {
            if m.confidence > best.confidence || (m.confidence == best.confidence && m.z < best.z) {
                best = *m;
            }
        }
        best
    };
    let positives: Vec<Detection> = track
        .members
        .iter()
        .copied()
        .filter(|m| m.class_id != 0)
        .collect();
    let class_id = if positives.is_empty() {
        0
    } else {
        // Highest-confidence positive member decides the class (earliest
        // slice, then smallest class id, on ties).
        let mut decider = positives[0];
        for m in &positives[1..] {
            let better = m.confidence > decider.confidence
                || (m.confidence == decider.confidence
                    && (m.z < decider.z || (m.z == decider.z && m.class_id < decider.class_id)));
            if better {
                decider = *m;
            }
        }
        decider.class_id
    };
    Ok(IntegratedNucleus {
        class_id,
        representative: best(&track.members),
    })
}
