//! Detection and localization metrics for landmark-pair tracks.
//!
//! Predicted landmarks are paired greedily with ground-truth markers in
//! ascending distance order. A prediction is a true positive only when both
//! of its landmarks are paired closer than the matching radius.

use std::fmt::Write as _;

use serde::Serialize;

use crate::domain::{GroundTruth, Point2};
use crate::track::Track;
use crate::{Error, Result};

pub const DEFAULT_RADIUS: f64 = 5.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Matched predicted landmark, its ground-truth partner and their distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LandmarkMatch {
    pub frame: usize,
    pub predicted: Point2,
    pub truth: Point2,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MatchResult {
    pub per_frame: Vec<Counts>,
    /// Landmarks of true-positive predictions only.
    pub matches: Vec<LandmarkMatch>,
}

impl MatchResult {
    pub fn totals(&self) -> Counts {
        let mut c = Counts::default();
        for f in &self.per_frame {
            c += *f;
        }
        c
    }

    pub fn extend(&mut self, other: MatchResult) {
        self.per_frame.extend(other.per_frame);
        self.matches.extend(other.matches);
    }
}

/// Matches one frame's predictions against its ground truth.
pub fn match_frame(frame: usize, preds: &[[Point2; 2]], truth: Option<[Point2; 2]>, radius: f64) -> (Counts, Vec<LandmarkMatch>) {
    let Some(gt) = truth else {
        let counts = if preds.is_empty() {
            Counts { tn: 1, ..Counts::default() }
        } else {
            Counts {
                fp: preds.len(),
                ..Counts::default()
            }
        };
        return (counts, Vec::new());
    };
    // (distance, prediction, landmark, gt landmark), scanned in ascending order
    let mut pairs: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(preds.len() * 4);
    for (p, pred) in preds.iter().enumerate() {
        for (l, &pt) in pred.iter().enumerate() {
            for (g, &gp) in gt.iter().enumerate() {
                pairs.push((pt.distance(gp), p, l, g));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    let mut landmark_used = vec![[None::<(usize, f64)>; 2]; preds.len()];
    let mut gt_used = [false; 2];
    for (d, p, l, g) in pairs {
        if gt_used[g] || landmark_used[p][l].is_some() {
            continue;
        }
        gt_used[g] = true;
        landmark_used[p][l] = Some((g, d));
    }
    let mut counts = Counts::default();
    let mut matches = Vec::new();
    for (p, used) in landmark_used.iter().enumerate() {
        match used {
            [Some((ga, da)), Some((gb, db))] if *da < radius && *db < radius => {
                counts.tp += 1;
                for (l, (g, d)) in [(0, (*ga, *da)), (1, (*gb, *db))] {
                    matches.push(LandmarkMatch {
                        frame,
                        predicted: preds[p][l],
                        truth: gt[g],
                        distance: d,
                    });
                }
            }
            _ => counts.fp += 1,
        }
    }
    if counts.tp == 0 {
        counts.fn_ = 1;
    }
    (counts, matches)
}

/// Matches per-frame prediction lists against ground truth. Frames beyond
/// either side count as having nothing there.
pub fn match_predictions_multi(preds: &[Vec<[Point2; 2]>], gt: &GroundTruth, radius: f64) -> Result<MatchResult> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("matching radius must be > 0, got {radius}")));
    }
    let n = preds.len().max(gt.len());
    let mut out = MatchResult::default();
    for t in 0..n {
        let p = preds.get(t).map_or(&[][..], |v| v.as_slice());
        let (c, m) = match_frame(t, p, gt.markers(t), radius);
        out.per_frame.push(c);
        out.matches.extend(m);
    }
    Ok(out)
}

pub fn match_predictions(track: &Track, gt: &GroundTruth, radius: f64) -> Result<MatchResult> {
    let preds: Vec<Vec<[Point2; 2]>> = (0..track.len()).map(|t| track.markers(t).into_iter().collect()).collect();
    match_predictions_multi(&preds, gt, radius)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, F1 and accuracy. Zero denominators give 0, except
/// accuracy, which is 1 when every count is 0.
pub fn detection_metrics(c: Counts) -> DetectionMetrics {
    let all = c.tp + c.fp + c.fn_ + c.tn;
    DetectionMetrics {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fn_ + c.fp),
        accuracy: if all == 0 { 1.0 } else { ratio(c.tp + c.tn, all) },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Localization {
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

/// MAE and RMSE of Euclidean landmark distances; `None` without matches.
pub fn localization_metrics(m: &MatchResult) -> Option<Localization> {
    if m.matches.is_empty() {
        return None;
    }
    let n = m.matches.len() as f64;
    let mae = m.matches.iter().map(|x| x.distance).sum::<f64>() / n;
    let rmse = (m.matches.iter().map(|x| x.distance * x.distance).sum::<f64>() / n).sqrt();
    Some(Localization {
        mae,
        rmse,
        count: m.matches.len(),
    })
}

/// Everything an evaluation run reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub radius: f64,
    pub counts: Counts,
    pub detection: DetectionMetrics,
    pub localization: Option<Localization>,
    /// Unit of the true-negative count.
    pub tn_unit: &'static str,
}

impl EvalReport {
    pub fn from_matches(m: &MatchResult, radius: f64) -> Self {
        let counts = m.totals();
        Self {
            radius,
            counts,
            detection: detection_metrics(counts),
            localization: localization_metrics(m),
            tn_unit: "frame",
        }
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let d = &self.detection;
        let c = &self.counts;
        let _ = writeln!(s, "radius={}", self.radius);
        let _ = writeln!(s, "tp={}\nfp={}\nfn={}\ntn={}", c.tp, c.fp, c.fn_, c.tn);
        let _ = writeln!(s, "tn_unit={}", self.tn_unit);
        let _ = writeln!(s, "precision={}\nrecall={}\nf1={}\naccuracy={}", d.precision, d.recall, d.f1, d.accuracy);
        match &self.localization {
            Some(l) => {
                let _ = writeln!(s, "mae={}\nrmse={}\nmatched_landmarks={}", l.mae, l.rmse, l.count);
            }
            None => {
                let _ = writeln!(s, "mae=undefined\nrmse=undefined\nmatched_landmarks=0");
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
