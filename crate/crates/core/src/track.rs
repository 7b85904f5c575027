//! End-to-end inference and the baseline trackers.
//!
//! A sequence is cut into overlapping clips. Each clip runs detection,
//! proposal, graph construction and node classification, then feeds the node
//! probabilities back into the detector heatmaps and re-scores. Clip results
//! are merged per frame by maximum probability before one candidate per frame
//! is selected.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{correct_heatmap, detections_from_heatmap, tophat_heatmap, DetectorParams};
use crate::domain::{GrayFrame, LandmarkDetection, Point2, Sequence, StentCandidate};
use crate::gcn::{gcn_forward, GcnParams};
use crate::graph::{build_graph, StentGraph};
use crate::kv::{KvFields, KvValue};
use crate::propose::{classify_object, patch_descriptor, propose_candidates, FeatureVector, MlpParams, ProposalConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    /// Highest-probability candidate, kept only at or above the threshold.
    ThresholdArgmax,
    /// The two landmarks with the strongest candidate support.
    Top2Markers,
}

impl KvValue for SelectionMode {
    fn to_kv(&self) -> String {
        match self {
            SelectionMode::ThresholdArgmax => "threshold-argmax".into(),
            SelectionMode::Top2Markers => "top2-markers".into(),
        }
    }

    fn set_kv(&mut self, s: &str) -> std::result::Result<(), String> {
        *self = match s {
            "threshold-argmax" => SelectionMode::ThresholdArgmax,
            "top2-markers" => SelectionMode::Top2Markers,
            other => return Err(format!("expected threshold-argmax or top2-markers, got {other:?}")),
        };
        Ok(())
    }
}

/// Inference settings. The detector and proposal sections are configured
/// under their own key prefixes; [`KvFields`] covers the remaining scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub detector: DetectorParams,
    pub proposal: ProposalConfig,
    pub alpha1: f64,
    pub alpha2: f64,
    pub threshold: f64,
    pub mode: SelectionMode,
    pub correction_window: usize,
    pub correction_passes: usize,
    pub clip_length: usize,
    pub clip_stride: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detector: DetectorParams::default(),
            proposal: ProposalConfig::default(),
            alpha1: 0.5,
            alpha2: 0.5,
            threshold: 0.6,
            mode: SelectionMode::ThresholdArgmax,
            correction_window: 9,
            correction_passes: 1,
            clip_length: 10,
            clip_stride: 5,
        }
    }
}

impl KvFields for PipelineConfig {
    fn fields(&mut self) -> Vec<(&'static str, &mut dyn KvValue)> {
        vec![
            ("alpha1", &mut self.alpha1),
            ("alpha2", &mut self.alpha2),
            ("threshold", &mut self.threshold),
            ("mode", &mut self.mode),
            ("correction_window", &mut self.correction_window),
            ("correction_passes", &mut self.correction_passes),
            ("clip_length", &mut self.clip_length),
            ("clip_stride", &mut self.clip_stride),
        ]
    }

    fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.proposal.validate()?;
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return Err(Error::config("alpha1", "edge weighting factors must be >= 0"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold", "must lie in (0, 1)"));
        }
        if self.correction_window % 2 == 0 {
            return Err(Error::config("correction_window", "must be odd"));
        }
        if self.clip_length < 2 {
            return Err(Error::config("clip_length", "must be >= 2"));
        }
        if self.clip_stride == 0 || self.clip_stride > self.clip_length {
            return Err(Error::config("clip_stride", "must lie in [1, clip_length]"));
        }
        Ok(())
    }
}

/// Trained classifier and graph network.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub mlp: MlpParams,
    pub gcn: GcnParams,
}

impl Models {
    /// Checks that both models read descriptors of the configured size.
    pub fn check(&self, cfg: &PipelineConfig) -> Result<()> {
        let d = cfg.proposal.descriptor_dim();
        for (context, actual) in [("classifier input", self.mlp.input_dim()), ("gcn input", self.gcn.dims().input)] {
            if actual != d {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: d,
                    actual,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: StentCandidate,
    pub prob: f64,
}

/// At most one selected candidate per frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Track {
    pub frames: Vec<Option<ScoredCandidate>>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TrackRecord {
    Present { frame: usize, m1: [f64; 2], m2: [f64; 2], prob: f64 },
    Absent { frame: usize, none: bool },
}

impl Track {
    pub fn empty(n: usize) -> Self {
        Self { frames: vec![None; n] }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn selection_count(&self) -> usize {
        self.frames.iter().flatten().count()
    }

    /// Marker positions of frame `t`, if selected.
    pub fn markers(&self, t: usize) -> Option<[Point2; 2]> {
        self.frames.get(t).copied().flatten().map(|s| s.candidate.positions())
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for (t, sel) in self.frames.iter().enumerate() {
            let rec = match sel {
                Some(sel) => {
                    let [a, b] = sel.candidate.positions();
                    TrackRecord::Present {
                        frame: t,
                        m1: [a.x, a.y],
                        m2: [b.x, b.y],
                        prob: sel.prob,
                    }
                }
                None => TrackRecord::Absent { frame: t, none: true },
            };
            let _ = writeln!(s, "{}", serde_json::to_string(&rec).expect("track record serializes"));
        }
        s
    }

    /// Parses JSON-lines; the track spans frames `0..=max frame`, unlisted
    /// frames have no selection. Landmark scores are set to the probability.
    pub fn from_jsonl(text: &str, source_name: &str) -> Result<Self> {
        let mut frames: Vec<Option<ScoredCandidate>> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrackRecord =
                serde_json::from_str(line).map_err(|e| Error::parse(source_name, ln + 1, e.to_string()))?;
            let (frame, sel) = match rec {
                TrackRecord::Present { frame, m1, m2, prob } => {
                    let lm = |p: [f64; 2]| LandmarkDetection::new(Point2::new(p[0], p[1]), prob, frame);
                    let mut candidate = StentCandidate::from_pair(lm(m1), lm(m2));
                    candidate.score = prob;
                    (frame, Some(ScoredCandidate { candidate, prob }))
                }
                TrackRecord::Absent { frame, none } => {
                    if !none {
                        return Err(Error::parse(source_name, ln + 1, "`none` must be true"));
                    }
                    (frame, None)
                }
            };
            if frame >= frames.len() {
                frames.resize(frame + 1, None);
            }
            frames[frame] = sel;
        }
        Ok(Self { frames })
    }
}

/// Start indices of the processing clips; the last clip ends at `n`.
pub fn clip_starts(n: usize, length: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s < n {
        starts.push(s);
        if s + length >= n {
            break;
        }
        s += stride;
    }
    starts
}

fn frame_candidates(
    frame: &GrayFrame,
    dets: &[LandmarkDetection],
    cfg: &PipelineConfig,
    mlp: &MlpParams,
) -> Result<Vec<(StentCandidate, FeatureVector)>> {
    let mut out = Vec::new();
    for c in propose_candidates(dets, &cfg.proposal) {
        let f = patch_descriptor(frame, &c, &cfg.proposal);
        if cfg.proposal.score_floor > 0.0 && classify_object(&f, mlp)? < cfg.proposal.score_floor {
            continue;
        }
        out.push((c, f));
    }
    Ok(out)
}

/// Maximum probability among nodes containing each detection; 0 if none does.
fn detection_support(dets: &[LandmarkDetection], scored: &[ScoredCandidate]) -> Vec<f64> {
    dets.iter()
        .map(|d| {
            scored
                .iter()
                .filter(|s| s.candidate.contains_landmark(d.position))
                .map(|s| s.prob)
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Graph of one clip, as seen by the final scoring pass.
pub struct ClipGraph {
    pub graph: StentGraph,
    pub probs: Vec<f64>,
}

/// Scores every candidate of a clip; `first_index` is the sequence index of
/// `frames[0]`. Returns per-frame scored candidates and the last graph.
pub fn score_clip(
    frames: &[GrayFrame],
    first_index: usize,
    cfg: &PipelineConfig,
    models: &Models,
) -> Result<(Vec<Vec<ScoredCandidate>>, ClipGraph)> {
    let mut heatmaps: Vec<_> = frames.iter().map(|f| tophat_heatmap(f, cfg.detector.radius)).collect();
    let mut dets: Vec<Vec<LandmarkDetection>> = heatmaps
        .iter()
        .enumerate()
        .map(|(k, hm)| detections_from_heatmap(hm, &cfg.detector, first_index + k))
        .collect();
    let mut pass = 0;
    loop {
        let per_frame: Vec<Vec<(StentCandidate, FeatureVector)>> = frames
            .iter()
            .zip(&dets)
            .map(|(f, d)| frame_candidates(f, d, cfg, &models.mlp))
            .collect::<Result<_>>()?;
        let graph = build_graph(&per_frame, cfg.alpha1, cfg.alpha2);
        let probs = gcn_forward(&graph, &models.gcn)?;
        let mut scored = Vec::with_capacity(frames.len());
        let mut offset = 0;
        for cands in &per_frame {
            scored.push(
                cands
                    .iter()
                    .zip(&probs[offset..offset + cands.len()])
                    .map(|((c, _), &prob)| ScoredCandidate { candidate: *c, prob })
                    .collect::<Vec<_>>(),
            );
            offset += cands.len();
        }
        if pass == cfg.correction_passes {
            return Ok((scored, ClipGraph { graph, probs }));
        }
        for k in 0..frames.len() {
            let support = detection_support(&dets[k], &scored[k]);
            heatmaps[k] = correct_heatmap(&heatmaps[k], &dets[k], &support, cfg.correction_window)?;
            dets[k] = detections_from_heatmap(&heatmaps[k], &cfg.detector, first_index + k);
        }
        pass += 1;
    }
}

type CandidateKey = [u64; 4];

fn key(c: &StentCandidate) -> CandidateKey {
    let [a, b] = c.positions();
    [a.x.to_bits(), a.y.to_bits(), b.x.to_bits(), b.y.to_bits()]
}

/// Keeps the higher-probability entry; equal probabilities fall back to the
/// candidate score, then to the landmark scores, so the result does not
/// depend on arrival order.
fn better(a: &ScoredCandidate, b: &ScoredCandidate) -> bool {
    a.prob
        .total_cmp(&b.prob)
        .then(a.candidate.score.total_cmp(&b.candidate.score))
        .then(a.candidate.landmarks[0].score.total_cmp(&b.candidate.landmarks[0].score))
        .then(a.candidate.landmarks[1].score.total_cmp(&b.candidate.landmarks[1].score))
        .is_gt()
}

/// Merges clip outputs into per-frame candidate lists: the same candidate
/// (identical landmark coordinates) seen in several clips keeps its maximum
/// probability. Each frame's list is sorted by landmark coordinates.
pub fn merge_clips(n_frames: usize, clips: &[(usize, Vec<Vec<ScoredCandidate>>)]) -> Vec<Vec<ScoredCandidate>> {
    let mut maps: Vec<BTreeMap<CandidateKey, ScoredCandidate>> = vec![BTreeMap::new(); n_frames];
    for (start, frames) in clips {
        for (k, cands) in frames.iter().enumerate() {
            let map = &mut maps[start + k];
            for c in cands {
                map.entry(key(&c.candidate))
                    .and_modify(|e| {
                        if better(c, e) {
                            *e = *c;
                        }
                    })
                    .or_insert(*c);
            }
        }
    }
    maps.into_iter().map(|m| m.into_values().collect()).collect()
}

/// Per-frame selection from scored candidates.
pub fn select(frames: &[Vec<ScoredCandidate>], mode: SelectionMode, threshold: f64) -> Track {
    let pick = |cands: &Vec<ScoredCandidate>| match mode {
        SelectionMode::ThresholdArgmax => {
            let mut best: Option<&ScoredCandidate> = None;
            for c in cands {
                if best.is_none_or(|b| c.prob > b.prob) {
                    best = Some(c);
                }
            }
            best.filter(|b| b.prob >= threshold).copied()
        }
        SelectionMode::Top2Markers => top2_markers(cands),
    };
    Track {
        frames: frames.iter().map(pick).collect(),
    }
}

fn top2_markers(cands: &[ScoredCandidate]) -> Option<ScoredCandidate> {
    let mut support: Vec<(LandmarkDetection, f64)> = Vec::new();
    for c in cands {
        for l in c.candidate.landmarks {
            match support.iter_mut().find(|(s, _)| s.position == l.position) {
                Some(entry) => entry.1 = entry.1.max(c.prob),
                None => support.push((l, c.prob)),
            }
        }
    }
    support.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.position.lex_cmp(&b.0.position)));
    let [(a, pa), (b, pb)] = [*support.first()?, *support.get(1)?];
    let candidate = StentCandidate::from_pair(a, b);
    let prob = cands
        .iter()
        .find(|c| key(&c.candidate) == key(&candidate))
        .map_or(pa.min(pb), |c| c.prob);
    Some(ScoredCandidate { candidate, prob })
}

/// Scores all candidates of a sequence (clips in parallel, merged in a fixed order).
pub fn score_sequence(seq: &Sequence, cfg: &PipelineConfig, models: &Models) -> Result<Vec<Vec<ScoredCandidate>>> {
    cfg.validate()?;
    models.check(cfg)?;
    let n = seq.len();
    let clips: Vec<(usize, Vec<Vec<ScoredCandidate>>)> = clip_starts(n, cfg.clip_length, cfg.clip_stride)
        .into_par_iter()
        .map(|s| {
            let end = (s + cfg.clip_length).min(n);
            score_clip(&seq.frames[s..end], s, cfg, models).map(|(scored, _)| (s, scored))
        })
        .collect::<Result<_>>()?;
    Ok(merge_clips(n, &clips))
}

/// Full pipeline: detection, proposals, graph network, correction, selection.
pub fn track_sequence(seq: &Sequence, cfg: &PipelineConfig, models: &Models) -> Result<Track> {
    Ok(select(&score_sequence(seq, cfg, models)?, cfg.mode, cfg.threshold))
}

/// Baseline: the two highest-scoring detections of each frame, paired.
pub fn detection_only_track(seq: &Sequence, cfg: &PipelineConfig) -> Track {
    let frames = seq
        .frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let mut dets = detections_from_heatmap(&tophat_heatmap(f, cfg.detector.radius), &cfg.detector, t);
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            match dets.as_slice() {
                [a, b, ..] => {
                    let candidate = StentCandidate::from_pair(*a, *b);
                    Some(ScoredCandidate {
                        candidate,
                        prob: candidate.score,
                    })
                }
                _ => None,
            }
        })
        .collect();
    Track { frames }
}

/// Per-frame candidates scored by the object classifier alone.
pub fn classifier_scores(seq: &Sequence, cfg: &PipelineConfig, mlp: &MlpParams) -> Result<Vec<Vec<ScoredCandidate>>> {
    seq.frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let dets = detections_from_heatmap(&tophat_heatmap(f, cfg.detector.radius), &cfg.detector, t);
            propose_candidates(&dets, &cfg.proposal)
                .into_iter()
                .map(|c| {
                    let prob = classify_object(&patch_descriptor(f, &c, &cfg.proposal), mlp)?;
                    Ok(ScoredCandidate { candidate: c, prob })
                })
                .collect()
        })
        .collect()
}

/// Baseline: the classifier's best candidate per frame, if above threshold.
pub fn classifier_track(seq: &Sequence, cfg: &PipelineConfig, mlp: &MlpParams) -> Result<Track> {
    Ok(select(&classifier_scores(seq, cfg, mlp)?, SelectionMode::ThresholdArgmax, cfg.threshold))
}

/// Guards `log(0)` on edge weights.
pub const VITERBI_EPS: f64 = 1e-9;

fn edge_between(graph: &StentGraph, i: usize, j: usize) -> f64 {
    let adj = graph.neighbors(i);
    adj.binary_search_by_key(&j, |&(k, _)| k).map_or(0.0, |p| adj[p].1)
}

/// Runs of consecutive frames, each a list of node index groups per frame.
fn chains(graph: &StentGraph) -> Vec<Vec<Vec<usize>>> {
    let mut by_frame: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, n) in graph.nodes().iter().enumerate() {
        by_frame.entry(n.frame).or_default().push(i);
    }
    let mut out: Vec<Vec<Vec<usize>>> = Vec::new();
    let mut prev: Option<usize> = None;
    for (frame, nodes) in by_frame {
        match (prev, out.last_mut()) {
            (Some(p), Some(chain)) if frame == p + 1 => chain.push(nodes),
            _ => out.push(vec![nodes]),
        }
        prev = Some(frame);
    }
    out
}

/// Objective of a path given as one node per frame of each chain, summed
/// chain by chain: `Σ log s + Σ log(w + ε)`.
pub fn path_objective(graph: &StentGraph, scores: &[f64], path: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut k = 0;
    for chain in chains(graph) {
        let nodes = &path[k..k + chain.len()];
        let mut acc = scores[nodes[0]].ln();
        for w in nodes.windows(2) {
            acc = scores[w[1]].ln() + (acc + (edge_between(graph, w[0], w[1]) + VITERBI_EPS).ln());
        }
        total += acc;
        k += chain.len();
    }
    total
}

/// Best one-node-per-frame path by dynamic programming, frames in ascending
/// order. Frames without nodes split the trellis into independent chains.
/// Ties go to the lower node index.
pub fn viterbi_path(graph: &StentGraph, scores: &[f64]) -> Result<Vec<usize>> {
    if scores.len() != graph.len() {
        return Err(Error::DimensionMismatch {
            context: "viterbi node scores",
            expected: graph.len(),
            actual: scores.len(),
        });
    }
    let mut path = Vec::new();
    for chain in chains(graph) {
        let mut value: Vec<f64> = chain[0].iter().map(|&i| scores[i].ln()).collect();
        let mut back: Vec<Vec<usize>> = Vec::with_capacity(chain.len());
        for t in 1..chain.len() {
            let mut next = Vec::with_capacity(chain[t].len());
            let mut ptr = Vec::with_capacity(chain[t].len());
            for &j in &chain[t] {
                let mut best = (f64::NEG_INFINITY, 0);
                for (p, &i) in chain[t - 1].iter().enumerate() {
                    let v = value[p] + (edge_between(graph, i, j) + VITERBI_EPS).ln();
                    if p == 0 || v > best.0 {
                        best = (v, p);
                    }
                }
                next.push(scores[j].ln() + best.0);
                ptr.push(best.1);
            }
            back.push(ptr);
            value = next;
        }
        let mut k = 0;
        for p in 1..value.len() {
            if value[p] > value[k] {
                k = p;
            }
        }
        let mut chosen = vec![0; chain.len()];
        chosen[chain.len() - 1] = k;
        for t in (1..chain.len()).rev() {
            k = back[t - 1][k];
            chosen[t - 1] = k;
        }
        path.extend(chosen.iter().enumerate().map(|(t, &p)| chain[t][p]));
    }
    Ok(path)
}

/// Viterbi decoding of a graph into a track of `n_frames` frames.
pub fn viterbi_track(graph: &StentGraph, scores: &[f64], n_frames: usize) -> Result<Track> {
    let mut track = Track::empty(n_frames);
    for i in viterbi_path(graph, scores)? {
        let node = &graph.nodes()[i];
        if node.frame < n_frames {
            track.frames[node.frame] = Some(ScoredCandidate {
                candidate: node.candidate,
                prob: scores[i],
            });
        }
    }
    Ok(track)
}

/// Baseline: Viterbi over the whole sequence with classifier probabilities as
/// node scores and the usual edge weights.
pub fn viterbi_sequence_track(seq: &Sequence, cfg: &PipelineConfig, mlp: &MlpParams) -> Result<Track> {
    let per_frame: Vec<Vec<(StentCandidate, FeatureVector)>> = seq
        .frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let dets = detections_from_heatmap(&tophat_heatmap(f, cfg.detector.radius), &cfg.detector, t);
            propose_candidates(&dets, &cfg.proposal)
                .into_iter()
                .map(|c| (c, patch_descriptor(f, &c, &cfg.proposal)))
                .collect()
        })
        .collect();
    let graph = build_graph(&per_frame, cfg.alpha1, cfg.alpha2);
    let scores = (0..graph.len())
        .map(|i| classify_object(&graph.nodes()[i].features, mlp))
        .collect::<Result<Vec<_>>>()?;
    viterbi_track(&graph, &scores, seq.len())
}
