//! Spatiotemporal candidate graph.
//!
//! Nodes are stent candidates with their descriptors. Every candidate of one
//! frame is linked to every candidate of the next frame; edge weights combine
//! the mean object score with box overlap and pair-vector similarity.

use std::fmt::Write as _;

use serde_json::json;

use crate::domain::{iou, Point2, StentCandidate};
use crate::propose::FeatureVector;
use crate::{Error, Result};

/// Angle/length similarity of two landmark-pair vectors:
/// `max(0, |cos θ| − ||a|−|b|| / √(|a||b|))`. Zero for a zero-length vector.
pub fn al_similarity(a: Point2, b: Point2) -> f64 {
    let na = a.x.hypot(a.y);
    let nb = b.x.hypot(b.y);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let cos = (a.x * b.x + a.y * b.y).abs() / (na * nb);
    let len = (na - nb).abs() / (na * nb).sqrt();
    (cos - len).max(0.0)
}

/// `((S_i + S_j)/2) · (α1·IoU + α2·AL)` for candidates of adjacent frames.
pub fn edge_weight(a: &StentCandidate, b: &StentCandidate, alpha1: f64, alpha2: f64) -> f64 {
    let score = 0.5 * (a.score + b.score);
    score * (alpha1 * iou(&a.bbox, &b.bbox) + alpha2 * al_similarity(a.pair_vector(), b.pair_vector()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub frame: usize,
    pub candidate: StentCandidate,
    pub features: FeatureVector,
}

/// Undirected weighted graph; each edge `(i, j)` is stored once with `i < j`.
#[derive(Clone, Debug, PartialEq)]
pub struct StentGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<(usize, usize)>,
    weights: Vec<f64>,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl StentGraph {
    /// Assembles a graph from explicit parts, checking the edge invariants.
    pub fn from_parts(nodes: Vec<GraphNode>, edges: Vec<(usize, usize)>, weights: Vec<f64>) -> Result<Self> {
        if edges.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                context: "edge weights",
                expected: edges.len(),
                actual: weights.len(),
            });
        }
        let n = nodes.len();
        if let Some(first) = nodes.first() {
            let dim = first.features.dim();
            if let Some(bad) = nodes.iter().find(|nd| nd.features.dim() != dim) {
                return Err(Error::DimensionMismatch {
                    context: "node feature dimension",
                    expected: dim,
                    actual: bad.features.dim(),
                });
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        for (&(i, j), &w) in edges.iter().zip(&weights) {
            if i >= j || j >= n {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) must satisfy i < j < {n}")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) has weight {w}")));
            }
            adjacency[i].push((j, w));
            adjacency[j].push((i, w));
        }
        for (i, adj) in adjacency.iter_mut().enumerate() {
            adj.sort_by_key(|&(j, _)| j);
            if adj.windows(2).any(|p| p[0].0 == p[1].0) {
                return Err(Error::InvalidArgument(format!("duplicate edge at node {i}")));
            }
        }
        Ok(Self {
            nodes,
            edges,
            weights,
            adjacency,
        })
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Neighbors of `i` with edge weights, in ascending index order.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.nodes.first().map(|n| n.features.dim())
    }

    pub fn features(&self, i: usize) -> &[f64] {
        self.nodes[i].features.as_slice()
    }

    /// Debug dump: one JSON object per node, then one per edge.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let [a, b] = n.candidate.positions();
            let rec = json!({
                "node": i,
                "frame": n.frame,
                "m1": [a.x, a.y],
                "m2": [b.x, b.y],
                "score": n.candidate.score,
            });
            let _ = writeln!(s, "{rec}");
        }
        for (&(i, j), w) in self.edges.iter().zip(&self.weights) {
            let _ = writeln!(s, "{}", json!({"edge": [i, j], "weight": w}));
        }
        s
    }
}

/// Builds the graph for consecutive frames. `frames[t]` holds the candidates
/// (with descriptors) of the `t`-th frame of the clip; candidates of frames
/// `t` and `t + 1` are fully connected. An empty frame leaves no edges across
/// it.
pub fn build_graph(frames: &[Vec<(StentCandidate, FeatureVector)>], alpha1: f64, alpha2: f64) -> StentGraph {
    let mut nodes = Vec::new();
    let mut ranges = Vec::with_capacity(frames.len());
    for cands in frames {
        let start = nodes.len();
        nodes.extend(cands.iter().map(|(c, f)| GraphNode {
            frame: c.frame,
            candidate: *c,
            features: f.clone(),
        }));
        ranges.push(start..nodes.len());
    }
    let mut edges = Vec::new();
    let mut weights = Vec::new();
    for pair in ranges.windows(2) {
        for i in pair[0].clone() {
            for j in pair[1].clone() {
                edges.push((i, j));
                weights.push(edge_weight(&nodes[i].candidate, &nodes[j].candidate, alpha1, alpha2));
            }
        }
    }
    StentGraph::from_parts(nodes, edges, weights).expect("adjacent-frame edges are well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::LandmarkDetection;
    use proptest::prelude::*;

    fn cand(frame: usize, a: (f64, f64), b: (f64, f64), s: f64) -> StentCandidate {
        StentCandidate::from_pair(
            LandmarkDetection::new(Point2::new(a.0, a.1), s, frame),
            LandmarkDetection::new(Point2::new(b.0, b.1), s, frame),
        )
    }

    #[test]
    fn al_examples() {
        let v = Point2::new(5.0, 0.0);
        assert_eq!(al_similarity(v, v), 1.0);
        assert_eq!(al_similarity(Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)), 0.0);
        // 1 − 2/√3 < 0
        assert_eq!(al_similarity(Point2::new(3.0, 0.0), Point2::new(1.0, 0.0)), 0.0);
        assert_eq!(al_similarity(Point2::new(0.0, 0.0), v), 0.0);
        // opposite direction counts as parallel
        assert_eq!(al_similarity(Point2::new(-5.0, 0.0), v), 1.0);
    }

    #[test]
    fn edge_weight_examples() {
        let a = cand(0, (0.0, 0.0), (20.0, 10.0), 1.0);
        let b = cand(1, (0.0, 0.0), (20.0, 10.0), 1.0);
        assert!((edge_weight(&a, &b, 0.5, 0.5) - 1.0).abs() < 1e-12);

        let far = cand(1, (100.0, 100.0), (100.0, 110.0), 1.0);
        let horiz = cand(0, (0.0, 0.0), (10.0, 0.0), 1.0);
        assert_eq!(edge_weight(&horiz, &far, 0.5, 0.5), 0.0);

        // S = 0.8 / 0.6, IoU = 1/3, AL = 1 (horizontal 10 px pairs, shifted 5 px)
        let p = cand(0, (-5.0, 0.0), (5.0, 0.0), 0.8);
        let q = cand(1, (0.0, 0.0), (10.0, 0.0), 0.6);
        let area = 10.0 * 8.0;
        let overlap = 5.0 * 8.0;
        let want_iou = overlap / (2.0 * area - overlap);
        assert!((iou(&p.bbox, &q.bbox) - want_iou).abs() < 1e-15);
        let want = 0.7 * (0.5 * want_iou + 0.5 * 1.0);
        assert!((edge_weight(&p, &q, 0.5, 0.5) - want).abs() < 1e-12);
    }

    #[test]
    fn edge_weight_with_third_overlap() {
        // Square boxes via MIN_SIDE: centers 5 px apart horizontally, 10x10 boxes.
        let p = cand(0, (-5.0, -5.0), (5.0, 5.0), 0.8);
        let q = cand(1, (0.0, -5.0), (10.0, 5.0), 0.6);
        assert!((iou(&p.bbox, &q.bbox) - 1.0 / 3.0).abs() < 1e-12);
        assert!((al_similarity(p.pair_vector(), q.pair_vector()) - 1.0).abs() < 1e-12);
        let w = edge_weight(&p, &q, 0.5, 0.5);
        assert!((w - 0.7 * (1.0 / 6.0 + 0.5)).abs() < 1e-12, "{w}");
        assert!((w - 0.4667).abs() < 1e-4);
    }

    fn frames_with(counts: &[usize]) -> Vec<Vec<(StentCandidate, FeatureVector)>> {
        counts
            .iter()
            .enumerate()
            .map(|(t, &n)| {
                (0..n)
                    .map(|k| {
                        let x = 10.0 * k as f64;
                        (cand(t, (x, 0.0), (x + 20.0, 5.0), 0.9), FeatureVector(vec![k as f64, 1.0]))
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn bipartite_edge_counts() {
        assert_eq!(build_graph(&frames_with(&[2, 3, 1]), 0.5, 0.5).edges().len(), 9);
        assert_eq!(build_graph(&frames_with(&[4]), 0.5, 0.5).edges().len(), 0);
        assert_eq!(build_graph(&frames_with(&[2, 0, 2]), 0.5, 0.5).edges().len(), 0);
    }

    #[test]
    fn from_parts_rejects_bad_edges() {
        let g = build_graph(&frames_with(&[1, 1]), 0.5, 0.5);
        let nodes = g.nodes().to_vec();
        assert!(StentGraph::from_parts(nodes.clone(), vec![(1, 0)], vec![0.5]).is_err());
        assert!(StentGraph::from_parts(nodes.clone(), vec![(0, 2)], vec![0.5]).is_err());
        assert!(StentGraph::from_parts(nodes.clone(), vec![(0, 1), (0, 1)], vec![0.5, 0.5]).is_err());
        assert!(StentGraph::from_parts(nodes, vec![(0, 1)], vec![-1.0]).is_err());
    }

    #[test]
    fn jsonl_dump_has_one_line_per_item() {
        let g = build_graph(&frames_with(&[2, 2]), 0.5, 0.5);
        assert_eq!(g.to_jsonl().lines().count(), 4 + 4);
    }

    fn arb_cand(frame: usize) -> impl Strategy<Value = StentCandidate> {
        (0.0..100.0f64, 0.0..100.0f64, 0.0..100.0f64, 0.0..100.0f64, 0.0..=1.0f64, 0.0..=1.0f64).prop_map(
            move |(ax, ay, bx, by, sa, sb)| {
                StentCandidate::from_pair(
                    LandmarkDetection::new(Point2::new(ax, ay), sa, frame),
                    LandmarkDetection::new(Point2::new(bx, by), sb, frame),
                )
            },
        )
    }

    proptest! {
        #[test]
        fn edge_count_formula(counts in proptest::collection::vec(0usize..5, 0..6)) {
            let g = build_graph(&frames_with(&counts), 0.5, 0.5);
            let want: usize = counts.windows(2).map(|w| w[0] * w[1]).sum();
            prop_assert_eq!(g.edges().len(), want);
            for &(i, j) in g.edges() {
                prop_assert!(i < j);
                prop_assert_eq!(g.nodes()[j].frame, g.nodes()[i].frame + 1);
            }
        }

        #[test]
        fn weight_symmetric_and_bounded(a in arb_cand(0), b in arb_cand(1), alpha in 0.0..=1.0f64) {
            let w = edge_weight(&a, &b, alpha, 1.0 - alpha);
            prop_assert_eq!(w, edge_weight(&b, &a, alpha, 1.0 - alpha));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&w));
        }

        #[test]
        fn weight_increases_with_score(a in arb_cand(0), b in arb_cand(1), bump in 0.01..0.5f64) {
            let sim = 0.5 * iou(&a.bbox, &b.bbox) + 0.5 * al_similarity(a.pair_vector(), b.pair_vector());
            prop_assume!(sim > 0.0);
            let mut hi = a;
            hi.score = a.score + bump;
            prop_assert!(edge_weight(&hi, &b, 0.5, 0.5) > edge_weight(&a, &b, 0.5, 0.5));
        }
    }
}
