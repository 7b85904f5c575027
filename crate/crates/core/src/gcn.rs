//! Graph network over the candidate graph: one weighted graph convolution,
//! two edge convolutions, a per-node bypass and a logistic head, with
//! hand-written reverse-mode gradients and a deterministic trainer.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::detect::{heatmap_loss, Heatmap};
use crate::graph::StentGraph;
use crate::kv::{KvFields, KvValue};
use crate::nn::{grad_check_flat, relu, seeded_rng, sigmoid, softplus, Dense, Optimizer, OptimizerKind};
use crate::propose::{classifier_loss_and_grad, join, parse_tagged, parse_values, weighted_cross_entropy, MlpParams};
use crate::{Error, Result};

/// Layer widths. The head reads `h3 + h1` features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcnDims {
    pub input: usize,
    pub h1: usize,
    pub h2: usize,
    pub h3: usize,
}

impl GcnDims {
    pub fn desk(input: usize) -> Self {
        Self {
            input,
            h1: 32,
            h2: 16,
            h3: 8,
        }
    }

    pub fn wide() -> Self {
        Self {
            input: 1024,
            h1: 256,
            h2: 128,
            h3: 64,
        }
    }

    pub fn head_input(&self) -> usize {
        self.h3 + self.h1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams {
    /// `input → h1`, applied to the normalized neighborhood average.
    pub wgcl: Dense,
    /// `2·h1 → h2` on `[x_i ‖ x_j]`.
    pub ecl1: Dense,
    /// `2·h2 → h3` on `[x_i ‖ x_j]`.
    pub ecl2: Dense,
    /// `input → h1`, per node.
    pub fc: Dense,
    /// `h3 + h1 → 1`.
    pub head: Dense,
    /// Node loss weights `[negative, positive]`.
    pub class_weights: [f64; 2],
}

impl GcnParams {
    pub fn zeros(dims: GcnDims) -> Self {
        Self {
            wgcl: Dense::zeros(dims.h1, dims.input),
            ecl1: Dense::zeros(dims.h2, 2 * dims.h1),
            ecl2: Dense::zeros(dims.h3, 2 * dims.h2),
            fc: Dense::zeros(dims.h1, dims.input),
            head: Dense::zeros(1, dims.head_input()),
            class_weights: [1.0, 1.0],
        }
    }

    pub fn init(dims: GcnDims, class_weights: [f64; 2], seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 0x67636e);
        Self {
            wgcl: Dense::init(dims.h1, dims.input, &mut rng),
            ecl1: Dense::init(dims.h2, 2 * dims.h1, &mut rng),
            ecl2: Dense::init(dims.h3, 2 * dims.h2, &mut rng),
            fc: Dense::init(dims.h1, dims.input, &mut rng),
            head: Dense::init(1, dims.head_input(), &mut rng),
            class_weights,
        }
    }

    pub fn dims(&self) -> GcnDims {
        GcnDims {
            input: self.wgcl.inp,
            h1: self.wgcl.out,
            h2: self.ecl1.out,
            h3: self.ecl2.out,
        }
    }

    fn layers(&self) -> [&Dense; 5] {
        [&self.wgcl, &self.ecl1, &self.ecl2, &self.fc, &self.head]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 5] {
        [&mut self.wgcl, &mut self.ecl1, &mut self.ecl2, &mut self.fc, &mut self.head]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            l.push_flat(&mut out);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut rest = flat;
        for l in self.layers_mut() {
            rest = l.read_flat(rest);
        }
        debug_assert!(rest.is_empty());
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| l.is_finite())
    }

    fn check_consistent(&self) -> Result<()> {
        let d = self.dims();
        let expect = [
            ("wgcl", d.h1, d.input),
            ("ecl1", d.h2, 2 * d.h1),
            ("ecl2", d.h3, 2 * d.h2),
            ("fc", d.h1, d.input),
            ("head", 1, d.head_input()),
        ];
        for ((name, out, inp), l) in expect.into_iter().zip(self.layers()) {
            let sized = l.weight.len() == l.out * l.inp && l.bias.len() == l.out;
            if l.out != out || l.inp != inp || !sized {
                return Err(Error::InvalidArgument(format!(
                    "gcn layer {name} is {}x{}, expected {out}x{inp}",
                    l.out, l.inp
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let d = self.dims();
        let mut s = String::new();
        let _ = writeln!(s, "gcn v1");
        let _ = writeln!(s, "dims {} {} {} {} {}", d.input, d.h1, d.h2, d.h3, d.head_input());
        let _ = writeln!(s, "class_weights {} {}", self.class_weights[0], self.class_weights[1]);
        for l in self.layers() {
            let _ = writeln!(s, "{}", join(&l.weight));
            let _ = writeln!(s, "{}", join(&l.bias));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse("gcn params", 0, format!("missing {what}")))
        };
        let (ln, header) = next("header")?;
        if header.trim() != "gcn v1" {
            return Err(Error::parse("gcn params", ln + 1, format!("expected `gcn v1`, got {header:?}")));
        }
        let (ln, dims) = next("dims")?;
        let dims = parse_tagged::<usize>(dims, "dims", ln)?;
        if dims.len() != 5 || dims[4] != dims[3] + dims[1] {
            return Err(Error::parse("gcn params", ln + 1, "dims must be `dims D h1 h2 h3 h3+h1`"));
        }
        let (ln, cw) = next("class_weights")?;
        let cw = parse_tagged::<f64>(cw, "class_weights", ln)?;
        if cw.len() != 2 {
            return Err(Error::parse("gcn params", ln + 1, "class_weights needs two values"));
        }
        let mut p = GcnParams::zeros(GcnDims {
            input: dims[0],
            h1: dims[1],
            h2: dims[2],
            h3: dims[3],
        });
        p.class_weights = [cw[0], cw[1]];
        for (name, layer) in ["wgcl", "ecl1", "ecl2", "fc", "head"].into_iter().zip(p.layers_mut()) {
            for (part, slot) in [("weights", &mut layer.weight), ("biases", &mut layer.bias)] {
                let (ln, line) = next(name)?;
                let vals = parse_values(line, ln)?;
                if vals.len() != slot.len() {
                    return Err(Error::parse(
                        "gcn params",
                        ln + 1,
                        format!("{name} {part}: expected {} values, got {}", slot.len(), vals.len()),
                    ));
                }
                *slot = vals;
            }
        }
        Ok(p)
    }
}

fn check_features(graph: &StentGraph, dim: usize, context: &'static str) -> Result<()> {
    match graph.feature_dim() {
        Some(d) if d != dim => Err(Error::DimensionMismatch {
            context,
            expected: dim,
            actual: d,
        }),
        _ => Ok(()),
    }
}

/// Normalized self-looped neighborhood sums `(x_i + Σ w_ij x_j) / (1 + Σ w_ij)`.
fn wgcl_aggregate(graph: &StentGraph) -> Vec<Vec<f64>> {
    (0..graph.len())
        .map(|i| {
            let mut acc = graph.features(i).to_vec();
            let mut deg = 1.0;
            for &(j, w) in graph.neighbors(i) {
                deg += w;
                for (a, v) in acc.iter_mut().zip(graph.features(j)) {
                    *a += w * v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= deg);
            acc
        })
        .collect()
}

/// Weighted graph convolution with self-loop, followed by ReLU.
pub fn wgcl_forward(graph: &StentGraph, theta: &Dense) -> Result<Vec<Vec<f64>>> {
    check_features(graph, theta.inp, "wgcl input features")?;
    Ok(wgcl_aggregate(graph)
        .iter()
        .map(|a| theta.forward(a).into_iter().map(relu).collect())
        .collect())
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// `A[x_i ‖ x_j] + c` splits as `(A_l x_i + c) + A_r x_j`; returns both
/// halves for every node.
fn ecl_halves(x: &[Vec<f64>], layer: &Dense) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let width = layer.inp / 2;
    let half = |v: &[f64], offset: usize, bias: bool| -> Vec<f64> {
        (0..layer.out)
            .map(|o| {
                let row = &layer.weight[o * layer.inp + offset..o * layer.inp + offset + width];
                let b = if bias { layer.bias[o] } else { 0.0 };
                b + row.iter().zip(v).map(|(w, a)| w * a).sum::<f64>()
            })
            .collect()
    };
    let left = x.iter().map(|v| half(v, 0, true)).collect();
    let right = x.iter().map(|v| half(v, width, false)).collect();
    (left, right)
}

/// Edge pre-activations `A[x_i ‖ x_j] + c`, indexed like `graph.neighbors(i)`.
fn ecl_pre(graph: &StentGraph, x: &[Vec<f64>], layer: &Dense) -> Vec<Vec<Vec<f64>>> {
    let (left, right) = ecl_halves(x, layer);
    (0..graph.len())
        .map(|i| {
            graph
                .neighbors(i)
                .iter()
                .map(|&(j, _)| left[i].iter().zip(&right[j]).map(|(a, b)| a + b).collect())
                .collect()
        })
        .collect()
}

fn ecl_sum(pre: &[Vec<Vec<f64>>], out: usize) -> Vec<Vec<f64>> {
    pre.iter()
        .map(|edges| {
            let mut acc = vec![0.0; out];
            for z in edges {
                for (a, &v) in acc.iter_mut().zip(z) {
                    *a += relu(v);
                }
            }
            acc
        })
        .collect()
}

fn check_ecl(graph: &StentGraph, x: &[Vec<f64>], layer: &Dense) -> Result<()> {
    if x.len() != graph.len() {
        return Err(Error::DimensionMismatch {
            context: "ecl node count",
            expected: graph.len(),
            actual: x.len(),
        });
    }
    if let Some(bad) = x.iter().find(|v| 2 * v.len() != layer.inp) {
        return Err(Error::DimensionMismatch {
            context: "ecl input features",
            expected: layer.inp / 2,
            actual: bad.len(),
        });
    }
    Ok(())
}

/// Edge convolution: `Σ_{j ∈ N(i)} ReLU(A[x_i ‖ x_j] + c)`. Isolated nodes get zeros.
pub fn ecl_forward(graph: &StentGraph, x: &[Vec<f64>], layer: &Dense) -> Result<Vec<Vec<f64>>> {
    check_ecl(graph, x, layer)?;
    Ok(ecl_sum(&ecl_pre(graph, x, layer), layer.out))
}

/// Every intermediate of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct GcnCache {
    agg: Vec<Vec<f64>>,
    z1: Vec<Vec<f64>>,
    pub h1: Vec<Vec<f64>>,
    z2: Vec<Vec<Vec<f64>>>,
    pub h2: Vec<Vec<f64>>,
    z3: Vec<Vec<Vec<f64>>>,
    pub h3: Vec<Vec<f64>>,
    zfc: Vec<Vec<f64>>,
    pub fc: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn gcn_forward_cached(graph: &StentGraph, params: &GcnParams) -> Result<GcnCache> {
    params.check_consistent()?;
    check_features(graph, params.wgcl.inp, "gcn input features")?;
    let agg = wgcl_aggregate(graph);
    let z1: Vec<Vec<f64>> = agg.iter().map(|a| params.wgcl.forward(a)).collect();
    let h1: Vec<Vec<f64>> = z1.iter().map(|z| z.iter().copied().map(relu).collect()).collect();
    let z2 = ecl_pre(graph, &h1, &params.ecl1);
    let h2 = ecl_sum(&z2, params.ecl1.out);
    let z3 = ecl_pre(graph, &h2, &params.ecl2);
    let h3 = ecl_sum(&z3, params.ecl2.out);
    let zfc: Vec<Vec<f64>> = (0..graph.len()).map(|i| params.fc.forward(graph.features(i))).collect();
    let fc: Vec<Vec<f64>> = zfc.iter().map(|z| z.iter().copied().map(relu).collect()).collect();
    let logits: Vec<f64> = (0..graph.len())
        .map(|i| params.head.forward(&concat(&h3[i], &fc[i]))[0])
        .collect();
    let probs = logits.iter().copied().map(sigmoid).collect();
    Ok(GcnCache {
        agg,
        z1,
        h1,
        z2,
        h2,
        z3,
        h3,
        zfc,
        fc,
        logits,
        probs,
    })
}

/// Per-node probability that the candidate is the tracked stent.
pub fn gcn_forward(graph: &StentGraph, params: &GcnParams) -> Result<Vec<f64>> {
    Ok(gcn_forward_cached(graph, params)?.probs)
}

/// Class-weighted binary cross entropy of one logit.
pub fn weighted_bce(logit: f64, label: bool, class_weights: [f64; 2]) -> f64 {
    if label {
        class_weights[1] * softplus(-logit)
    } else {
        class_weights[0] * softplus(logit)
    }
}

/// Mean weighted BCE over nodes; 0 for an empty set.
pub fn node_loss(logits: &[f64], labels: &[bool], class_weights: [f64; 2]) -> Result<f64> {
    check_labels(logits.len(), labels)?;
    let sum: f64 = logits.iter().zip(labels).map(|(&z, &y)| weighted_bce(z, y, class_weights)).sum();
    Ok(sum / logits.len().max(1) as f64)
}

fn check_labels(n: usize, labels: &[bool]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            context: "node labels",
            expected: n,
            actual: labels.len(),
        });
    }
    Ok(())
}

fn mask_relu(d: &mut [f64], pre: &[f64]) {
    for (g, &z) in d.iter_mut().zip(pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

fn ecl_backward(
    graph: &StentGraph,
    x: &[Vec<f64>],
    pre: &[Vec<Vec<f64>>],
    dout: &[Vec<f64>],
    layer: &Dense,
    grad: &mut Dense,
) -> Vec<Vec<f64>> {
    let width = layer.inp / 2;
    let n = graph.len();
    // Per-node sums of edge gradients, as the left (centre) and right
    // (neighbor) endpoint.
    let mut as_left = vec![vec![0.0; layer.out]; n];
    let mut as_right = vec![vec![0.0; layer.out]; n];
    for i in 0..n {
        for (&(j, _), z) in graph.neighbors(i).iter().zip(&pre[i]) {
            for o in 0..layer.out {
                if z[o] > 0.0 {
                    as_left[i][o] += dout[i][o];
                    as_right[j][o] += dout[i][o];
                }
            }
        }
    }
    let mut dx = vec![vec![0.0; width]; n];
    for i in 0..n {
        for o in 0..layer.out {
            let (l, r) = (as_left[i][o], as_right[i][o]);
            if l == 0.0 && r == 0.0 {
                continue;
            }
            grad.bias[o] += l;
            let base = o * layer.inp;
            for k in 0..width {
                grad.weight[base + k] += l * x[i][k];
                grad.weight[base + width + k] += r * x[i][k];
                dx[i][k] += l * layer.weight[base + k] + r * layer.weight[base + width + k];
            }
        }
    }
    dx
}

/// Sum (not mean) of the node loss over one graph and its parameter gradient.
fn node_loss_sum_and_grad(params: &GcnParams, graph: &StentGraph, labels: &[bool]) -> Result<(f64, GcnParams)> {
    check_labels(graph.len(), labels)?;
    let c = gcn_forward_cached(graph, params)?;
    let cw = params.class_weights;
    let mut g = GcnParams::zeros(params.dims());
    let d = params.dims();
    let mut loss = 0.0;
    let mut dh3 = vec![vec![0.0; d.h3]; graph.len()];
    let mut dcat = vec![0.0; d.head_input()];
    for i in 0..graph.len() {
        let y = labels[i];
        loss += weighted_bce(c.logits[i], y, cw);
        let p = c.probs[i];
        let dlogit = if y { cw[1] * (p - 1.0) } else { cw[0] * p };
        dcat.iter_mut().for_each(|v| *v = 0.0);
        params
            .head
            .backward(&concat(&c.h3[i], &c.fc[i]), &[dlogit], &mut g.head, Some(&mut dcat));
        dh3[i].copy_from_slice(&dcat[..d.h3]);
        let mut dzfc = dcat[d.h3..].to_vec();
        mask_relu(&mut dzfc, &c.zfc[i]);
        params.fc.backward(graph.features(i), &dzfc, &mut g.fc, None);
    }
    let dh2 = ecl_backward(graph, &c.h2, &c.z3, &dh3, &params.ecl2, &mut g.ecl2);
    let mut dh1 = ecl_backward(graph, &c.h1, &c.z2, &dh2, &params.ecl1, &mut g.ecl1);
    for i in 0..graph.len() {
        mask_relu(&mut dh1[i], &c.z1[i]);
        params.wgcl.backward(&c.agg[i], &dh1[i], &mut g.wgcl, None);
    }
    Ok((loss, g))
}

/// Mean node loss over all nodes of `graphs` and its gradient in the
/// [`GcnParams::to_flat`] layout. Graphs are evaluated in parallel and
/// reduced in input order, so the result does not depend on scheduling.
pub fn node_loss_and_grad(params: &GcnParams, graphs: &[(&StentGraph, &[bool])]) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<(f64, GcnParams)> = graphs
        .par_iter()
        .map(|(g, y)| node_loss_sum_and_grad(params, g, y))
        .collect::<Result<_>>()?;
    let nodes: usize = graphs.iter().map(|(g, _)| g.len()).sum();
    let scale = 1.0 / nodes.max(1) as f64;
    let mut grad = vec![0.0; params.param_count()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, v) in grad.iter_mut().zip(g.to_flat()) {
            *a += v;
        }
    }
    grad.iter_mut().for_each(|v| *v *= scale);
    Ok((loss * scale, grad))
}

/// Mean node loss over all nodes of `graphs`, without gradients.
pub fn node_loss_mean(params: &GcnParams, graphs: &[(&StentGraph, &[bool])]) -> Result<f64> {
    let sums: Vec<f64> = graphs
        .par_iter()
        .map(|(g, y)| {
            check_labels(g.len(), y)?;
            let logits = gcn_forward_cached(g, params)?.logits;
            Ok(logits.iter().zip(*y).map(|(&z, &l)| weighted_bce(z, l, params.class_weights)).sum())
        })
        .collect::<Result<_>>()?;
    let nodes: usize = graphs.iter().map(|(g, _)| g.len()).sum();
    Ok(sums.iter().sum::<f64>() / nodes.max(1) as f64)
}

/// Weights of the object and node terms in the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub heatmap: f64,
    pub object: f64,
    pub node: f64,
}

impl LossComponents {
    pub fn total(&self, w: LossWeights) -> f64 {
        self.heatmap + w.alpha * self.object + w.beta * self.node
    }
}

/// Inputs of the total loss for one batch.
pub struct LossInputs<'a> {
    pub heatmaps: &'a [(Heatmap, Heatmap)],
    pub lambda1: f64,
    pub lambda2: f64,
    pub object_logits: &'a [([f64; 2], bool)],
    pub object_class_weights: [f64; 2],
    pub node_logits: &'a [f64],
    pub node_labels: &'a [bool],
    pub node_class_weights: [f64; 2],
}

/// Heatmap loss (mean over heatmap pairs), mean weighted object cross
/// entropy and mean weighted node cross entropy. Empty parts contribute 0.
pub fn loss_components(inp: &LossInputs<'_>) -> Result<LossComponents> {
    let mut heatmap = 0.0;
    for (pred, gt) in inp.heatmaps {
        heatmap += heatmap_loss(pred, gt, inp.lambda1, inp.lambda2)?;
    }
    heatmap /= inp.heatmaps.len().max(1) as f64;
    let object = inp
        .object_logits
        .iter()
        .map(|&(z, y)| weighted_cross_entropy(z, y, inp.object_class_weights))
        .sum::<f64>()
        / inp.object_logits.len().max(1) as f64;
    let node = node_loss(inp.node_logits, inp.node_labels, inp.node_class_weights)?;
    Ok(LossComponents { heatmap, object, node })
}

pub fn total_loss(inp: &LossInputs<'_>, w: LossWeights) -> Result<f64> {
    Ok(loss_components(inp)?.total(w))
}

/// `α·L_obj + β·L_node` and its gradient over the concatenation of the
/// classifier's and the graph network's flat parameters (classifier first).
pub fn joint_loss_and_grad(
    mlp: &MlpParams,
    gcn: &GcnParams,
    objects: &[(&[f64], bool)],
    graphs: &[(&StentGraph, &[bool])],
    w: LossWeights,
) -> Result<(f64, Vec<f64>)> {
    if let Some((x, _)) = objects.iter().find(|(x, _)| x.len() != mlp.input_dim()) {
        return Err(Error::DimensionMismatch {
            context: "classifier input",
            expected: mlp.input_dim(),
            actual: x.len(),
        });
    }
    let (lo, go) = classifier_loss_and_grad(mlp, objects);
    let (ln, gn) = node_loss_and_grad(gcn, graphs)?;
    let mut grad: Vec<f64> = go.iter().map(|g| w.alpha * g).collect();
    grad.extend(gn.iter().map(|g| w.beta * g));
    Ok((w.alpha * lo + w.beta * ln, grad))
}

/// Largest scale-normalized gap between the analytic node-loss gradient and
/// central differences with relative step `step`. Models up to 10 000
/// parameters are checked exhaustively, larger ones on 400 seeded coordinates.
pub fn grad_check(params: &GcnParams, graph: &StentGraph, labels: &[bool], step: f64) -> Result<f64> {
    node_loss_sum_and_grad(params, graph, labels)?;
    let theta = params.to_flat();
    let pairs = [(graph, labels)];
    let f = |t: &[f64]| {
        let mut p = params.clone();
        p.set_flat(t);
        node_loss_and_grad(&p, &pairs).expect("dimensions checked above")
    };
    let max_coords = if theta.len() <= 10_000 { theta.len() } else { 400 };
    grad_check_flat(&theta, f, step, max_coords, 0x6763)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnTrainConfig {
    pub h1: usize,
    pub h2: usize,
    pub h3: usize,
    pub epochs: usize,
    /// Clips per gradient step; a value ≥ the clip count gives full-batch
    /// descent.
    pub batch_clips: usize,
    pub learning_rate: f64,
    /// L2 penalty coefficient, applied to the gradient only; the loss trace
    /// excludes it.
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub weight_negative: f64,
    pub weight_positive: f64,
    /// Multiplier of the node loss.
    pub beta: f64,
    pub seed: u64,
}

impl Default for GcnTrainConfig {
    fn default() -> Self {
        Self {
            h1: 32,
            h2: 16,
            h3: 8,
            epochs: 150,
            batch_clips: 8,
            learning_rate: 0.005,
            weight_decay: 0.0,
            optimizer: OptimizerKind::Adam,
            weight_negative: 1.0,
            weight_positive: 5.0,
            beta: 2.0,
            seed: 11,
        }
    }
}

impl KvFields for GcnTrainConfig {
    fn fields(&mut self) -> Vec<(&'static str, &mut dyn KvValue)> {
        vec![
            ("h1", &mut self.h1),
            ("h2", &mut self.h2),
            ("h3", &mut self.h3),
            ("epochs", &mut self.epochs),
            ("batch_clips", &mut self.batch_clips),
            ("learning_rate", &mut self.learning_rate),
            ("weight_decay", &mut self.weight_decay),
            ("optimizer", &mut self.optimizer),
            ("weight_negative", &mut self.weight_negative),
            ("weight_positive", &mut self.weight_positive),
            ("beta", &mut self.beta),
            ("seed", &mut self.seed),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.h1 == 0 || self.h2 == 0 || self.h3 == 0 {
            return Err(Error::config("h1", "layer widths must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        if self.batch_clips == 0 {
            return Err(Error::config("batch_clips", "must be > 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if !(self.weight_negative > 0.0 && self.weight_positive > 0.0) {
            return Err(Error::config("weight_positive", "class weights must be > 0"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("beta", "must be > 0"));
        }
        Ok(())
    }
}

/// One training clip: its graph and a label per node.
#[derive(Clone, Debug)]
pub struct LabeledGraph {
    pub graph: StentGraph,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct TrainedGcn {
    pub params: GcnParams,
    /// `β · L_node` over the whole dataset, before the first step and after each epoch.
    pub loss_trace: Vec<f64>,
}

impl TrainedGcn {
    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Full-batch training of `β · L_node` over all clips.
pub fn train_gcn(clips: &[LabeledGraph], cfg: &GcnTrainConfig) -> Result<TrainedGcn> {
    cfg.validate()?;
    let dim = clips
        .iter()
        .find_map(|c| c.graph.feature_dim())
        .ok_or_else(|| Error::DegenerateDataset("no graph nodes to train on".into()))?;
    let positives: usize = clips.iter().map(|c| c.labels.iter().filter(|&&y| y).count()).sum();
    let total: usize = clips.iter().map(|c| c.labels.len()).sum();
    if positives == 0 || positives == total {
        return Err(Error::DegenerateDataset(format!(
            "node classifier needs both classes ({positives} positive of {total})"
        )));
    }
    let dims = GcnDims {
        input: dim,
        h1: cfg.h1,
        h2: cfg.h2,
        h3: cfg.h3,
    };
    let mut params = GcnParams::init(dims, [cfg.weight_negative, cfg.weight_positive], cfg.seed);
    let pairs: Vec<(&StentGraph, &[bool])> = clips.iter().map(|c| (&c.graph, c.labels.as_slice())).collect();
    let mut flat = params.to_flat();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, flat.len());
    let mut rng = seeded_rng(cfg.seed, 0x6763_6e62);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let full_batch = cfg.batch_clips >= pairs.len();
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    trace.push(cfg.beta * node_loss_mean(&params, &pairs)?);
    for epoch in 0..cfg.epochs {
        if !full_batch {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(cfg.batch_clips) {
            let batch: Vec<(&StentGraph, &[bool])> = chunk.iter().map(|&k| pairs[k]).collect();
            let (_, mut grad) = node_loss_and_grad(&params, &batch)?;
            for (g, w) in grad.iter_mut().zip(&flat) {
                *g = cfg.beta * *g + cfg.weight_decay * w;
            }
            opt.step(&mut flat, &grad);
            params.set_flat(&flat);
        }
        trace.push(cfg.beta * node_loss_mean(&params, &pairs)?);
        if epoch % 25 == 0 {
            log::debug!("gcn epoch {epoch}: loss {:.6}", trace[trace.len() - 1]);
        }
    }
    Ok(TrainedGcn {
        params,
        loss_trace: trace,
    })
}
