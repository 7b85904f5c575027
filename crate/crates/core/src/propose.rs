//! Stent proposal: pairing landmark detections into scored candidates,
//! extracting an oriented-patch appearance descriptor for each, and the
//! weighted cross-entropy object classifier trained on those descriptors.

use std::fmt::Write as _;

use rand::Rng;

use crate::domain::{GrayFrame, LandmarkDetection, StentCandidate, MIN_SIDE};
use crate::kv::{KvFields, KvValue};
use crate::nn::{relu, seeded_rng, Dense, Optimizer, OptimizerKind};
use crate::{Error, Result};

/// Number of summary statistics appended to the descriptor grid.
pub const SUMMARY_STATS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalConfig {
    pub min_distance: f64,
    /// `inf` disables the upper gate.
    pub max_distance: f64,
    pub length_bins: usize,
    pub width_bins: usize,
    /// Candidates whose classifier probability falls below this are dropped
    /// before graph construction. 0 keeps every candidate.
    pub score_floor: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            min_distance: 12.0,
            max_distance: 200.0,
            length_bins: 16,
            width_bins: 4,
            score_floor: 0.0,
        }
    }
}

impl ProposalConfig {
    pub fn descriptor_dim(&self) -> usize {
        self.length_bins * self.width_bins + SUMMARY_STATS
    }
}

impl KvFields for ProposalConfig {
    fn fields(&mut self) -> Vec<(&'static str, &mut dyn KvValue)> {
        vec![
            ("min_distance", &mut self.min_distance),
            ("max_distance", &mut self.max_distance),
            ("length_bins", &mut self.length_bins),
            ("width_bins", &mut self.width_bins),
            ("score_floor", &mut self.score_floor),
        ]
    }

    fn validate(&self) -> Result<()> {
        if !(self.min_distance > 0.0 && self.min_distance < self.max_distance) {
            return Err(Error::config("min_distance", "need 0 < min_distance < max_distance"));
        }
        if self.length_bins == 0 || self.width_bins == 0 {
            return Err(Error::config("length_bins", "descriptor grid must be nonempty"));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::config("score_floor", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Every unordered pair of same-frame detections whose separation lies in
/// `[min_distance, max_distance]`, in input order `(0,1), (0,2), …`.
pub fn propose_candidates(dets: &[LandmarkDetection], cfg: &ProposalConfig) -> Vec<StentCandidate> {
    let mut out = Vec::new();
    for i in 0..dets.len() {
        for j in i + 1..dets.len() {
            let d = dets[i].position.distance(dets[j].position);
            if d >= cfg.min_distance && d <= cfg.max_distance {
                out.push(StentCandidate::from_pair(dets[i], dets[j]));
            }
        }
    }
    out
}

/// L2-normalized appearance descriptor of a candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn mean_std_min_max(xs: &[f64]) -> [f64; 4] {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [mean, var.sqrt(), min, max]
}

/// Oriented-patch descriptor.
///
/// An `L × W` grid is sampled bilinearly (clamped at the borders) along the
/// landmark-pair axis, across a band of width `max(0.25·d, MIN_SIDE)`. The
/// grid is standardized to zero mean and unit variance (all zeros when
/// constant) and followed by mean/std/min/max of the band and of the two 5×5
/// marker neighborhoods, in intensity/255 units. The whole vector is then
/// L2-normalized.
pub fn patch_descriptor(frame: &GrayFrame, cand: &StentCandidate, cfg: &ProposalConfig) -> FeatureVector {
    let [p0, p1] = cand.positions();
    let d = p0.distance(p1);
    let (ux, uy) = if d > 0.0 {
        ((p1.x - p0.x) / d, (p1.y - p0.y) / d)
    } else {
        (1.0, 0.0)
    };
    let (vx, vy) = (-uy, ux);
    let band = (0.25 * d).max(MIN_SIDE);

    let mut grid = Vec::with_capacity(cfg.length_bins * cfg.width_bins);
    for k in 0..cfg.length_bins {
        let t = (k as f64 + 0.5) / cfg.length_bins as f64 * d;
        for m in 0..cfg.width_bins {
            let s = ((m as f64 + 0.5) / cfg.width_bins as f64 - 0.5) * band;
            grid.push(frame.sample_clamped(p0.x + t * ux + s * vx, p0.y + t * uy + s * vy) / 255.0);
        }
    }
    let mut neighborhoods = Vec::with_capacity(50);
    for p in [p0, p1] {
        for dy in -2..=2 {
            for dx in -2..=2 {
                neighborhoods.push(frame.sample_clamped(p.x + dx as f64, p.y + dy as f64) / 255.0);
            }
        }
    }
    let band_stats = mean_std_min_max(&grid);
    let marker_stats = mean_std_min_max(&neighborhoods);

    let mut values = Vec::with_capacity(cfg.descriptor_dim());
    let [mean, std, _, _] = band_stats;
    if std > 1e-12 {
        values.extend(grid.iter().map(|v| (v - mean) / std));
    } else {
        values.extend(std::iter::repeat_n(0.0, grid.len()));
    }
    values.extend_from_slice(&band_stats);
    values.extend_from_slice(&marker_stats);

    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    }
    FeatureVector(values)
}

/// Two-layer perceptron `D → H → 2` with per-class loss weights
/// (index 0 = negative, 1 = positive).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub hidden: Dense,
    pub output: Dense,
    pub class_weights: [f64; 2],
}

impl MlpParams {
    pub fn init(input: usize, hidden: usize, class_weights: [f64; 2], seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 0x6d6c70);
        Self {
            hidden: Dense::init(hidden, input, &mut rng),
            output: Dense::init(2, hidden, &mut rng),
            class_weights,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            hidden: Dense::zeros(hidden, input),
            output: Dense::zeros(2, hidden),
            class_weights: [1.0, 1.0],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.inp
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.hidden.param_count() + self.output.param_count());
        self.hidden.push_flat(&mut v);
        self.output.push_flat(&mut v);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let rest = self.hidden.read_flat(flat);
        let rest = self.output.read_flat(rest);
        debug_assert!(rest.is_empty());
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "object classifier input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Raw class logits `[negative, positive]`.
    pub fn logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        self.check_dim(x)?;
        let h: Vec<f64> = self.hidden.forward(x).into_iter().map(relu).collect();
        let z = self.output.forward(&h);
        Ok([z[0], z[1]])
    }

    /// Plain-text serialization: `mlp v1` header, dims, class weights, then
    /// each layer's row-major weights and biases.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mlp v1");
        let _ = writeln!(s, "dims {} {} 2", self.hidden.inp, self.hidden.out);
        let _ = writeln!(s, "class_weights {} {}", self.class_weights[0], self.class_weights[1]);
        for layer in [&self.hidden, &self.output] {
            let _ = writeln!(s, "{}", join(&layer.weight));
            let _ = writeln!(s, "{}", join(&layer.bias));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse("mlp params", 0, format!("missing {what}")))
        };
        let (ln, header) = next("header")?;
        if header.trim() != "mlp v1" {
            return Err(Error::parse("mlp params", ln + 1, format!("expected `mlp v1`, got {header:?}")));
        }
        let (ln, dims) = next("dims")?;
        let dims = parse_tagged::<usize>(dims, "dims", ln)?;
        if dims.len() != 3 || dims[2] != 2 {
            return Err(Error::parse("mlp params", ln + 1, "dims must be `dims D H 2`"));
        }
        let (ln, cw) = next("class_weights")?;
        let cw = parse_tagged::<f64>(cw, "class_weights", ln)?;
        if cw.len() != 2 {
            return Err(Error::parse("mlp params", ln + 1, "class_weights needs two values"));
        }
        let mut p = MlpParams::zeros(dims[0], dims[1]);
        p.class_weights = [cw[0], cw[1]];
        for (name, slot) in [
            ("hidden weights", &mut p.hidden.weight),
            ("hidden biases", &mut p.hidden.bias),
            ("output weights", &mut p.output.weight),
            ("output biases", &mut p.output.bias),
        ] {
            let (ln, line) = next(name)?;
            let vals = parse_values(line, ln)?;
            if vals.len() != slot.len() {
                return Err(Error::parse(
                    "mlp params",
                    ln + 1,
                    format!("{name}: expected {} values, got {}", slot.len(), vals.len()),
                ));
            }
            *slot = vals;
        }
        Ok(p)
    }
}

pub(crate) fn join(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s
}

pub(crate) fn parse_values(line: &str, ln: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::parse("params", ln + 1, format!("{t:?}: {e}")))
        })
        .collect()
}

pub(crate) fn parse_tagged<T: std::str::FromStr>(line: &str, tag: &str, ln: usize) -> Result<Vec<T>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(tag) {
        return Err(Error::parse("params", ln + 1, format!("expected `{tag} …`")));
    }
    it.map(|t| {
        t.parse::<T>()
            .map_err(|_| Error::parse("params", ln + 1, format!("bad {tag} value {t:?}")))
    })
    .collect()
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Positive-class probability of the object classifier.
pub fn classify_object(x: &FeatureVector, params: &MlpParams) -> Result<f64> {
    Ok(class_probabilities(x, params)?[1])
}

pub fn class_probabilities(x: &FeatureVector, params: &MlpParams) -> Result<[f64; 2]> {
    Ok(softmax2(params.logits(x.as_slice())?))
}

/// Class-weighted cross entropy of one sample from its logits:
/// `−w_y log softmax(z)_y`.
pub fn weighted_cross_entropy(logits: [f64; 2], label: bool, class_weights: [f64; 2]) -> f64 {
    let y = label as usize;
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    class_weights[y] * (lse - logits[y])
}

/// Mean weighted cross entropy over `samples` and its gradient with respect
/// to the flattened parameters (layout of [`MlpParams::to_flat`]).
pub fn classifier_loss_and_grad(params: &MlpParams, samples: &[(&[f64], bool)]) -> (f64, Vec<f64>) {
    let mut g_hidden = Dense::zeros(params.hidden.out, params.hidden.inp);
    let mut g_output = Dense::zeros(2, params.hidden.out);
    let n = samples.len().max(1) as f64;
    let mut loss = 0.0;
    for &(x, label) in samples {
        let pre = params.hidden.forward(x);
        let h: Vec<f64> = pre.iter().copied().map(relu).collect();
        let z = params.output.forward(&h);
        let z = [z[0], z[1]];
        let w = params.class_weights[label as usize];
        loss += weighted_cross_entropy(z, label, params.class_weights);
        let p = softmax2(z);
        let y = label as usize;
        let dz: Vec<f64> = (0..2)
            .map(|k| w * (p[k] - if k == y { 1.0 } else { 0.0 }) / n)
            .collect();
        let mut dh = vec![0.0; h.len()];
        params.output.backward(&h, &dz, &mut g_output, Some(&mut dh));
        for (d, &a) in dh.iter_mut().zip(&pre) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        params.hidden.backward(x, &dh, &mut g_hidden, None);
    }
    let mut grad = Vec::with_capacity(g_hidden.param_count() + g_output.param_count());
    g_hidden.push_flat(&mut grad);
    g_output.push_flat(&mut grad);
    (loss / n, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_negative: f64,
    pub weight_positive: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            weight_negative: 1.0,
            weight_positive: 5.0,
            seed: 7,
        }
    }
}

impl KvFields for ClassifierTrainConfig {
    fn fields(&mut self) -> Vec<(&'static str, &mut dyn KvValue)> {
        vec![
            ("hidden", &mut self.hidden),
            ("epochs", &mut self.epochs),
            ("batch_size", &mut self.batch_size),
            ("learning_rate", &mut self.learning_rate),
            ("optimizer", &mut self.optimizer),
            ("weight_negative", &mut self.weight_negative),
            ("weight_positive", &mut self.weight_positive),
            ("seed", &mut self.seed),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::config("hidden", "hidden width and batch_size must be > 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if !(self.weight_negative > 0.0 && self.weight_positive > 0.0) {
            return Err(Error::config("weight_positive", "class weights must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub params: MlpParams,
    /// Mean loss over the full dataset after each epoch.
    pub loss_trace: Vec<f64>,
}

impl TrainedClassifier {
    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Mini-batch training of the object classifier on labeled descriptors.
/// Batches follow a seeded permutation per epoch, so training is a pure
/// function of the data and the config.
pub fn train_object_classifier(
    dataset: &[(FeatureVector, bool)],
    cfg: &ClassifierTrainConfig,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    let positives = dataset.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == dataset.len() {
        return Err(Error::DegenerateDataset(format!(
            "object classifier needs both classes ({positives} positive of {})",
            dataset.len()
        )));
    }
    let dim = dataset[0].0.dim();
    if let Some((x, _)) = dataset.iter().find(|(x, _)| x.dim() != dim) {
        return Err(Error::DimensionMismatch {
            context: "classifier dataset",
            expected: dim,
            actual: x.dim(),
        });
    }
    let mut params = MlpParams::init(dim, cfg.hidden, [cfg.weight_negative, cfg.weight_positive], cfg.seed);
    let mut flat = params.to_flat();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, flat.len());
    let mut rng = seeded_rng(cfg.seed, 0x62617463);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let all: Vec<(&[f64], bool)> = dataset.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], bool)> = chunk.iter().map(|&i| all[i]).collect();
            let (_, grad) = classifier_loss_and_grad(&params, &batch);
            opt.step(&mut flat, &grad);
            params.set_flat(&flat);
        }
        trace.push(classifier_loss_and_grad(&params, &all).0);
    }
    Ok(TrainedClassifier {
        params,
        loss_trace: trace,
    })
}

/// Fraction of samples whose thresholded (0.5) prediction matches the label.
pub fn classifier_accuracy(params: &MlpParams, dataset: &[(FeatureVector, bool)]) -> Result<f64> {
    let mut right = 0usize;
    for (x, y) in dataset {
        if (classify_object(x, params)? >= 0.5) == *y {
            right += 1;
        }
    }
    Ok(right as f64 / dataset.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_flat;
    use proptest::prelude::*;
    use rand::Rng;
    use crate::domain::Point2;

    fn det(x: f64, y: f64, s: f64) -> LandmarkDetection {
        LandmarkDetection::new(Point2::new(x, y), s, 0)
    }

    #[test]
    fn pair_score_is_mean() {
        let c = propose_candidates(&[det(0.0, 0.0, 0.8), det(20.0, 0.0, 0.6)], &ProposalConfig::default());
        assert_eq!(c.len(), 1);
        assert!((c[0].score - 0.7).abs() < 1e-12);
    }

    #[test]
    fn all_pairs_in_range() {
        let d = [det(0.0, 0.0, 1.0), det(30.0, 0.0, 1.0), det(0.0, 30.0, 1.0), det(30.0, 30.0, 1.0)];
        assert_eq!(propose_candidates(&d, &ProposalConfig::default()).len(), 6);
        assert!(propose_candidates(&d[..1], &ProposalConfig::default()).is_empty());
    }

    #[test]
    fn close_pair_is_gated() {
        let cfg = ProposalConfig {
            min_distance: 10.0,
            ..ProposalConfig::default()
        };
        let d = [det(0.0, 0.0, 1.0), det(2.0, 0.0, 1.0), det(40.0, 0.0, 1.0)];
        // pairs: (0,1) 2 px gated, (0,2) 40, (1,2) 38
        assert_eq!(propose_candidates(&d, &cfg).len(), 2);
    }

    fn textured_frame() -> GrayFrame {
        GrayFrame::from_fn(64, 64, |x, y| ((x * 7 + y * 13) % 97 + 50) as u8)
    }

    #[test]
    fn descriptor_deterministic_and_order_invariant() {
        let f = textured_frame();
        let cfg = ProposalConfig::default();
        let a = det(10.0, 20.0, 0.9);
        let b = det(40.5, 31.0, 0.7);
        let c1 = StentCandidate::from_pair(a, b);
        let c2 = StentCandidate::from_pair(b, a);
        let d1 = patch_descriptor(&f, &c1, &cfg);
        assert_eq!(d1, patch_descriptor(&f, &c1, &cfg));
        assert_eq!(d1, patch_descriptor(&f, &c2, &cfg));
        assert_eq!(d1.dim(), 72);
        assert!((d1.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_frame_descriptor() {
        let f = GrayFrame::filled(64, 64, 102);
        let cfg = ProposalConfig::default();
        let c = StentCandidate::from_pair(det(10.0, 10.0, 1.0), det(50.0, 30.0, 1.0));
        let d = patch_descriptor(&f, &c, &cfg);
        let grid = cfg.length_bins * cfg.width_bins;
        assert!(d.0[..grid].iter().all(|&v| v == 0.0));
        // stats: (c, 0, c, c) twice with c = 0.4, norm = 0.4·√6
        let c = 102.0 / 255.0;
        let norm = c * 6f64.sqrt();
        let want = [c, 0.0, c, c, c, 0.0, c, c].map(|v| v / norm);
        for (got, want) in d.0[grid..].iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((d.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_params_give_half() {
        let p = MlpParams::zeros(72, 8);
        let x = FeatureVector(vec![0.3; 72]);
        assert_eq!(classify_object(&x, &p).unwrap(), 0.5);
        assert!(classify_object(&FeatureVector(vec![0.0; 5]), &p).is_err());
    }

    #[test]
    fn crafted_logit_gap() {
        let mut p = MlpParams::zeros(3, 1);
        p.output.bias = vec![0.0, 10.0];
        let prob = classify_object(&FeatureVector(vec![1.0, 2.0, 3.0]), &p).unwrap();
        assert!((prob - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-15);
        assert!((prob - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn class_weight_scales_loss_linearly() {
        let z = [2.0, -1.0];
        let l1 = weighted_cross_entropy(z, true, [1.0, 1.0]);
        let l10 = weighted_cross_entropy(z, true, [1.0, 10.0]);
        assert!((l10 - 10.0 * l1).abs() < 1e-12);
    }

    fn separable(n: usize) -> Vec<(FeatureVector, bool)> {
        // Two clusters on either side of a hyperplane, embedded in 8 dims.
        let mut rng = seeded_rng(11, 1);
        (0..n)
            .map(|i| {
                let y = i % 2 == 0;
                let a: f64 = rng.random_range(0.2..1.0) * if y { 1.0 } else { -1.0 };
                let b: f64 = rng.random_range(-1.0..1.0);
                let mut v = vec![0.0; 8];
                v[0] = a;
                v[3] = b;
                v[5] = 0.5 * a - 0.25 * b;
                (FeatureVector(v), y)
            })
            .collect()
    }

    #[test]
    fn learns_separable_data() {
        let data = separable(200);
        let cfg = ClassifierTrainConfig {
            weight_positive: 1.0,
            ..ClassifierTrainConfig::default()
        };
        let trained = train_object_classifier(&data, &cfg).unwrap();
        assert!(classifier_accuracy(&trained.params, &data).unwrap() >= 0.95);
        let again = train_object_classifier(&data, &cfg).unwrap();
        assert_eq!(trained.params, again.params);
    }

    #[test]
    fn rejects_single_class() {
        let data: Vec<_> = separable(20).into_iter().map(|(x, _)| (x, true)).collect();
        assert!(matches!(
            train_object_classifier(&data, &ClassifierTrainConfig::default()),
            Err(Error::DegenerateDataset(_))
        ));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let data = separable(12);
        for seed in 0..5 {
            let p = MlpParams::init(8, 6, [1.0, 5.0], seed);
            let samples: Vec<(&[f64], bool)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
            let err = grad_check_flat(
                &p.to_flat(),
                |theta| {
                    let mut q = p.clone();
                    q.set_flat(theta);
                    classifier_loss_and_grad(&q, &samples)
                },
                1e-5,
                usize::MAX,
                seed,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn params_text_roundtrip() {
        let p = MlpParams::init(72, 16, [1.0, 5.0], 3);
        let back = MlpParams::from_text(&p.to_text()).unwrap();
        assert_eq!(p, back);
        assert!(MlpParams::from_text("mlp v2\n").is_err());
    }

    proptest! {
        #[test]
        fn proposal_count_and_score_bounds(
            pts in proptest::collection::vec((0.0..100.0f64, 0.0..100.0f64, 0.0..=1.0f64), 0..8)
        ) {
            let dets: Vec<_> = pts.iter().map(|&(x, y, s)| det(x, y, s)).collect();
            let cfg = ProposalConfig::default();
            let cands = propose_candidates(&dets, &cfg);
            let n = dets.len();
            prop_assert!(cands.len() <= n * n.saturating_sub(1) / 2);
            let all_in_range = (0..n).all(|i| (i + 1..n).all(|j| {
                let d = dets[i].position.distance(dets[j].position);
                d >= cfg.min_distance && d <= cfg.max_distance
            }));
            prop_assert_eq!(cands.len() == n * n.saturating_sub(1) / 2, all_in_range);
            for c in &cands {
                let (a, b) = (c.landmarks[0].score, c.landmarks[1].score);
                prop_assert!(c.score >= a.min(b) - 1e-15 && c.score <= a.max(b) + 1e-15);
            }
        }

        #[test]
        fn softmax_sums_to_one(x in proptest::collection::vec(-3.0..3.0f64, 8), seed in 0u64..100) {
            let p = MlpParams::init(8, 5, [1.0, 1.0], seed);
            let pr = class_probabilities(&FeatureVector(x), &p).unwrap();
            prop_assert!((pr[0] + pr[1] - 1.0).abs() < 1e-12);
        }
    }
}
