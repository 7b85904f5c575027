//! Training orchestration: synthetic corpora, candidate labeling and fitting
//! of the object classifier and the graph network.

use rand::RngCore;
use rayon::prelude::*;

use crate::detect::{detections_from_heatmap, tophat_heatmap};
use crate::domain::{Point2, Sequence, StentCandidate};
use crate::gcn::{train_gcn, GcnTrainConfig, LabeledGraph};
use crate::graph::build_graph;
use crate::kv::{KvFields, KvValue};
use crate::nn::seeded_rng;
use crate::propose::{
    patch_descriptor, propose_candidates, train_object_classifier, ClassifierTrainConfig, FeatureVector,
};
use crate::simulate::{simulate_sequence, stays_in_frame, SimConfig};
use crate::track::{clip_starts, score_clip, Models, PipelineConfig};
use crate::{Error, Result};

/// Seeds tried per corpus slot before giving up on a trajectory that keeps
/// leaving the frame.
const MAX_ATTEMPTS: usize = 64;

/// `count` simulated sequences. Slot `i` draws seeds from a stream keyed by
/// `(seed, i)` and keeps the first one whose trajectory stays in frame.
pub fn generate_corpus(sim: &SimConfig, count: usize, seed: u64) -> Result<Vec<Sequence>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeded_rng(seed, 0x636f_7270_0000 | i as u64);
            for _ in 0..MAX_ATTEMPTS {
                let cfg = SimConfig {
                    seed: rng.next_u64(),
                    ..sim.clone()
                };
                if stays_in_frame(&cfg) {
                    return simulate_sequence(&cfg).map(|(seq, _)| seq);
                }
            }
            Err(Error::config(
                "stent_length",
                format!("no trajectory stayed in frame after {MAX_ATTEMPTS} seeds for corpus slot {i}"),
            ))
        })
        .collect()
}

/// A candidate is positive iff its two landmarks lie strictly within
/// `radius` of the two ground-truth markers, under either pairing.
pub fn label_candidate(c: &StentCandidate, gt: Option<[Point2; 2]>, radius: f64) -> bool {
    let Some([g0, g1]) = gt else {
        return false;
    };
    let [a, b] = c.positions();
    let within = |p: Point2, q: Point2| p.distance(q) < radius;
    (within(a, g0) && within(b, g1)) || (within(a, g1) && within(b, g0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub classifier: ClassifierTrainConfig,
    pub gcn: GcnTrainConfig,
    pub label_radius: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierTrainConfig::default(),
            gcn: GcnTrainConfig::default(),
            label_radius: 5.0,
        }
    }
}

/// Only the scalar fields; the classifier and graph-network sections load
/// under their own prefixes.
impl KvFields for TrainConfig {
    fn fields(&mut self) -> Vec<(&'static str, &mut dyn KvValue)> {
        vec![("label_radius", &mut self.label_radius)]
    }

    fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.gcn.validate()?;
        if !(self.label_radius > 0.0) {
            return Err(Error::config("label_radius", "must be > 0"));
        }
        Ok(())
    }
}

/// Labeled descriptors for the classifier and labeled clip graphs for the
/// graph network.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub objects: Vec<(FeatureVector, bool)>,
    pub clips: Vec<LabeledGraph>,
}

fn sequence_training_data(seq: &Sequence, cfg: &PipelineConfig, radius: f64) -> Result<TrainingData> {
    let gt = seq
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("training sequences need ground truth".into()))?;
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
    let label = |c: &StentCandidate| label_candidate(c, gt.markers(c.frame), radius);
    let mut out = TrainingData::default();
    for cands in &per_frame {
        out.objects.extend(cands.iter().map(|(c, f)| (f.clone(), label(c))));
    }
    for s in clip_starts(seq.len(), cfg.clip_length, cfg.clip_stride) {
        let end = (s + cfg.clip_length).min(seq.len());
        let graph = build_graph(&per_frame[s..end], cfg.alpha1, cfg.alpha2);
        let labels = graph.nodes().iter().map(|n| label(&n.candidate)).collect();
        out.clips.push(LabeledGraph { graph, labels });
    }
    Ok(out)
}

/// Builds training data from uncorrected detections of every sequence.
pub fn training_data(seqs: &[Sequence], cfg: &PipelineConfig, radius: f64) -> Result<TrainingData> {
    let parts = seqs
        .par_iter()
        .map(|s| sequence_training_data(s, cfg, radius))
        .collect::<Result<Vec<_>>>()?;
    let mut out = TrainingData::default();
    for p in parts {
        out.objects.extend(p.objects);
        out.clips.extend(p.clips);
    }
    Ok(out)
}

/// Clip graphs as the final correction pass sees them under `models`,
/// labeled against ground truth. Empty when correction is disabled.
pub fn corrected_clips(
    seqs: &[Sequence],
    cfg: &PipelineConfig,
    models: &Models,
    radius: f64,
) -> Result<Vec<LabeledGraph>> {
    if cfg.correction_passes == 0 {
        return Ok(Vec::new());
    }
    let parts = seqs
        .par_iter()
        .map(|seq| {
            let gt = seq
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("training sequences need ground truth".into()))?;
            clip_starts(seq.len(), cfg.clip_length, cfg.clip_stride)
                .into_iter()
                .map(|s| {
                    let end = (s + cfg.clip_length).min(seq.len());
                    let (_, clip) = score_clip(&seq.frames[s..end], s, cfg, models)?;
                    let labels = clip
                        .graph
                        .nodes()
                        .iter()
                        .map(|n| label_candidate(&n.candidate, gt.markers(n.candidate.frame), radius))
                        .collect();
                    Ok(LabeledGraph {
                        graph: clip.graph,
                        labels,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub models: Models,
    pub classifier_loss: Vec<f64>,
    pub gcn_loss: Vec<f64>,
    pub positives: usize,
    pub candidates: usize,
}

impl TrainOutcome {
    /// `epoch,classifier_loss,gcn_loss` rows; missing entries are left blank.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,classifier_loss,gcn_loss\n");
        let n = self.classifier_loss.len().max(self.gcn_loss.len());
        let cell = |v: Option<&f64>| v.map_or(String::new(), |x| x.to_string());
        for e in 0..n {
            s.push_str(&format!("{e},{},{}\n", cell(self.classifier_loss.get(e)), cell(self.gcn_loss.get(e))));
        }
        s
    }
}

/// Fits the classifier on every labeled candidate and the graph network on
/// every labeled clip.
pub fn train_models(seqs: &[Sequence], pipeline: &PipelineConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    pipeline.validate()?;
    cfg.validate()?;
    let data = training_data(seqs, pipeline, cfg.label_radius)?;
    let positives = data.objects.iter().filter(|(_, y)| *y).count();
    log::info!(
        "training on {} candidates ({positives} positive) in {} clips",
        data.objects.len(),
        data.clips.len()
    );
    let mlp = train_object_classifier(&data.objects, &cfg.classifier)?;
    let mut gcn = train_gcn(&data.clips, &cfg.gcn)?;
    // Refit on uncorrected plus corrected graphs so the network has seen both
    // inputs it meets at inference.
    let stage1 = Models {
        mlp: mlp.params.clone(),
        gcn: gcn.params,
    };
    let corrected = corrected_clips(seqs, pipeline, &stage1, cfg.label_radius)?;
    if !corrected.is_empty() {
        log::info!("refitting on {} corrected clips", corrected.len());
        let mut clips = data.clips;
        clips.extend(corrected);
        gcn = train_gcn(&clips, &cfg.gcn)?;
    } else {
        gcn.params = stage1.gcn;
    }
    Ok(TrainOutcome {
        models: Models {
            mlp: mlp.params,
            gcn: gcn.params,
        },
        classifier_loss: mlp.loss_trace,
        gcn_loss: gcn.loss_trace,
        positives,
        candidates: data.objects.len(),
    })
}
