//! Ablation on a seeded synthetic corpus: detection-only pairing, the
//! classifier alone, classifier-scored Viterbi, and the full graph pipeline,
//! all scored by the same matcher.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::domain::Sequence;
use crate::eval::{match_predictions, EvalReport, MatchResult};
use crate::kv::{KvFields, KvValue};
use crate::simulate::SimConfig;
use crate::track::{
    classifier_track, detection_only_track, track_sequence, viterbi_sequence_track, PipelineConfig, Track,
};
use crate::train::{generate_corpus, train_models, TrainConfig, TrainOutcome};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    pub radius: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train_sequences: 40,
            test_sequences: 50,
            train_seed: 101,
            test_seed: 202,
            radius: 5.0,
        }
    }
}

impl KvFields for AblationConfig {
    fn fields(&mut self) -> Vec<(&'static str, &mut dyn KvValue)> {
        vec![
            ("train_sequences", &mut self.train_sequences),
            ("test_sequences", &mut self.test_sequences),
            ("train_seed", &mut self.train_seed),
            ("test_seed", &mut self.test_seed),
            ("radius", &mut self.radius),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.train_sequences == 0 || self.test_sequences == 0 {
            return Err(Error::config("test_sequences", "corpus sizes must be > 0"));
        }
        if self.train_seed == self.test_seed {
            return Err(Error::config("test_seed", "must differ from train_seed"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::config("radius", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub method: &'static str,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub train_candidates: usize,
    pub train_positives: usize,
}

pub const DETECTION_ONLY: &str = "detection-only";
pub const DETECTION_CLASSIFIER: &str = "detection+classifier";
pub const VITERBI: &str = "viterbi";
pub const FULL: &str = "full";

impl AblationReport {
    pub fn row(&self, method: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.method == method).map(|r| &r.report)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "method", "precision", "recall", "f1", "accuracy", "mae_px"
        );
        for r in &self.rows {
            let d = &r.report.detection;
            let mae = r.report.localization.map_or("undefined".to_string(), |l| format!("{:.3}", l.mae));
            let _ = writeln!(
                s,
                "{:<22} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9}",
                r.method, d.precision, d.recall, d.f1, d.accuracy, mae
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Pools the matches of every sequence, in sequence order, into one report.
pub fn evaluate_tracks(seqs: &[Sequence], tracks: &[Track], radius: f64) -> Result<EvalReport> {
    let mut all = MatchResult::default();
    for (seq, track) in seqs.iter().zip(tracks) {
        let gt = seq
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("evaluation sequences need ground truth".into()))?;
        all.extend(match_predictions(track, gt, radius)?);
    }
    Ok(EvalReport::from_matches(&all, radius))
}

/// Trains on one corpus and scores every method on a disjoint one.
pub fn run_ablation(
    sim: &SimConfig,
    pipeline: &PipelineConfig,
    train: &TrainConfig,
    cfg: &AblationConfig,
) -> Result<(AblationReport, TrainOutcome)> {
    cfg.validate()?;
    let train_set = generate_corpus(sim, cfg.train_sequences, cfg.train_seed)?;
    let test_set = generate_corpus(sim, cfg.test_sequences, cfg.test_seed)?;
    let outcome = train_models(&train_set, pipeline, train)?;
    let models = &outcome.models;

    let det: Vec<Track> = test_set.par_iter().map(|s| detection_only_track(s, pipeline)).collect();
    let cls: Vec<Track> = test_set
        .par_iter()
        .map(|s| classifier_track(s, pipeline, &models.mlp))
        .collect::<Result<_>>()?;
    let vit: Vec<Track> = test_set
        .par_iter()
        .map(|s| viterbi_sequence_track(s, pipeline, &models.mlp))
        .collect::<Result<_>>()?;
    let full: Vec<Track> = test_set
        .par_iter()
        .map(|s| track_sequence(s, pipeline, models))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (method, tracks) in [(DETECTION_ONLY, &det), (DETECTION_CLASSIFIER, &cls), (VITERBI, &vit), (FULL, &full)] {
        rows.push(AblationRow {
            method,
            report: evaluate_tracks(&test_set, tracks, cfg.radius)?,
        });
    }
    let report = AblationReport {
        rows,
        train_candidates: outcome.candidates,
        train_positives: outcome.positives,
    };
    Ok((report, outcome))
}
