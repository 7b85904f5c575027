//! Command-line front end. Every command resolves one [`RunConfig`] from an
//! optional `key=value` file plus `--set` overrides and writes a
//! `manifest.json` next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::ablate::{run_ablation, AblationConfig};
use crate::detect::tophat_detect;
use crate::enhance::{enhance, overlay_markers};
use crate::eval::EvalReport;
use crate::io;
use crate::kv::{write_fields, KvDoc};
use crate::simulate::{simulate_detections, simulate_sequence, SimConfig};
use crate::track::{classifier_track, detection_only_track, track_sequence, viterbi_sequence_track, PipelineConfig};
use crate::train::{generate_corpus, train_models, TrainConfig};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "stent-tracker", version, about = "Landmark-pair stent tracking on fluoroscopy sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// `key=value` config file; keys carry a section prefix such as `sim.` or `gcn.`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the command's random draws (simulation or training corpus).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Config override `key=value`, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Full,
    Classifier,
    Detection,
    Viterbi,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sequence (or a corpus with --count) with ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Write this many sequences as seq_0000, seq_0001, … instead of one.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run the landmark detector on every frame.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Sequence directory (frame_NNNN.pgm, optional ground_truth.jsonl).
        #[arg(long)]
        input: PathBuf,
    },
    /// Fit the object classifier and the graph network.
    Train {
        #[command(flatten)]
        common: Common,
        /// Sequence directories with ground truth; a synthetic corpus is used when absent.
        #[arg(long)]
        data: Vec<PathBuf>,
        /// Size of the synthetic training corpus.
        #[arg(long, default_value_t = 40)]
        sequences: usize,
    },
    /// Track the stent through a sequence.
    Track {
        #[command(flatten)]
        common: Common,
        /// Sequence directory (frame_NNNN.pgm, optional ground_truth.jsonl).
        #[arg(long)]
        input: PathBuf,
        /// Directory holding mlp.txt and gcn.txt; not needed for `--method detection`.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Method::Full)]
        method: Method,
    },
    /// Score a track against the sequence's ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Sequence directory (frame_NNNN.pgm, optional ground_truth.jsonl).
        #[arg(long)]
        input: PathBuf,
        /// track.jsonl written by `track`.
        #[arg(long)]
        track: PathBuf,
        /// Matching radius in pixels.
        #[arg(long, default_value_t = crate::eval::DEFAULT_RADIUS)]
        radius: f64,
    },
    /// Average motion-compensated frames around a reference frame.
    Enhance {
        #[command(flatten)]
        common: Common,
        /// Sequence directory (frame_NNNN.pgm, optional ground_truth.jsonl).
        #[arg(long)]
        input: PathBuf,
        /// track.jsonl written by `track`.
        #[arg(long)]
        track: PathBuf,
        #[arg(long, default_value_t = 7)]
        frames: usize,
        /// Reference frame; defaults to the tracked frame nearest the middle.
        #[arg(long)]
        reference: Option<usize>,
    },
    /// Train on one synthetic corpus and compare tracking methods on another.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Detect { .. } => "detect",
            Command::Train { .. } => "train",
            Command::Track { .. } => "track",
            Command::Eval { .. } => "eval",
            Command::Enhance { .. } => "enhance",
            Command::Ablate { .. } => "ablate",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Simulate { common, .. }
            | Command::Detect { common, .. }
            | Command::Train { common, .. }
            | Command::Track { common, .. }
            | Command::Eval { common, .. }
            | Command::Enhance { common, .. }
            | Command::Ablate { common } => common,
        }
    }
}

/// Every tunable of every command, grouped by key prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub ablate: AblationConfig,
}

impl RunConfig {
    /// Defaults, then the file, then `overrides` in order. Unknown keys are
    /// an error.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match file {
            Some(p) => KvDoc::parse(&io::read_text(p)?, &p.display().to_string())?,
            None => KvDoc::default(),
        };
        for o in overrides {
            doc.set_override(o)?;
        }
        let mut cfg = RunConfig::default();
        doc.load_into("sim.", &mut cfg.sim)?;
        doc.load_into("detect.", &mut cfg.pipeline.detector)?;
        doc.load_into("propose.", &mut cfg.pipeline.proposal)?;
        doc.load_into("track.", &mut cfg.pipeline)?;
        doc.load_into("classifier.", &mut cfg.train.classifier)?;
        doc.load_into("gcn.", &mut cfg.train.gcn)?;
        doc.load_into("train.", &mut cfg.train)?;
        doc.load_into("ablate.", &mut cfg.ablate)?;
        doc.ensure_consumed()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        write_fields(&self.sim, "sim.", &mut s);
        write_fields(&self.pipeline.detector, "detect.", &mut s);
        write_fields(&self.pipeline.proposal, "propose.", &mut s);
        write_fields(&self.pipeline, "track.", &mut s);
        write_fields(&self.train.classifier, "classifier.", &mut s);
        write_fields(&self.train.gcn, "gcn.", &mut s);
        write_fields(&self.train, "train.", &mut s);
        write_fields(&self.ablate, "ablate.", &mut s);
        s
    }

    fn to_map(&self) -> BTreeMap<String, String> {
        self.to_kv()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

/// Record of one invocation, written as `manifest.json` in the output
/// directory.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub jobs: Option<usize>,
    pub duration_seconds: f64,
}

struct Run {
    out: PathBuf,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Run {
    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        io::write_bytes(&self.out.join(name), contents)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }
}

/// Runs one parsed command line; returns the text printed on stdout.
pub fn run(cli: Cli) -> Result<String> {
    let start = Instant::now();
    let command = cli.command;
    let common = command.common().clone();
    if let Some(j) = common.jobs {
        if j == 0 {
            return Err(Error::config("jobs", "must be > 0"));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
    let mut run = Run {
        out: common.out.clone(),
        seeds: BTreeMap::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    std::fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    if let Some(p) = &common.config {
        run.input(p);
    }
    let summary = execute(&command, &mut cfg, &mut run)?;

    let manifest = RunManifest {
        command: command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.to_map(),
        seeds: run.seeds,
        inputs: run.inputs,
        outputs: run.outputs,
        jobs: common.jobs,
        duration_seconds: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    io::write_text(&run.out.join(MANIFEST_FILE), &json)?;
    Ok(summary)
}

fn execute(command: &Command, cfg: &mut RunConfig, run: &mut Run) -> Result<String> {
    match command {
        Command::Simulate { common, count } => {
            if let Some(s) = common.seed {
                cfg.sim.seed = s;
            }
            run.seeds.insert("sim".into(), cfg.sim.seed);
            match count {
                None => {
                    let (seq, gt) = simulate_sequence(&cfg.sim)?;
                    write_sequence(run, "", &seq)?;
                    let dets = simulate_detections(&gt, &cfg.sim)?;
                    run.write("simulated_detections.jsonl", io::detections_to_jsonl(&dets).as_bytes())?;
                    Ok(format!("wrote {} frames to {}\n", seq.len(), run.out.display()))
                }
                Some(n) => {
                    let seqs = generate_corpus(&cfg.sim, *n, cfg.sim.seed)?;
                    for (i, seq) in seqs.iter().enumerate() {
                        write_sequence(run, &format!("seq_{i:04}/"), seq)?;
                    }
                    Ok(format!("wrote {n} sequences to {}\n", run.out.display()))
                }
            }
        }
        Command::Detect { input, .. } => {
            let seq = read_input(run, input)?;
            let dets: Vec<_> = seq
                .frames
                .iter()
                .enumerate()
                .map(|(t, f)| tophat_detect(f, &cfg.pipeline.detector, t))
                .collect();
            run.write("detections.jsonl", io::detections_to_jsonl(&dets).as_bytes())?;
            let total: usize = dets.iter().map(Vec::len).sum();
            Ok(format!("{total} detections in {} frames\n", seq.len()))
        }
        Command::Train {
            common,
            data,
            sequences,
        } => {
            let seqs = if data.is_empty() {
                let seed = common.seed.unwrap_or(cfg.ablate.train_seed);
                run.seeds.insert("corpus".into(), seed);
                generate_corpus(&cfg.sim, *sequences, seed)?
            } else {
                data.iter().map(|d| read_input(run, d)).collect::<Result<_>>()?
            };
            run.seeds.insert("classifier".into(), cfg.train.classifier.seed);
            run.seeds.insert("gcn".into(), cfg.train.gcn.seed);
            let outcome = train_models(&seqs, &cfg.pipeline, &cfg.train)?;
            io::save_models(&run.out, &outcome.models)?;
            run.outputs.push(io::MLP_FILE.into());
            run.outputs.push(io::GCN_FILE.into());
            run.write("loss.csv", outcome.loss_csv().as_bytes())?;
            Ok(format!(
                "trained on {} candidates ({} positive); final graph loss {:.6}\n",
                outcome.candidates,
                outcome.positives,
                outcome.gcn_loss.last().copied().unwrap_or(f64::NAN)
            ))
        }
        Command::Track {
            input, models, method, ..
        } => {
            let seq = read_input(run, input)?;
            let loaded = match (method, models) {
                (Method::Detection, _) => None,
                (_, Some(dir)) => {
                    run.input(dir);
                    Some(io::load_models(dir)?)
                }
                (_, None) => return Err(Error::config("models", "required unless --method detection")),
            };
            let track = match (method, &loaded) {
                (Method::Detection, _) => detection_only_track(&seq, &cfg.pipeline),
                (Method::Classifier, Some(m)) => classifier_track(&seq, &cfg.pipeline, &m.mlp)?,
                (Method::Viterbi, Some(m)) => viterbi_sequence_track(&seq, &cfg.pipeline, &m.mlp)?,
                (Method::Full, Some(m)) => track_sequence(&seq, &cfg.pipeline, m)?,
                (_, None) => unreachable!("models loaded for every learned method"),
            };
            run.write("track.jsonl", track.to_jsonl().as_bytes())?;
            Ok(format!("selected a stent in {} of {} frames\n", track.selection_count(), track.len()))
        }
        Command::Eval {
            input, track, radius, ..
        } => {
            let seq = read_input(run, input)?;
            run.input(track);
            let tr = io::read_track(track)?;
            let gt = seq
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::config("input", format!("{} has no {}", input.display(), io::GROUND_TRUTH_FILE)))?;
            let matches = crate::eval::match_predictions(&tr, gt, *radius)?;
            let report = EvalReport::from_matches(&matches, *radius);
            run.write("eval.json", report.to_json().as_bytes())?;
            let text = report.to_kv();
            run.write("eval.txt", text.as_bytes())?;
            Ok(text)
        }
        Command::Enhance {
            input,
            track,
            frames,
            reference,
            ..
        } => {
            let seq = read_input(run, input)?;
            run.input(track);
            let tr = io::read_track(track)?;
            let mid = seq.len() / 2;
            let reference = match reference {
                Some(r) => *r,
                None => (0..tr.len())
                    .filter(|&t| tr.markers(t).is_some())
                    .min_by_key(|&t| (t.abs_diff(mid), t))
                    .ok_or_else(|| Error::InvalidArgument("track selects no frame".into()))?,
            };
            if reference >= seq.len() {
                return Err(Error::config("reference", format!("frame {reference} out of range")));
            }
            let out = enhance(&seq, &tr, *frames, reference)?;
            run.write("enhanced.pgm", &io::encode_pgm(&out.image))?;
            let markers = tr.markers(reference).expect("enhance checked the reference");
            run.write("reference_overlay.pgm", &io::encode_pgm(&overlay_markers(&seq.frames[reference], &markers)))?;
            Ok(format!("reference frame {reference}, averaged frames {:?}\n", out.frames_used))
        }
        Command::Ablate { common } => {
            if let Some(s) = common.seed {
                cfg.ablate.train_seed = s;
                cfg.ablate.test_seed = s.wrapping_add(1);
            }
            run.seeds.insert("train_corpus".into(), cfg.ablate.train_seed);
            run.seeds.insert("test_corpus".into(), cfg.ablate.test_seed);
            run.seeds.insert("classifier".into(), cfg.train.classifier.seed);
            run.seeds.insert("gcn".into(), cfg.train.gcn.seed);
            let (report, _) = run_ablation(&cfg.sim, &cfg.pipeline, &cfg.train, &cfg.ablate)?;
            let table = report.to_table();
            run.write("ablation.txt", table.as_bytes())?;
            run.write("ablation.json", report.to_json().as_bytes())?;
            Ok(table)
        }
    }
}

fn read_input(run: &mut Run, dir: &Path) -> Result<crate::Sequence> {
    run.input(dir);
    let seq = io::read_sequence(dir)?;
    if seq.is_empty() {
        return Err(Error::config("input", format!("{} holds no frame_*.pgm files", dir.display())));
    }
    Ok(seq)
}

fn write_sequence(run: &mut Run, prefix: &str, seq: &crate::Sequence) -> Result<()> {
    io::write_sequence(&run.out.join(prefix), seq)?;
    for t in 0..seq.len() {
        run.outputs.push(format!("{prefix}{}", io::frame_file_name(t)));
    }
    if seq.ground_truth.is_some() {
        run.outputs.push(format!("{prefix}{}", io::GROUND_TRUTH_FILE));
    }
    Ok(())
}

/// Process exit status for an error: 2 for bad configuration or input
/// files, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig { .. } | Error::Parse { .. } | Error::Io { .. } => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_over_file_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "sim.frames=12\ngcn.epochs=3\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["sim.frames=14".into()]).unwrap();
        assert_eq!(cfg.sim.frames, 14);
        assert_eq!(cfg.train.gcn.epochs, 3);
        let err = RunConfig::resolve(None, &["sim.bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("sim.bogus"), "{err}");
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn config_text_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.sim.noise_sigma = 0.1 + 0.2;
        cfg.pipeline.threshold = 0.55;
        let overrides: Vec<String> = cfg.to_kv().lines().map(String::from).collect();
        assert_eq!(RunConfig::resolve(None, &overrides).unwrap(), cfg);
    }

    #[test]
    fn every_command_parses() {
        for args in [
            &["st", "simulate", "--out", "o", "--seed", "3", "--set", "sim.frames=4"][..],
            &["st", "detect", "--out", "o", "--input", "i"],
            &["st", "train", "--out", "o", "--sequences", "2", "--jobs", "1"],
            &["st", "track", "--out", "o", "--input", "i", "--method", "detection"],
            &["st", "eval", "--out", "o", "--input", "i", "--track", "t"],
            &["st", "enhance", "--out", "o", "--input", "i", "--track", "t", "--frames", "3"],
            &["st", "ablate", "--out", "o", "--config", "c"],
        ] {
            let cli = Cli::try_parse_from(args).unwrap();
            assert_eq!(cli.command.name(), args[1]);
        }
        assert!(Cli::try_parse_from(["st", "track", "--input", "i"]).is_err());
    }
}
