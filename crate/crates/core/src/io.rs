//! File formats: binary PGM frames, sequence directories, and JSON-lines
//! ground truth and detections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{GrayFrame, GroundTruth, GtFrame, LandmarkDetection, Point2, Sequence};
use crate::gcn::GcnParams;
use crate::propose::MlpParams;
use crate::track::{Models, Track};
use crate::{Error, Result};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const MLP_FILE: &str = "mlp.txt";
pub const GCN_FILE: &str = "gcn.txt";

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:04}.pgm")
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `contents`, creating parent directories as needed.
pub fn write_bytes(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    write_bytes(path, contents.as_bytes())
}

pub fn encode_pgm(frame: &GrayFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend_from_slice(frame.data());
    out
}

/// Decodes a binary (P5) PGM with maxval ≤ 255. Header comments are allowed.
pub fn decode_pgm(bytes: &[u8], source_name: &str) -> Result<GrayFrame> {
    let err = |reason: String| Error::parse(source_name, 1, reason);
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(err(format!("expected magic P5, got {:?}", fields[0])));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|e| err(format!("{what} {s:?}: {e}")));
    let (w, h, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(err(format!("maxval {maxval} not supported (need 1..=255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| err(format!("raster shorter than {w}x{h}")))?;
    GrayFrame::new(w, h, data.to_vec())
}

pub fn read_pgm(path: &Path) -> Result<GrayFrame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, &path.display().to_string())
}

pub fn write_pgm(path: &Path, frame: &GrayFrame) -> Result<()> {
    write_bytes(path, &encode_pgm(frame))
}

#[derive(Serialize, Deserialize)]
struct GtRecord {
    frame: usize,
    markers: [[f64; 2]; 2],
    present: bool,
}

pub fn ground_truth_to_jsonl(gt: &GroundTruth) -> String {
    let mut s = String::new();
    for (t, f) in gt.frames.iter().enumerate() {
        let rec = GtRecord {
            frame: t,
            markers: f.markers.map(|p| [p.x, p.y]),
            present: f.present,
        };
        s.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// Parses ground truth; frames must be listed as `0, 1, 2, …`.
pub fn ground_truth_from_jsonl(text: &str, source_name: &str) -> Result<GroundTruth> {
    let mut frames = Vec::new();
    for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: GtRecord = serde_json::from_str(line).map_err(|e| Error::parse(source_name, ln + 1, e.to_string()))?;
        if rec.frame != frames.len() {
            return Err(Error::parse(
                source_name,
                ln + 1,
                format!("frame: expected {}, got {}", frames.len(), rec.frame),
            ));
        }
        frames.push(GtFrame {
            markers: rec.markers.map(|[x, y]| Point2::new(x, y)),
            present: rec.present,
        });
    }
    Ok(GroundTruth { frames })
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    frame: usize,
    x: f64,
    y: f64,
    score: f64,
}

pub fn detections_to_jsonl(dets: &[Vec<LandmarkDetection>]) -> String {
    let mut s = String::new();
    for d in dets.iter().flatten() {
        let rec = DetectionRecord {
            frame: d.frame,
            x: d.position.x,
            y: d.position.y,
            score: d.score,
        };
        s.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// Groups detections by frame; the result has at least `n_frames` entries.
pub fn detections_from_jsonl(text: &str, n_frames: usize, source_name: &str) -> Result<Vec<Vec<LandmarkDetection>>> {
    let mut out: Vec<Vec<LandmarkDetection>> = vec![Vec::new(); n_frames];
    for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: DetectionRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(source_name, ln + 1, e.to_string()))?;
        if rec.frame >= out.len() {
            out.resize(rec.frame + 1, Vec::new());
        }
        out[rec.frame].push(LandmarkDetection::new(Point2::new(rec.x, rec.y), rec.score, rec.frame));
    }
    Ok(out)
}

/// Writes frames as `frame_0000.pgm, …` and, if present, the ground truth.
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in seq.frames.iter().enumerate() {
        write_pgm(&dir.join(frame_file_name(t)), f)?;
    }
    if let Some(gt) = &seq.ground_truth {
        write_text(&dir.join(GROUND_TRUTH_FILE), &ground_truth_to_jsonl(gt))?;
    }
    Ok(())
}

/// Reads `frame_*.pgm` in name order plus `ground_truth.jsonl` when present.
pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("frame_") && name.ends_with(".pgm") {
            paths.push(path);
        }
    }
    paths.sort();
    let frames = paths.iter().map(|p| read_pgm(p)).collect::<Result<Vec<_>>>()?;
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let ground_truth = if gt_path.exists() {
        Some(ground_truth_from_jsonl(&read_text(&gt_path)?, &gt_path.display().to_string())?)
    } else {
        None
    };
    Sequence::new(frames, ground_truth)
}

pub fn save_models(dir: &Path, models: &Models) -> Result<()> {
    write_text(&dir.join(MLP_FILE), &models.mlp.to_text())?;
    write_text(&dir.join(GCN_FILE), &models.gcn.to_text())
}

pub fn load_models(dir: &Path) -> Result<Models> {
    Ok(Models {
        mlp: MlpParams::from_text(&read_text(&dir.join(MLP_FILE))?)?,
        gcn: GcnParams::from_text(&read_text(&dir.join(GCN_FILE))?)?,
    })
}

pub fn read_track(path: &Path) -> Result<Track> {
    Track::from_jsonl(&read_text(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient() -> GrayFrame {
        GrayFrame::from_fn(7, 5, |x, y| (x * 30 + y * 7) as u8)
    }

    #[test]
    fn pgm_roundtrip_with_comment() {
        let f = gradient();
        assert_eq!(decode_pgm(&encode_pgm(&f), "m").unwrap(), f);
        let mut commented = b"P5\n# made by hand\n7 5\n255\n".to_vec();
        commented.extend_from_slice(f.data());
        assert_eq!(decode_pgm(&commented, "m").unwrap(), f);
    }

    #[test]
    fn pgm_rejects_bad_input() {
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00", "m").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\x00\x00", "m").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00", "m").is_err());
        assert!(decode_pgm(b"P5\n", "m").is_err());
    }

    #[test]
    fn ground_truth_roundtrip() {
        let gt = GroundTruth {
            frames: vec![
                GtFrame {
                    markers: [Point2::new(1.5, 2.0), Point2::new(30.25, 4.0)],
                    present: true,
                },
                GtFrame {
                    markers: [Point2::new(0.0, 0.0), Point2::new(0.0, 0.0)],
                    present: false,
                },
            ],
        };
        let text = ground_truth_to_jsonl(&gt);
        assert!(text.starts_with(r#"{"frame":0,"markers":[[1.5,2.0],[30.25,4.0]],"present":true}"#));
        assert_eq!(ground_truth_from_jsonl(&text, "gt").unwrap(), gt);
        assert!(ground_truth_from_jsonl(r#"{"frame":1,"markers":[[0,0],[0,0]],"present":true}"#, "gt").is_err());
    }

    #[test]
    fn detections_roundtrip() {
        let d = vec![
            vec![LandmarkDetection::new(Point2::new(3.0, 4.5), 0.75, 0)],
            vec![],
            vec![LandmarkDetection::new(Point2::new(1.0, 1.0), 1.0, 2)],
        ];
        let text = detections_to_jsonl(&d);
        assert_eq!(text.lines().next().unwrap(), r#"{"frame":0,"x":3.0,"y":4.5,"score":0.75}"#);
        assert_eq!(detections_from_jsonl(&text, 3, "d").unwrap(), d);
    }

    #[test]
    fn sequence_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let gt = GroundTruth {
            frames: vec![
                GtFrame {
                    markers: [Point2::new(1.0, 2.0), Point2::new(5.0, 2.0)],
                    present: true
                };
                2
            ],
        };
        let seq = Sequence::new(vec![gradient(), GrayFrame::filled(7, 5, 3)], Some(gt)).unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        let back = read_sequence(dir.path()).unwrap();
        assert_eq!(back.frames, seq.frames);
        assert_eq!(back.ground_truth, seq.ground_truth);
        assert!(read_sequence(&dir.path().join("missing")).is_err());
    }
}
