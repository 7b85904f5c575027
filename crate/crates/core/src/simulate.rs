//! Deterministic synthetic fluoroscopy.
//!
//! A single stent, bracketed by two dark balloon markers, moves with a
//! two-sinusoid (cardiac + respiratory) motion per axis over a flat background.
//! A mesh-textured band is drawn between the markers, static clutter blobs
//! identical to the markers are scattered over the frame, and Gaussian pixel
//! noise is added. Every random quantity comes from a ChaCha stream derived
//! from the master seed and a `(purpose, index)` counter, so adding one entity
//! never perturbs the draws of another.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};

use crate::domain::{GrayFrame, GroundTruth, GtFrame, LandmarkDetection, Point2, Sequence, MIN_SIDE};
use crate::kv::{KvFields, KvValue};
use crate::{Error, Result};

/// Preferred mesh period (px); the actual period is adjusted so that a whole
/// number of half-periods fits between the markers.
const MESH_PERIOD: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// px
    pub cardiac_amplitude: f64,
    /// cycles/frame
    pub cardiac_frequency: f64,
    pub respiratory_amplitude: f64,
    pub respiratory_frequency: f64,
    /// Peak in-plane rotation of the marker pair (rad), at the cardiac rate.
    pub rotation_amplitude: f64,
    /// Distance between the two markers (px).
    pub stent_length: f64,
    pub background: f64,
    pub marker_sigma: f64,
    pub marker_depth: f64,
    pub stent_contrast: f64,
    pub clutter_count: usize,
    /// Expected false-positive detections per frame (`simulate_detections`).
    pub fp_rate: f64,
    pub jitter_sigma: f64,
    pub miss_probability: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            frames: 10,
            width: 128,
            height: 128,
            cardiac_amplitude: 8.0,
            cardiac_frequency: 0.08,
            respiratory_amplitude: 5.0,
            respiratory_frequency: 0.015,
            rotation_amplitude: 0.1,
            stent_length: 36.0,
            background: 170.0,
            marker_sigma: 2.0,
            marker_depth: 60.0,
            stent_contrast: 14.0,
            clutter_count: 2,
            fp_rate: 2.0,
            jitter_sigma: 0.5,
            miss_probability: 0.05,
            noise_sigma: 12.0,
            seed: 1,
        }
    }
}

impl KvFields for SimConfig {
    fn fields(&mut self) -> Vec<(&'static str, &mut dyn KvValue)> {
        vec![
            ("frames", &mut self.frames),
            ("width", &mut self.width),
            ("height", &mut self.height),
            ("cardiac_amplitude", &mut self.cardiac_amplitude),
            ("cardiac_frequency", &mut self.cardiac_frequency),
            ("respiratory_amplitude", &mut self.respiratory_amplitude),
            ("respiratory_frequency", &mut self.respiratory_frequency),
            ("rotation_amplitude", &mut self.rotation_amplitude),
            ("stent_length", &mut self.stent_length),
            ("background", &mut self.background),
            ("marker_sigma", &mut self.marker_sigma),
            ("marker_depth", &mut self.marker_depth),
            ("stent_contrast", &mut self.stent_contrast),
            ("clutter_count", &mut self.clutter_count),
            ("fp_rate", &mut self.fp_rate),
            ("jitter_sigma", &mut self.jitter_sigma),
            ("miss_probability", &mut self.miss_probability),
            ("noise_sigma", &mut self.noise_sigma),
            ("seed", &mut self.seed),
        ]
    }

    fn validate(&self) -> Result<()> {
        let nonneg = [
            ("cardiac_amplitude", self.cardiac_amplitude),
            ("respiratory_amplitude", self.respiratory_amplitude),
            ("rotation_amplitude", self.rotation_amplitude),
            ("marker_depth", self.marker_depth),
            ("stent_contrast", self.stent_contrast),
            ("fp_rate", self.fp_rate),
            ("jitter_sigma", self.jitter_sigma),
            ("noise_sigma", self.noise_sigma),
            ("background", self.background),
        ];
        for (k, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(k, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (k, v) in [
            ("cardiac_frequency", self.cardiac_frequency),
            ("respiratory_frequency", self.respiratory_frequency),
        ] {
            if !(0.0..0.5).contains(&v) {
                return Err(Error::config(k, format!("must lie in [0, 0.5) cycles/frame, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.miss_probability) {
            return Err(Error::config("miss_probability", "must lie in [0, 1]"));
        }
        if !(self.marker_sigma > 0.0 && self.marker_sigma.is_finite()) {
            return Err(Error::config("marker_sigma", "must be > 0"));
        }
        if !(self.stent_length > 0.0 && self.stent_length.is_finite()) {
            return Err(Error::config("stent_length", "must be > 0"));
        }
        for (k, v) in [("frames", self.frames), ("width", self.width), ("height", self.height)] {
            if v == 0 {
                return Err(Error::config(k, "must be > 0"));
            }
        }
        Ok(())
    }
}

/// Purposes of the derived random streams.
#[derive(Clone, Copy)]
enum Stream {
    Motion = 1,
    Clutter = 2,
    PixelNoise = 3,
    Marker = 4,
    FalsePositive = 5,
}

fn stream_rng(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | (index & 0xFFFF_FFFF_FFFF));
    rng
}

/// Closed-form stent motion for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    center: Point2,
    orientation: f64,
    half_length: f64,
    cardiac: (f64, f64),
    respiratory: (f64, f64),
    cardiac_phase: [f64; 2],
    respiratory_phase: [f64; 2],
    rotation: (f64, f64, f64),
}

impl Trajectory {
    pub fn from_config(cfg: &SimConfig) -> Self {
        let mut rng = stream_rng(cfg.seed, Stream::Motion, 0);
        let mut phase = || rng.random_range(0.0..TAU);
        let cardiac_phase = [phase(), phase()];
        let respiratory_phase = [phase(), phase()];
        let rotation_phase = phase();
        let orientation = phase() * 0.5;
        Self {
            center: Point2::new((cfg.width as f64 - 1.0) / 2.0, (cfg.height as f64 - 1.0) / 2.0),
            orientation,
            half_length: cfg.stent_length / 2.0,
            cardiac: (cfg.cardiac_amplitude, cfg.cardiac_frequency),
            respiratory: (cfg.respiratory_amplitude, cfg.respiratory_frequency),
            cardiac_phase,
            respiratory_phase,
            rotation: (cfg.rotation_amplitude, cfg.cardiac_frequency, rotation_phase),
        }
    }

    /// Midpoint of the marker pair at frame `t`.
    pub fn midpoint(&self, t: f64) -> Point2 {
        let (ac, fc) = self.cardiac;
        let (ab, fb) = self.respiratory;
        let axis = |k: usize| {
            ac * (TAU * fc * t + self.cardiac_phase[k]).sin()
                + ab * (TAU * fb * t + self.respiratory_phase[k]).sin()
        };
        Point2::new(self.center.x + axis(0), self.center.y + axis(1))
    }

    pub fn angle(&self, t: f64) -> f64 {
        let (ar, fr, pr) = self.rotation;
        self.orientation + ar * (TAU * fr * t + pr).sin()
    }

    pub fn markers(&self, t: f64) -> [Point2; 2] {
        let c = self.midpoint(t);
        let a = self.angle(t);
        let (dx, dy) = (self.half_length * a.cos(), self.half_length * a.sin());
        [Point2::new(c.x - dx, c.y - dy), Point2::new(c.x + dx, c.y + dy)]
    }
}

fn clutter_positions(cfg: &SimConfig) -> Vec<Point2> {
    let margin = 3.0 * cfg.marker_sigma + 1.0;
    let (w, h) = (cfg.width as f64 - 1.0, cfg.height as f64 - 1.0);
    (0..cfg.clutter_count)
        .map(|k| {
            let mut rng = stream_rng(cfg.seed, Stream::Clutter, k as u64);
            let x = if w > 2.0 * margin { rng.random_range(margin..w - margin) } else { w / 2.0 };
            let y = if h > 2.0 * margin { rng.random_range(margin..h - margin) } else { h / 2.0 };
            Point2::new(x, y)
        })
        .collect()
}

/// Darkening (in intensity units, before scaling by contrast) of the mesh band.
fn band_strength(p: Point2, m: [Point2; 2], half_width: f64, period: f64) -> f64 {
    let d = m[1].sub(m[0]);
    let len = d.x.hypot(d.y);
    if len <= 0.0 {
        return 0.0;
    }
    let (ux, uy) = (d.x / len, d.y / len);
    let rel = p.sub(m[0]);
    let u = rel.x * ux + rel.y * uy;
    let v = -rel.x * uy + rel.y * ux;
    let outside = if u < 0.0 { -u } else if u > len { u - len } else { 0.0 };
    let along = (-outside * outside / (2.0 * 1.5 * 1.5)).exp();
    let sd = half_width / 2.0;
    let across = (-v * v / (2.0 * sd * sd)).exp();
    let uc = u - len / 2.0;
    let mesh = 0.5 + 0.25 * ((TAU * (uc + v) / period).cos() + (TAU * (uc - v) / period).cos());
    mesh * along * across
}

/// First `(frame, marker, position)` closer than 3σ to the frame border.
fn first_exit(cfg: &SimConfig, traj: &Trajectory) -> Option<(usize, usize, Point2)> {
    let margin = 3.0 * cfg.marker_sigma;
    let (w, h) = (cfg.width as f64 - 1.0, cfg.height as f64 - 1.0);
    (0..cfg.frames).find_map(|t| {
        let markers = traj.markers(t as f64);
        (0..2)
            .find(|&i| {
                let m = markers[i];
                m.x < margin || m.y < margin || m.x > w - margin || m.y > h - margin
            })
            .map(|i| (t, i, markers[i]))
    })
}

/// Whether every marker stays at least 3σ inside the frame for all frames.
pub fn stays_in_frame(cfg: &SimConfig) -> bool {
    first_exit(cfg, &Trajectory::from_config(cfg)).is_none()
}

/// Renders the sequence and returns it together with its ground truth.
pub fn simulate_sequence(cfg: &SimConfig) -> Result<(Sequence, GroundTruth)> {
    cfg.validate()?;
    let traj = Trajectory::from_config(cfg);
    if let Some((t, i, m)) = first_exit(cfg, &traj) {
        return Err(Error::config(
            "stent_length",
            format!(
                "trajectory leaves the frame: marker {i} at ({:.2}, {:.2}) in frame {t}",
                m.x, m.y
            ),
        ));
    }
    let gt = GroundTruth {
        frames: (0..cfg.frames)
            .map(|t| GtFrame {
                markers: traj.markers(t as f64),
                present: true,
            })
            .collect(),
    };

    let clutter = clutter_positions(cfg);
    let half_width = (0.25 * cfg.stent_length).max(MIN_SIDE) / 2.0;
    let k = (cfg.stent_length / (2.0 * MESH_PERIOD)).round().max(1.0);
    let period = cfg.stent_length / (2.0 * k);

    let frames = gt
        .frames
        .iter()
        .enumerate()
        .map(|(t, g)| render_frame(cfg, t, g.markers, &clutter, half_width, period))
        .collect::<Result<Vec<_>>>()?;
    let seq = Sequence::new(frames, Some(gt.clone()))?;
    Ok((seq, gt))
}

fn render_frame(
    cfg: &SimConfig,
    t: usize,
    markers: [Point2; 2],
    clutter: &[Point2],
    half_width: f64,
    period: f64,
) -> Result<GrayFrame> {
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config("noise_sigma", e.to_string()))?)
    } else {
        None
    };
    let mut rng = stream_rng(cfg.seed, Stream::PixelNoise, t as u64);
    let two_s2 = 2.0 * cfg.marker_sigma * cfg.marker_sigma;
    let reach2 = (5.0 * cfg.marker_sigma).powi(2);
    let dips: Vec<Point2> = markers.iter().chain(clutter.iter()).copied().collect();
    let band_reach = half_width * 3.0 + 5.0;
    let lo = Point2::new(
        markers[0].x.min(markers[1].x) - band_reach,
        markers[0].y.min(markers[1].y) - band_reach,
    );
    let hi = Point2::new(
        markers[0].x.max(markers[1].x) + band_reach,
        markers[0].y.max(markers[1].y) + band_reach,
    );

    let mut data = Vec::with_capacity(cfg.width * cfg.height);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let p = Point2::new(x as f64, y as f64);
            let mut v = cfg.background;
            if cfg.stent_contrast > 0.0 && p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y {
                v -= cfg.stent_contrast * band_strength(p, markers, half_width, period);
            }
            for c in &dips {
                let d2 = (p.x - c.x).powi(2) + (p.y - c.y).powi(2);
                if d2 <= reach2 {
                    v -= cfg.marker_depth * (-d2 / two_s2).exp();
                }
            }
            if let Some(n) = &noise {
                v += n.sample(&mut rng);
            }
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayFrame::new(cfg.width, cfg.height, data)
}

/// Noisy per-frame detection lists drawn directly from the ground truth.
///
/// True markers get Gaussian jitter and Beta(8,2) scores unless missed;
/// false positives arrive as a Poisson count per frame, uniform over the frame,
/// with Beta(4,4) scores. Each frame's list is sorted by descending score.
pub fn simulate_detections(gt: &GroundTruth, cfg: &SimConfig) -> Result<Vec<Vec<LandmarkDetection>>> {
    cfg.validate()?;
    let true_score = Beta::new(8.0, 2.0).expect("valid beta");
    let fp_score = Beta::new(4.0, 4.0).expect("valid beta");
    let jitter = Normal::new(0.0, cfg.jitter_sigma).map_err(|e| Error::config("jitter_sigma", e.to_string()))?;
    let fp_count = (cfg.fp_rate > 0.0)
        .then(|| Poisson::new(cfg.fp_rate).map_err(|e| Error::config("fp_rate", e.to_string())))
        .transpose()?;
    let (w, h) = (cfg.width as f64 - 1.0, cfg.height as f64 - 1.0);

    let mut out = Vec::with_capacity(gt.len());
    for (t, g) in gt.frames.iter().enumerate() {
        let mut dets = Vec::new();
        if g.present {
            for (m, p) in g.markers.iter().enumerate() {
                let mut rng = stream_rng(cfg.seed, Stream::Marker, (2 * t + m) as u64);
                let missed = rng.random::<f64>() < cfg.miss_probability;
                let dx = jitter.sample(&mut rng);
                let dy = jitter.sample(&mut rng);
                let score: f64 = true_score.sample(&mut rng);
                if !missed {
                    dets.push(LandmarkDetection::new(
                        Point2::new(p.x + dx, p.y + dy),
                        score.clamp(0.0, 1.0),
                        t,
                    ));
                }
            }
        }
        if let Some(pois) = &fp_count {
            let mut rng = stream_rng(cfg.seed, Stream::FalsePositive, t as u64);
            let n = pois.sample(&mut rng) as usize;
            for _ in 0..n {
                let x = rng.random_range(0.0..=w);
                let y = rng.random_range(0.0..=h);
                let s: f64 = fp_score.sample(&mut rng);
                dets.push(LandmarkDetection::new(Point2::new(x, y), s.clamp(0.0, 1.0), t));
            }
        }
        dets.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.position.lex_cmp(&b.position))
        });
        out.push(dets);
    }
    Ok(out)
}

/// Largest horizontal excursion of the midpoint over the sequence.
pub fn midpoint_x_span(cfg: &SimConfig) -> f64 {
    let traj = Trajectory::from_config(cfg);
    let xs: Vec<f64> = (0..cfg.frames).map(|t| traj.midpoint(t as f64).x).collect();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SimConfig {
        SimConfig {
            cardiac_amplitude: 0.0,
            respiratory_amplitude: 0.0,
            rotation_amplitude: 0.0,
            noise_sigma: 0.0,
            clutter_count: 0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SimConfig::default();
        let (a, ga) = simulate_sequence(&cfg).unwrap();
        let (b, gb) = simulate_sequence(&cfg).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(ga, gb);
        let other = SimConfig { seed: 2, ..cfg };
        assert_ne!(simulate_sequence(&other).unwrap().0.frames, a.frames);
    }

    #[test]
    fn static_marker_is_frame_minimum() {
        let cfg = quiet();
        let (seq, gt) = simulate_sequence(&cfg).unwrap();
        for (frame, g) in seq.frames.iter().zip(&gt.frames) {
            let min = *frame.data().iter().min().unwrap();
            for m in g.markers {
                let v = frame.get(m.x.round() as usize, m.y.round() as usize);
                assert_eq!(v, min);
            }
        }
        assert_eq!(gt.frames[0], gt.frames[cfg.frames - 1]);
    }

    #[test]
    fn rendered_marker_centroid_matches_ground_truth() {
        let cfg = SimConfig {
            stent_contrast: 0.0,
            ..quiet()
        };
        let (seq, gt) = simulate_sequence(&cfg).unwrap();
        let frame = &seq.frames[0];
        for m in gt.frames[0].markers {
            let (cx, cy) = (m.x.round() as i64, m.y.round() as i64);
            let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for dy in -6..=6 {
                for dx in -6..=6 {
                    let (x, y) = ((cx + dx) as usize, (cy + dy) as usize);
                    let wgt = cfg.background - frame.get(x, y) as f64;
                    sw += wgt;
                    sx += wgt * x as f64;
                    sy += wgt * y as f64;
                }
            }
            let c = Point2::new(sx / sw, sy / sw);
            assert!(c.distance(m) < 0.25, "centroid {c:?} vs {m:?}");
        }
    }

    #[test]
    fn x_span_bounded_by_closed_form() {
        let cfg = SimConfig {
            cardiac_amplitude: 10.0,
            cardiac_frequency: 0.1,
            respiratory_amplitude: 3.0,
            respiratory_frequency: 0.02,
            frames: 40,
            ..SimConfig::default()
        };
        let (_, gt) = simulate_sequence(&cfg).unwrap();
        let mids: Vec<f64> = gt.frames.iter().map(|g| g.markers[0].midpoint(g.markers[1]).x).collect();
        let span = mids.iter().cloned().fold(f64::MIN, f64::max) - mids.iter().cloned().fold(f64::MAX, f64::min);
        assert!(span <= 20.0 + 6.0 + 1e-9, "span {span}");
        assert!((span - midpoint_x_span(&cfg)).abs() < 1e-9);
    }

    #[test]
    fn rejects_trajectory_leaving_frame() {
        let cfg = SimConfig {
            stent_length: 200.0,
            ..SimConfig::default()
        };
        assert!(matches!(simulate_sequence(&cfg), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn rejects_aliased_frequency() {
        let cfg = SimConfig {
            cardiac_frequency: 0.5,
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn noiseless_detections_equal_ground_truth() {
        let cfg = SimConfig {
            jitter_sigma: 0.0,
            miss_probability: 0.0,
            fp_rate: 0.0,
            ..SimConfig::default()
        };
        let (_, gt) = simulate_sequence(&cfg).unwrap();
        let dets = simulate_detections(&gt, &cfg).unwrap();
        for (d, g) in dets.iter().zip(&gt.frames) {
            assert_eq!(d.len(), 2);
            for m in g.markers {
                assert!(d.iter().any(|x| x.position == m));
            }
            assert!(d.iter().all(|x| (0.0..=1.0).contains(&x.score)));
        }
        assert_eq!(dets, simulate_detections(&gt, &cfg).unwrap());
    }

    #[test]
    fn all_missed_leaves_only_false_positives() {
        let cfg = SimConfig {
            miss_probability: 1.0,
            fp_rate: 0.0,
            ..SimConfig::default()
        };
        let (_, gt) = simulate_sequence(&cfg).unwrap();
        let dets = simulate_detections(&gt, &cfg).unwrap();
        assert!(dets.iter().all(|d| d.is_empty()));
    }

    #[test]
    fn false_positive_count_follows_poisson() {
        let cfg = SimConfig {
            frames: 1000,
            cardiac_amplitude: 0.0,
            respiratory_amplitude: 0.0,
            miss_probability: 1.0,
            fp_rate: 3.0,
            ..SimConfig::default()
        };
        let gt = GroundTruth {
            frames: vec![
                GtFrame {
                    markers: [Point2::new(40.0, 64.0), Point2::new(80.0, 64.0)],
                    present: true,
                };
                1000
            ],
        };
        let total: usize = simulate_detections(&gt, &cfg).unwrap().iter().map(Vec::len).sum();
        let sd = 3000f64.sqrt();
        assert!((total as f64 - 3000.0).abs() <= 3.0 * sd, "total {total}");
    }

    #[test]
    fn adding_clutter_keeps_motion_and_noise_streams() {
        let a = SimConfig::default();
        let b = SimConfig {
            clutter_count: a.clutter_count + 1,
            ..a.clone()
        };
        assert_eq!(Trajectory::from_config(&a), Trajectory::from_config(&b));
        assert_eq!(clutter_positions(&a)[..], clutter_positions(&b)[..a.clutter_count]);
    }
}
