//! Landmark detection: dark top-hat response, heatmap peak extraction,
//! Gaussian heatmap rendering, the asymmetric heatmap loss and the
//! graph-driven heatmap correction.
//!
//! The detector contract is `frame -> heatmap -> detections`. The classical
//! detector produces its heatmap as the per-frame normalized dark top-hat
//! response, so a learned heatmap regressor can replace [`tophat_heatmap`]
//! without touching anything downstream.

use crate::domain::{GrayFrame, LandmarkDetection, Point2};
use crate::kv::{KvFields, KvValue};
use crate::{Error, Result};

/// Per-pixel likelihood map with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "heatmap values",
                expected: width * height,
                actual: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Value at the pixel nearest to `p`, or 0 outside the map.
    pub fn at(&self, p: Point2) -> f64 {
        let (x, y) = (p.x.round(), p.y.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return 0.0;
        }
        self.get(x as usize, y as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    /// Disk structuring element radius (px).
    pub radius: usize,
    pub threshold: f64,
    pub nms_radius: f64,
    /// Sigma of rendered ground-truth heatmaps (px).
    pub heatmap_sigma: f64,
    pub max_detections: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            radius: 5,
            threshold: 0.5,
            nms_radius: 5.0,
            heatmap_sigma: 2.0,
            max_detections: 6,
        }
    }
}

impl KvFields for DetectorParams {
    fn fields(&mut self) -> Vec<(&'static str, &mut dyn KvValue)> {
        vec![
            ("radius", &mut self.radius),
            ("threshold", &mut self.threshold),
            ("nms_radius", &mut self.nms_radius),
            ("heatmap_sigma", &mut self.heatmap_sigma),
            ("max_detections", &mut self.max_detections),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(Error::config("radius", "must be >= 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold", "must lie in (0, 1)"));
        }
        if !(self.nms_radius >= 0.0) {
            return Err(Error::config("nms_radius", "must be >= 0"));
        }
        if !(self.heatmap_sigma > 0.0) {
            return Err(Error::config("heatmap_sigma", "must be > 0"));
        }
        Ok(())
    }
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Grayscale dilation (`take_max`) or erosion over a flat structuring element;
/// out-of-frame pixels are ignored.
fn morph(src: &[f64], w: usize, h: usize, offsets: &[(isize, isize)], take_max: bool) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = if take_max { f64::NEG_INFINITY } else { f64::INFINITY };
            for &(dx, dy) in offsets {
                let (xx, yy) = (x + dx, y + dy);
                if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                    continue;
                }
                let v = src[yy as usize * w + xx as usize];
                acc = if take_max { acc.max(v) } else { acc.min(v) };
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Morphological closing (dilate then erode) with a disk of `radius`.
pub fn closing(frame: &GrayFrame, radius: usize) -> Vec<f64> {
    let offsets = disk_offsets(radius);
    let src: Vec<f64> = frame.data().iter().map(|&v| v as f64).collect();
    let dilated = morph(&src, frame.width(), frame.height(), &offsets, true);
    morph(&dilated, frame.width(), frame.height(), &offsets, false)
}

/// Dark top-hat (closing minus image), normalized to `[0, 1]` by its maximum.
/// A frame without dark structure yields an all-zero map.
pub fn tophat_heatmap(frame: &GrayFrame, radius: usize) -> Heatmap {
    let closed = closing(frame, radius);
    let mut values: Vec<f64> = closed
        .iter()
        .zip(frame.data())
        .map(|(c, &v)| (c - v as f64).max(0.0))
        .collect();
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Heatmap {
        width: frame.width(),
        height: frame.height(),
        values,
    }
}

/// Classical landmark detector: top-hat heatmap followed by peak extraction,
/// keeping at most `max_detections` of the highest-scoring peaks.
pub fn tophat_detect(frame: &GrayFrame, params: &DetectorParams, frame_index: usize) -> Vec<LandmarkDetection> {
    if frame.is_empty() {
        return Vec::new();
    }
    let hm = tophat_heatmap(frame, params.radius);
    detections_from_heatmap(&hm, params, frame_index)
}

pub fn detections_from_heatmap(hm: &Heatmap, params: &DetectorParams, frame_index: usize) -> Vec<LandmarkDetection> {
    let mut dets = extract_peaks(hm, params.threshold, params.nms_radius);
    dets.truncate(params.max_detections);
    for d in &mut dets {
        d.frame = frame_index;
    }
    dets
}

/// Max-composition of unit-peak Gaussians centered on `points`.
pub fn render_heatmap(points: &[Point2], sigma: f64, width: usize, height: usize) -> Heatmap {
    let mut hm = Heatmap::zeros(width, height);
    let two_s2 = 2.0 * sigma * sigma;
    for y in 0..height {
        for x in 0..width {
            let v = points
                .iter()
                .map(|c| {
                    let d2 = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
                    (-d2 / two_s2).exp()
                })
                .fold(0.0, f64::max);
            hm.values[y * width + x] = v;
        }
    }
    hm
}

/// Offset of the vertex of the parabola through `(−1, l), (0, c), (1, r)`.
fn parabola_offset(l: f64, c: f64, r: f64) -> f64 {
    let denom = l - 2.0 * c + r;
    if denom < 0.0 {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Local maxima at or above `threshold`, greedy non-maximum suppression within
/// `nms_radius` (highest value first), then separable quadratic subpixel
/// refinement. Scores are the heatmap value at the peak pixel. The result is
/// sorted by descending score.
pub fn extract_peaks(hm: &Heatmap, threshold: f64, nms_radius: f64) -> Vec<LandmarkDetection> {
    let (w, h) = (hm.width, hm.height);
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = hm.get(x, y);
            if v < threshold || v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    if hm.get(xx as usize, yy as usize) > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((v, x, y));
            }
        }
    }
    // Stable sort keeps row-major order among equal values.
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut kept: Vec<(f64, usize, usize)> = Vec::new();
    for p in peaks {
        let suppressed = kept.iter().any(|k| {
            let d = ((p.1 as f64 - k.1 as f64).powi(2) + (p.2 as f64 - k.2 as f64).powi(2)).sqrt();
            d <= nms_radius
        });
        if !suppressed {
            kept.push(p);
        }
    }

    kept.into_iter()
        .map(|(v, x, y)| {
            let ox = if x > 0 && x + 1 < w {
                parabola_offset(hm.get(x - 1, y), v, hm.get(x + 1, y))
            } else {
                0.0
            };
            let oy = if y > 0 && y + 1 < h {
                parabola_offset(hm.get(x, y - 1), v, hm.get(x, y + 1))
            } else {
                0.0
            };
            LandmarkDetection::new(Point2::new(x as f64 + ox, y as f64 + oy), v, 0)
        })
        .collect()
}

/// Heatmap regression loss that penalizes under-prediction extra:
/// `λ1/N Σ (y − ŷ)² + λ2/N Σ ReLU(y − ŷ)²`.
pub fn heatmap_loss(pred: &Heatmap, gt: &Heatmap, lambda1: f64, lambda2: f64) -> Result<f64> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::DimensionMismatch {
            context: "heatmap_loss",
            expected: gt.values.len(),
            actual: pred.values.len(),
        });
    }
    let n = gt.values.len().max(1) as f64;
    let (mut sq, mut under) = (0.0, 0.0);
    for (&y, &yh) in gt.values.iter().zip(&pred.values) {
        let d = y - yh;
        sq += d * d;
        if d > 0.0 {
            under += d * d;
        }
    }
    Ok(lambda1 / n * sq + lambda2 / n * under)
}

/// Multiplies the `window × window` neighborhood of each detection by that
/// detection's best node probability. Where windows overlap the largest
/// multiplier wins; pixels outside every window are left untouched.
pub fn correct_heatmap(
    hm: &Heatmap,
    detections: &[LandmarkDetection],
    node_probs: &[f64],
    window: usize,
) -> Result<Heatmap> {
    if detections.len() != node_probs.len() {
        return Err(Error::DimensionMismatch {
            context: "correct_heatmap probabilities",
            expected: detections.len(),
            actual: node_probs.len(),
        });
    }
    if window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("correction window must be odd, got {window}")));
    }
    let half = (window / 2) as isize;
    let mut multiplier = vec![f64::NEG_INFINITY; hm.values.len()];
    for (d, &p) in detections.iter().zip(node_probs) {
        let p = p.clamp(0.0, 1.0);
        let (cx, cy) = (d.position.x.round() as isize, d.position.y.round() as isize);
        for y in (cy - half).max(0)..=(cy + half).min(hm.height as isize - 1) {
            for x in (cx - half).max(0)..=(cx + half).min(hm.width as isize - 1) {
                let m = &mut multiplier[y as usize * hm.width + x as usize];
                *m = m.max(p);
            }
        }
    }
    let values = hm
        .values
        .iter()
        .zip(&multiplier)
        .map(|(&v, &m)| if m.is_finite() { v * m } else { v })
        .collect();
    Ok(Heatmap {
        width: hm.width,
        height: hm.height,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dip_frame(centers: &[Point2], sigma: f64, depth: f64) -> GrayFrame {
        GrayFrame::from_fn(64, 64, |x, y| {
            let mut v = 200.0;
            for c in centers {
                let d2 = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
                v -= depth * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            v.round() as u8
        })
    }

    #[test]
    fn constant_frame_has_no_detections() {
        let f = GrayFrame::filled(32, 32, 77);
        assert!(tophat_detect(&f, &DetectorParams::default(), 0).is_empty());
    }

    #[test]
    fn single_dip_detected_at_center() {
        let c = Point2::new(30.3, 21.6);
        let f = dip_frame(&[c], 2.0, 80.0);
        let dets = tophat_detect(&f, &DetectorParams::default(), 4);
        assert_eq!(dets.len(), 1);
        assert!(dets[0].position.distance(c) < 1.0, "{:?}", dets[0]);
        assert_eq!(dets[0].frame, 4);
        assert_eq!(dets[0].score, 1.0);
    }

    #[test]
    fn two_separated_dips_give_two_detections() {
        let a = Point2::new(15.0, 30.0);
        let b = Point2::new(45.0, 30.0);
        let f = dip_frame(&[a, b], 2.0, 80.0);
        let dets = tophat_detect(&f, &DetectorParams::default(), 0);
        assert_eq!(dets.len(), 2);
        for c in [a, b] {
            assert!(dets.iter().any(|d| d.position.distance(c) < 1.0));
        }
    }

    #[test]
    fn max_detections_keeps_highest() {
        let centers: Vec<Point2> = (0..5).map(|i| Point2::new(8.0 + 12.0 * i as f64, 32.0)).collect();
        let f = dip_frame(&centers, 2.0, 80.0);
        let params = DetectorParams {
            max_detections: 3,
            ..DetectorParams::default()
        };
        assert_eq!(tophat_detect(&f, &params, 0).len(), 3);
    }

    #[test]
    fn render_examples() {
        let hm = render_heatmap(&[], 2.0, 8, 8);
        assert!(hm.values().iter().all(|&v| v == 0.0));

        let hm = render_heatmap(&[Point2::new(3.0, 4.0)], 2.0, 8, 8);
        assert_eq!(hm.get(3, 4), 1.0);

        // Two points 2σ apart: the midpoint is σ from each, exp(-1/2).
        let hm = render_heatmap(&[Point2::new(2.0, 5.0), Point2::new(6.0, 5.0)], 2.0, 10, 10);
        assert!((hm.get(4, 5) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn render_extract_roundtrip() {
        let p = Point2::new(20.0, 17.0);
        let hm = render_heatmap(&[p], 2.0, 40, 40);
        let dets = extract_peaks(&hm, 0.5, 5.0);
        assert_eq!(dets.len(), 1);
        assert!(dets[0].position.distance(p) < 0.1);
        assert_eq!(dets[0].score, 1.0);
    }

    #[test]
    fn below_threshold_is_empty() {
        let hm = Heatmap::from_values(3, 3, vec![0.1, 0.2, 0.1, 0.2, 0.4, 0.2, 0.1, 0.2, 0.1]).unwrap();
        assert!(extract_peaks(&hm, 0.5, 1.0).is_empty());
    }

    #[test]
    fn close_peaks_merge_under_nms() {
        // Oracle: scan for strict local maxima, then keep the larger.
        let a = Point2::new(10.0, 10.0);
        let b = Point2::new(13.0, 10.0);
        let mut hm = render_heatmap(&[a], 0.7, 24, 24);
        let other = render_heatmap(&[b], 0.7, 24, 24);
        for (v, o) in hm.values.iter_mut().zip(other.values()) {
            *v = v.max(0.8 * o);
        }
        let maxima = (1..23)
            .flat_map(|y| (1..23).map(move |x| (x, y)))
            .filter(|&(x, y)| {
                let v = hm.get(x, y);
                (-1..=1isize).all(|dy| {
                    (-1..=1isize).all(|dx| {
                        (dx == 0 && dy == 0) || hm.get((x as isize + dx) as usize, (y as isize + dy) as usize) < v
                    })
                })
            })
            .count();
        assert_eq!(maxima, 2);
        let dets = extract_peaks(&hm, 0.5, 5.0);
        assert_eq!(dets.len(), 1);
        assert!(dets[0].position.distance(a) < 0.5);
    }

    #[test]
    fn heatmap_loss_examples() {
        let n = 16;
        let gt = Heatmap::from_values(4, 4, vec![0.0; n]).unwrap();
        assert_eq!(heatmap_loss(&gt, &gt, 1.0, 2.0).unwrap(), 0.0);

        let mut y = vec![0.0; n];
        y[5] = 1.0;
        let gt1 = Heatmap::from_values(4, 4, y.clone()).unwrap();
        // under-prediction: (1 + 2)/N
        assert!((heatmap_loss(&gt, &gt1, 1.0, 2.0).unwrap() - 3.0 / n as f64).abs() < 1e-12);
        // over-prediction: ReLU term vanishes
        assert!((heatmap_loss(&gt1, &gt, 1.0, 2.0).unwrap() - 1.0 / n as f64).abs() < 1e-12);

        let small = Heatmap::zeros(2, 2);
        assert!(heatmap_loss(&small, &gt, 1.0, 2.0).is_err());
    }

    fn det_at(x: f64, y: f64) -> LandmarkDetection {
        LandmarkDetection::new(Point2::new(x, y), 1.0, 0)
    }

    #[test]
    fn correction_examples() {
        let hm = render_heatmap(&[Point2::new(10.0, 10.0), Point2::new(30.0, 10.0)], 2.0, 40, 20);
        let dets = [det_at(10.0, 10.0), det_at(30.0, 10.0)];

        assert_eq!(correct_heatmap(&hm, &dets, &[1.0, 1.0], 9).unwrap(), hm);

        let zeroed = correct_heatmap(&hm, &dets, &[0.0, 1.0], 9).unwrap();
        for y in 0..20 {
            for x in 0..40 {
                let inside = (6..=14).contains(&x) && (6..=14).contains(&y);
                let want = if inside { 0.0 } else { hm.get(x, y) };
                assert_eq!(zeroed.get(x, y), want);
            }
        }

        let halved = correct_heatmap(&hm, &dets, &[0.5, 1.0], 9).unwrap();
        assert_eq!(halved.get(10, 10), 0.5 * hm.get(10, 10));
        assert_eq!(halved.get(12, 9), 0.5 * hm.get(12, 9));

        assert!(correct_heatmap(&hm, &dets, &[1.0], 9).is_err());
        assert!(correct_heatmap(&hm, &dets, &[1.0, 1.0], 8).is_err());
    }

    #[test]
    fn overlapping_windows_take_max_multiplier() {
        let hm = render_heatmap(&[Point2::new(10.0, 10.0)], 3.0, 30, 20);
        let dets = [det_at(10.0, 10.0), det_at(13.0, 10.0)];
        let out = correct_heatmap(&hm, &dets, &[0.2, 0.9], 9).unwrap();
        assert_eq!(out.get(11, 10), 0.9 * hm.get(11, 10));
        assert_eq!(out.get(7, 10), 0.2 * hm.get(7, 10));
    }

    proptest! {
        #[test]
        fn asymmetric_loss_dominates_plain_term(
            y in proptest::collection::vec(0.0..=1.0f64, 9),
            yh in proptest::collection::vec(0.0..=1.0f64, 9),
        ) {
            let gt = Heatmap::from_values(3, 3, y.clone()).unwrap();
            let pred = Heatmap::from_values(3, 3, yh.clone()).unwrap();
            let full = heatmap_loss(&pred, &gt, 1.0, 2.0).unwrap();
            let plain = heatmap_loss(&pred, &gt, 1.0, 0.0).unwrap();
            prop_assert!(full >= plain);
            let over_everywhere = y.iter().zip(&yh).all(|(a, b)| b >= a);
            prop_assert_eq!(full == plain, over_everywhere);
        }

        #[test]
        fn roundtrip_well_separated(k in 1usize..5, seed in 0u64..1000) {
            // k points on a coarse lattice with jittered subpixel offsets
            let pts: Vec<Point2> = (0..k).map(|i| {
                let j = (seed.wrapping_mul(2654435761).wrapping_add(i as u64 * 97)) % 1000;
                Point2::new(10.0 + 20.0 * i as f64 + (j % 10) as f64 * 0.05, 12.0 + (j / 100) as f64 * 0.05)
            }).collect();
            let hm = render_heatmap(&pts, 2.0, 110, 30);
            let dets = extract_peaks(&hm, 0.5, 5.0);
            prop_assert_eq!(dets.len(), k);
            for p in &pts {
                prop_assert!(dets.iter().any(|d| d.position.distance(*p) < 0.1));
            }
        }

        #[test]
        fn correction_never_increases(probs in proptest::collection::vec(0.0..=1.0f64, 3)) {
            let pts = [Point2::new(5.0, 5.0), Point2::new(9.0, 6.0), Point2::new(20.0, 12.0)];
            let hm = render_heatmap(&pts, 2.0, 30, 20);
            let dets: Vec<_> = pts.iter().map(|p| det_at(p.x, p.y)).collect();
            let out = correct_heatmap(&hm, &dets, &probs, 5).unwrap();
            for (a, b) in out.values().iter().zip(hm.values()) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn binary_correction_idempotent(bits in proptest::collection::vec(any::<bool>(), 3)) {
            let pts = [Point2::new(5.0, 5.0), Point2::new(9.0, 6.0), Point2::new(20.0, 12.0)];
            let hm = render_heatmap(&pts, 2.0, 30, 20);
            let dets: Vec<_> = pts.iter().map(|p| det_at(p.x, p.y)).collect();
            let probs: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let once = correct_heatmap(&hm, &dets, &probs, 5).unwrap();
            let twice = correct_heatmap(&once, &dets, &probs, 5).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
