//! Geometric and detection types shared by every pipeline stage.
//!
//! All geometry is in continuous pixel units with the origin at the center of
//! the top-left pixel. Pixel `(i, j)` therefore covers `[i - 0.5, i + 0.5)`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Minimum side length (px) of a candidate bounding box.
pub const MIN_SIDE: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn midpoint(self, other: Point2) -> Point2 {
        Point2::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    pub fn sub(self, other: Point2) -> Point2 {
        Point2::new(self.x - other.x, self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Total lexicographic order on `(x, y)`.
    pub fn lex_cmp(&self, other: &Point2) -> Ordering {
        self.x.total_cmp(&other.x).then(self.y.total_cmp(&other.y))
    }
}

/// A candidate balloon marker in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkDetection {
    pub position: Point2,
    pub score: f64,
    pub frame: usize,
}

impl LandmarkDetection {
    pub fn new(position: Point2, score: f64, frame: usize) -> Self {
        Self {
            position,
            score,
            frame,
        }
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.position
            .lex_cmp(&other.position)
            .then(self.score.total_cmp(&other.score))
    }
}

/// Axis-aligned box given by its center and side lengths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center: Point2,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn min_corner(&self) -> Point2 {
        Point2::new(
            self.center.x - 0.5 * self.width,
            self.center.y - 0.5 * self.height,
        )
    }

    pub fn max_corner(&self) -> Point2 {
        Point2::new(
            self.center.x + 0.5 * self.width,
            self.center.y + 0.5 * self.height,
        )
    }
}

/// Box centered on the midpoint of the pair with sides equal to the per-axis
/// separation, floored at [`MIN_SIDE`].
pub fn bbox_from_pair(a: Point2, b: Point2) -> BoundingBox {
    BoundingBox {
        center: a.midpoint(b),
        width: (a.x - b.x).abs().max(MIN_SIDE),
        height: (a.y - b.y).abs().max(MIN_SIDE),
    }
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(b1: &BoundingBox, b2: &BoundingBox) -> f64 {
    let (lo1, hi1) = (b1.min_corner(), b1.max_corner());
    let (lo2, hi2) = (b2.min_corner(), b2.max_corner());
    let ix = (hi1.x.min(hi2.x) - lo1.x.max(lo2.x)).max(0.0);
    let iy = (hi1.y.min(hi2.y) - lo1.y.max(lo2.y)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = b1.area() + b2.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// An ordered landmark pair hypothesized to bracket one stent.
///
/// Landmarks are kept in canonical order (lexicographic by `(x, y)`), so the
/// pair vector and any descriptor derived from it do not depend on the order
/// the detections were supplied in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StentCandidate {
    pub landmarks: [LandmarkDetection; 2],
    pub score: f64,
    pub bbox: BoundingBox,
    pub frame: usize,
}

impl StentCandidate {
    /// Builds a candidate from two detections of the same frame. The score is
    /// the mean of the two landmark scores.
    pub fn from_pair(a: LandmarkDetection, b: LandmarkDetection) -> Self {
        debug_assert_eq!(a.frame, b.frame, "landmarks from different frames");
        let (first, second) = if a.canonical_cmp(&b) == Ordering::Greater {
            (b, a)
        } else {
            (a, b)
        };
        Self {
            landmarks: [first, second],
            score: 0.5 * (first.score + second.score),
            bbox: bbox_from_pair(first.position, second.position),
            frame: first.frame,
        }
    }

    /// Vector from the first to the second canonical landmark.
    pub fn pair_vector(&self) -> Point2 {
        self.landmarks[1].position.sub(self.landmarks[0].position)
    }

    pub fn length(&self) -> f64 {
        self.landmarks[0].position.distance(self.landmarks[1].position)
    }

    pub fn positions(&self) -> [Point2; 2] {
        [self.landmarks[0].position, self.landmarks[1].position]
    }

    pub fn contains_landmark(&self, p: Point2) -> bool {
        self.landmarks.iter().any(|l| l.position == p)
    }
}

/// Single-channel 8-bit frame, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> crate::Result<Self> {
        if data.len() != width * height {
            return Err(crate::Error::DimensionMismatch {
                context: "GrayFrame pixel count",
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bilinear sample with coordinates clamped to the frame.
    pub fn sample_clamped(&self, x: f64, y: f64) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        self.bilinear(xc, yc)
    }

    /// Bilinear sample; `None` when the point lies outside the pixel-center grid.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        const EPS: f64 = 1e-9;
        let (w, h) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(x >= -EPS && y >= -EPS && x <= w + EPS && y <= h + EPS) {
            return None;
        }
        Some(self.bilinear(x.clamp(0.0, w), y.clamp(0.0, h)))
    }

    fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p = |xx, yy| self.get(xx, yy) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Ground truth for one frame: the true marker pair and whether the stent is
/// visible at all.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtFrame {
    pub markers: [Point2; 2],
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GroundTruth {
    pub frames: Vec<GtFrame>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Markers of frame `t`, if the stent is present there.
    pub fn markers(&self, t: usize) -> Option<[Point2; 2]> {
        self.frames.get(t).filter(|f| f.present).map(|f| f.markers)
    }
}

/// A video: frames of identical dimensions plus optional ground truth.
#[derive(Clone, Debug, Default)]
pub struct Sequence {
    pub frames: Vec<GrayFrame>,
    pub ground_truth: Option<GroundTruth>,
}

impl Sequence {
    pub fn new(frames: Vec<GrayFrame>, ground_truth: Option<GroundTruth>) -> crate::Result<Self> {
        if let Some(first) = frames.first() {
            for (t, f) in frames.iter().enumerate() {
                if f.width() != first.width() || f.height() != first.height() {
                    return Err(crate::Error::InvalidArgument(format!(
                        "frame {t} is {}x{}, expected {}x{}",
                        f.width(),
                        f.height(),
                        first.width(),
                        first.height()
                    )));
                }
            }
        }
        if let Some(gt) = &ground_truth {
            if gt.len() != frames.len() {
                return Err(crate::Error::DimensionMismatch {
                    context: "ground truth frame count",
                    expected: frames.len(),
                    actual: gt.len(),
                });
            }
        }
        Ok(Self {
            frames,
            ground_truth,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
