//! Stent enhancement: register tracked marker pairs onto a reference frame
//! with a similarity transform and average the warped frames.

use crate::domain::{GrayFrame, Point2, Sequence};
use crate::track::Track;
use crate::{Error, Result};

/// `p ↦ z·p + t` in complex notation, `z = a + ib = scale·e^{iθ}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity2D {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity2D {
    pub const IDENTITY: Self = Self {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(rotation: f64, scale: f64, translation: Point2) -> Self {
        Self {
            a: scale * rotation.cos(),
            b: scale * rotation.sin(),
            tx: translation.x,
            ty: translation.y,
        }
    }

    pub fn rotation(&self) -> f64 {
        self.b.atan2(self.a)
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn translation(&self) -> Point2 {
        Point2::new(self.tx, self.ty)
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        Point2::new(
            self.a * p.x - self.b * p.y + self.tx,
            self.b * p.x + self.a * p.y + self.ty,
        )
    }

    pub fn inverse(&self) -> Self {
        let n = self.a * self.a + self.b * self.b;
        let (a, b) = (self.a / n, -self.b / n);
        Self {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        }
    }
}

/// The unique similarity with `src[0] ↦ dst[0]` and `src[1] ↦ dst[1]`.
pub fn similarity_from_pairs(src: [Point2; 2], dst: [Point2; 2]) -> Result<Similarity2D> {
    let s = src[1].sub(src[0]);
    let d = dst[1].sub(dst[0]);
    let n = s.x * s.x + s.y * s.y;
    if !(n > 0.0) || !(src[0].is_finite() && src[1].is_finite() && dst[0].is_finite() && dst[1].is_finite()) {
        return Err(Error::InvalidArgument("similarity needs two distinct finite source points".into()));
    }
    // z = d / s
    let a = (d.x * s.x + d.y * s.y) / n;
    let b = (d.y * s.x - d.x * s.y) / n;
    if a == 0.0 && b == 0.0 {
        return Err(Error::InvalidArgument("similarity needs two distinct destination points".into()));
    }
    Ok(Similarity2D {
        a,
        b,
        tx: dst[0].x - (a * src[0].x - b * src[0].y),
        ty: dst[0].y - (b * src[0].x + a * src[0].y),
    })
}

/// Maps an unordered marker pair onto another, choosing the correspondence
/// with the smaller rotation.
pub fn similarity_between_markers(src: [Point2; 2], dst: [Point2; 2]) -> Result<Similarity2D> {
    let direct = similarity_from_pairs(src, dst)?;
    let swapped = similarity_from_pairs([src[1], src[0]], dst)?;
    Ok(if swapped.rotation().abs() < direct.rotation().abs() {
        swapped
    } else {
        direct
    })
}

/// Warped intensities in the output frame and whether each had a source sample.
pub struct Warped {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Inverse-maps every output pixel through `t` and samples the source
/// bilinearly. Pixels whose preimage leaves the frame are 0 and invalid.
pub fn warp_masked(frame: &GrayFrame, t: &Similarity2D) -> Warped {
    let inv = t.inverse();
    let (w, h) = (frame.width(), frame.height());
    let mut values = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = inv.apply(Point2::new(x as f64, y as f64));
            if let Some(v) = frame.sample(p.x, p.y) {
                values[y * w + x] = v;
                valid[y * w + x] = true;
            }
        }
    }
    Warped { values, valid }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn warp_frame(frame: &GrayFrame, t: &Similarity2D) -> GrayFrame {
    let w = warp_masked(frame, t);
    let data = w.values.iter().map(|&v| to_u8(v)).collect();
    GrayFrame::new(frame.width(), frame.height(), data).expect("same dimensions as the source")
}

pub struct Enhanced {
    pub image: GrayFrame,
    /// Frames averaged, nearest to the reference first.
    pub frames_used: Vec<usize>,
}

/// Averages the `n` tracked frames nearest to `reference` (itself included)
/// after aligning their markers onto the reference markers. Uses every
/// tracked frame when fewer than `n` exist.
pub fn enhance(seq: &Sequence, track: &Track, n: usize, reference: usize) -> Result<Enhanced> {
    if n == 0 {
        return Err(Error::InvalidArgument("enhancement needs n >= 1".into()));
    }
    if track.len() != seq.len() {
        return Err(Error::DimensionMismatch {
            context: "track length",
            expected: seq.len(),
            actual: track.len(),
        });
    }
    let ref_markers = track
        .markers(reference)
        .ok_or_else(|| Error::InvalidArgument(format!("reference frame {reference} has no tracked stent")))?;
    let mut tracked: Vec<usize> = (0..track.len()).filter(|&t| track.markers(t).is_some()).collect();
    tracked.sort_by_key(|&t| (t.abs_diff(reference), t));
    tracked.truncate(n);

    let frame = &seq.frames[reference];
    let (w, h) = (frame.width(), frame.height());
    let mut sum = vec![0.0; w * h];
    let mut count = vec![0u32; w * h];
    for &t in &tracked {
        let markers = track.markers(t).expect("filtered to tracked frames");
        let tf = similarity_between_markers(markers, ref_markers)?;
        let warped = warp_masked(&seq.frames[t], &tf);
        for i in 0..w * h {
            if warped.valid[i] {
                sum[i] += warped.values[i];
                count[i] += 1;
            }
        }
    }
    let data = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0 } else { to_u8(s / c as f64) })
        .collect();
    Ok(Enhanced {
        image: GrayFrame::new(w, h, data)?,
        frames_used: tracked,
    })
}

/// Copy of `frame` with a small white cross on each marker.
pub fn overlay_markers(frame: &GrayFrame, markers: &[Point2]) -> GrayFrame {
    let mut out = frame.clone();
    let (w, h) = (frame.width() as isize, frame.height() as isize);
    for m in markers {
        let (cx, cy) = (m.x.round() as isize, m.y.round() as isize);
        for d in -3..=3isize {
            for (x, y) in [(cx + d, cy), (cx, cy + d)] {
                if x >= 0 && y >= 0 && x < w && y < h {
                    out.set(x as usize, y as usize, 255);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{LandmarkDetection, StentCandidate};
    use crate::track::ScoredCandidate;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn p(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    #[test]
    fn similarity_examples() {
        let src = [p(3.0, 4.0), p(10.0, -2.0)];
        let t = similarity_from_pairs(src, src).unwrap();
        assert_eq!((t.rotation(), t.scale()), (0.0, 1.0));
        assert_eq!(t.translation(), p(0.0, 0.0));

        let t = similarity_from_pairs(src, [p(8.0, 1.0), p(15.0, -5.0)]).unwrap();
        assert_eq!(t.translation(), p(5.0, -3.0));
        assert_eq!((t.rotation(), t.scale()), (0.0, 1.0));

        let t = similarity_from_pairs([p(0.0, 0.0), p(1.0, 0.0)], [p(0.0, 0.0), p(0.0, 2.0)]).unwrap();
        assert!((t.rotation() - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(t.scale(), 2.0);
        assert_eq!(t.translation(), p(0.0, 0.0));

        assert!(similarity_from_pairs([p(1.0, 1.0), p(1.0, 1.0)], src).is_err());
    }

    #[test]
    fn marker_correspondence_prefers_small_rotation() {
        let src = [p(0.0, 0.0), p(10.0, 0.0)];
        let dst = [p(10.0, 1.0), p(0.0, 1.0)];
        let t = similarity_between_markers(src, dst).unwrap();
        assert!(t.rotation().abs() < 1e-12);
        assert_eq!(t.translation(), p(0.0, 1.0));
    }

    fn smooth(w: usize, h: usize) -> GrayFrame {
        GrayFrame::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            (128.0 + 60.0 * (x / 9.0).sin() * (y / 11.0).cos()).round() as u8
        })
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let f = smooth(40, 30);
        assert_eq!(warp_frame(&f, &Similarity2D::IDENTITY), f);
    }

    #[test]
    fn integer_translation_shifts_pixels() {
        let f = smooth(20, 10);
        let t = Similarity2D::new(0.0, 1.0, p(3.0, 0.0));
        let w = warp_masked(&f, &t);
        for y in 0..10 {
            for x in 0..20 {
                let i = y * 20 + x;
                if x < 3 {
                    assert!(!w.valid[i]);
                    assert_eq!(w.values[i], 0.0);
                } else {
                    assert!(w.valid[i]);
                    assert_eq!(w.values[i], f.get(x - 3, y) as f64);
                }
            }
        }
    }

    #[test]
    fn warp_round_trip_on_smooth_image() {
        let f = smooth(64, 64);
        let t = Similarity2D::new(0.2, 1.05, p(2.5, -1.5));
        let back = warp_frame(&warp_frame(&f, &t), &t.inverse());
        let mut worst = 0i32;
        for y in 12..52 {
            for x in 12..52 {
                worst = worst.max((back.get(x, y) as i32 - f.get(x, y) as i32).abs());
            }
        }
        assert!(worst < 2, "max error {worst}");
    }

    fn track_from(markers: &[Option<[Point2; 2]>]) -> Track {
        Track {
            frames: markers
                .iter()
                .enumerate()
                .map(|(t, m)| {
                    m.map(|[a, b]| ScoredCandidate {
                        candidate: StentCandidate::from_pair(
                            LandmarkDetection::new(a, 1.0, t),
                            LandmarkDetection::new(b, 1.0, t),
                        ),
                        prob: 1.0,
                    })
                })
                .collect(),
        }
    }

    #[test]
    fn single_frame_enhancement_is_the_reference() {
        let frames: Vec<GrayFrame> = (0..3)
            .map(|k| GrayFrame::from_fn(32, 32, |x, y| ((7 * x + 3 * y + 11 * k) % 256) as u8))
            .collect();
        let seq = Sequence::new(frames.clone(), None).unwrap();
        let m = Some([p(5.0, 5.0), p(25.0, 9.0)]);
        let e = enhance(&seq, &track_from(&[m, m, m]), 1, 1).unwrap();
        assert_eq!(e.image, frames[1]);
        assert_eq!(e.frames_used, vec![1]);
    }

    #[test]
    fn enhancement_uses_nearest_tracked_frames() {
        let seq = Sequence::new(vec![GrayFrame::filled(16, 16, 9); 6], None).unwrap();
        let m = Some([p(2.0, 2.0), p(12.0, 3.0)]);
        let track = track_from(&[m, None, m, m, None, m]);
        let e = enhance(&seq, &track, 7, 3).unwrap();
        assert_eq!(e.frames_used, vec![3, 2, 5, 0]);
        assert!(enhance(&seq, &track, 2, 1).is_err());
        assert!(enhance(&seq, &track, 0, 3).is_err());
    }

    proptest! {
        #[test]
        fn similarity_maps_both_points(
            sx in -50.0..50.0f64, sy in -50.0..50.0f64, dx in 1.0..30.0f64, dy in -30.0..30.0f64,
            ex in -50.0..50.0f64, ey in -50.0..50.0f64, fx in 1.0..30.0f64, fy in -30.0..30.0f64,
        ) {
            let src = [p(sx, sy), p(sx + dx, sy + dy)];
            let dst = [p(ex, ey), p(ex + fx, ey + fy)];
            let t = similarity_from_pairs(src, dst).unwrap();
            for k in 0..2 {
                prop_assert!(t.apply(src[k]).distance(dst[k]) < 1e-9);
            }
            let back = t.inverse();
            prop_assert!(back.apply(dst[0]).distance(src[0]) < 1e-9);
            prop_assert!(t.scale() > 0.0);
        }
    }
}
