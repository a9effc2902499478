//! Normalized boxes, frame spans and tubes, plus the overlap measures used
//! for both training costs and evaluation.
//!
//! All coordinates live in the unit square `[0,1]²` of the image. Boxes are
//! stored in center form `(cx, cy, w, h)`; corner form `(x1, y1, x2, y2)` is
//! derived on demand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned box in normalized center form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Finite with non-negative extent.
    pub fn is_valid(&self) -> bool {
        self.is_finite() && self.w >= 0.0 && self.h >= 0.0
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Geometry(format!("invalid box {self:?}")))
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    /// Scale about the origin.
    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }

    /// Intersected with the unit square; may become degenerate.
    pub fn clipped(&self) -> Self {
        let [x1, y1, x2, y2] = self.corners();
        let x1 = x1.clamp(0.0, 1.0);
        let y1 = y1.clamp(0.0, 1.0);
        let x2 = x2.clamp(x1, 1.0);
        let y2 = y2.clamp(y1, 1.0);
        Self::from_corners(x1, y1, x2, y2)
    }

    pub fn l1_distance(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }
}

/// An overlap value together with the degenerate-input warning flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub value: f64,
    pub degenerate: bool,
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

/// IoU, flagging the case where the union has zero area.
pub fn box_iou_checked(a: &BBox, b: &BBox) -> Overlap {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        log::warn!("IoU of two degenerate boxes {a:?} / {b:?}; scoring 0");
        return Overlap {
            value: 0.0,
            degenerate: true,
        };
    }
    Overlap {
        value: (inter / union).clamp(0.0, 1.0),
        degenerate: false,
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    box_iou_checked(a, b).value
}

/// Generalized IoU: `IoU - (enclosing - union) / enclosing`.
pub fn box_giou_checked(a: &BBox, b: &BBox) -> Overlap {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)).max(0.0) * (ay2.max(by2) - ay1.min(by1)).max(0.0);
    if enclosing <= 0.0 || union <= 0.0 {
        log::warn!("GIoU with degenerate enclosing box {a:?} / {b:?}; scoring 0");
        return Overlap {
            value: 0.0,
            degenerate: true,
        };
    }
    Overlap {
        value: inter / union - (enclosing - union) / enclosing,
        degenerate: false,
    }
}

pub fn box_giou(a: &BBox, b: &BBox) -> f64 {
    box_giou_checked(a, b).value
}

/// Closed interval of frame indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalSpan {
    pub start_frame: usize,
    pub end_frame: usize,
}

impl TemporalSpan {
    pub fn new(start_frame: usize, end_frame: usize) -> Result<Self> {
        if start_frame > end_frame {
            return Err(Error::Geometry(format!(
                "span start {start_frame} after end {end_frame}"
            )));
        }
        Ok(Self {
            start_frame,
            end_frame,
        })
    }

    /// Span covering all `num_frames` frames of a video.
    pub fn full(num_frames: usize) -> Result<Self> {
        if num_frames == 0 {
            return Err(Error::Geometry("video with zero frames".into()));
        }
        Self::new(0, num_frames - 1)
    }

    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start_frame..=self.end_frame).contains(&t)
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.start_frame..=self.end_frame
    }

    pub fn fits_within(&self, num_frames: usize) -> bool {
        self.end_frame < num_frames
    }

    /// Number of frames in both spans.
    pub fn intersection_len(&self, other: &TemporalSpan) -> usize {
        let lo = self.start_frame.max(other.start_frame);
        let hi = self.end_frame.min(other.end_frame);
        if lo > hi {
            0
        } else {
            hi - lo + 1
        }
    }

    pub fn union_len(&self, other: &TemporalSpan) -> usize {
        self.len() + other.len() - self.intersection_len(other)
    }
}

pub fn temporal_iou(a: &TemporalSpan, b: &TemporalSpan) -> f64 {
    a.intersection_len(b) as f64 / a.union_len(b) as f64
}

/// A span plus exactly one box per frame of the span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TubeRecord", into = "TubeRecord")]
pub struct Tube {
    span: TemporalSpan,
    boxes: Vec<BBox>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TubeRecord {
    start: usize,
    end: usize,
    boxes: Vec<BBox>,
}

impl TryFrom<TubeRecord> for Tube {
    type Error = Error;

    fn try_from(r: TubeRecord) -> Result<Self> {
        Tube::new(TemporalSpan::new(r.start, r.end)?, r.boxes)
    }
}

impl From<Tube> for TubeRecord {
    fn from(t: Tube) -> Self {
        TubeRecord {
            start: t.span.start_frame,
            end: t.span.end_frame,
            boxes: t.boxes,
        }
    }
}

impl Tube {
    pub fn new(span: TemporalSpan, boxes: Vec<BBox>) -> Result<Self> {
        if boxes.len() != span.len() {
            return Err(Error::Geometry(format!(
                "tube span {}..={} has {} frames but {} boxes",
                span.start_frame,
                span.end_frame,
                span.len(),
                boxes.len()
            )));
        }
        for (i, b) in boxes.iter().enumerate() {
            if !b.is_valid() {
                return Err(Error::Geometry(format!(
                    "tube box at frame {} is invalid: {b:?}",
                    span.start_frame + i
                )));
            }
        }
        Ok(Self { span, boxes })
    }

    /// Build from `(frame, box)` pairs; frames must be contiguous.
    pub fn from_frames(frames: impl IntoIterator<Item = (usize, BBox)>) -> Result<Self> {
        let mut pairs: Vec<(usize, BBox)> = frames.into_iter().collect();
        pairs.sort_by_key(|(t, _)| *t);
        let (first, last) = match (pairs.first(), pairs.last()) {
            (Some(f), Some(l)) => (f.0, l.0),
            _ => return Err(Error::Geometry("tube without frames".into())),
        };
        for (k, (t, _)) in pairs.iter().enumerate() {
            if *t != first + k {
                return Err(Error::Geometry(format!(
                    "tube frames are not contiguous at frame {t}"
                )));
            }
        }
        Tube::new(
            TemporalSpan::new(first, last)?,
            pairs.into_iter().map(|(_, b)| b).collect(),
        )
    }

    pub fn span(&self) -> TemporalSpan {
        self.span
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn get(&self, t: usize) -> Option<&BBox> {
        if self.span.contains(t) {
            self.boxes.get(t - self.span.start_frame)
        } else {
            None
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &BBox)> {
        self.span.frames().zip(self.boxes.iter())
    }
}

/// Spatio-temporal overlap `(1/|S_U|) Σ_{t ∈ S_I} IoU_t`.
pub fn viou(pred: &Tube, gt: &Tube) -> f64 {
    let union = pred.span.union_len(&gt.span);
    let sum: f64 = gt
        .iter()
        .filter_map(|(t, g)| pred.get(t).map(|p| box_iou(p, g)))
        .sum();
    sum / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::from_corners(x1, y1, x2, y2)
    }

    #[test]
    fn center_corner_round_trip() {
        let b = BBox::new(0.31, 0.77, 0.2, 0.05);
        let [x1, y1, x2, y2] = b.corners();
        assert!(x1 <= x2 && y1 <= y2);
        let back = BBox::from_corners(x1, y1, x2, y2);
        for (u, v) in b.to_array().iter().zip(back.to_array()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        let p = corners(0.0, 0.0, 0.2, 0.2);
        let q = corners(0.5, 0.5, 0.7, 0.7);
        assert_eq!(box_iou(&p, &q), 0.0);
    }

    #[test]
    fn degenerate_pair_flags_warning() {
        let z = BBox::new(0.3, 0.3, 0.0, 0.0);
        let o = box_iou_checked(&z, &z);
        assert!(o.degenerate);
        assert_eq!(o.value, 0.0);
        let g = box_giou_checked(&z, &z);
        assert!(g.degenerate);
        assert_eq!(g.value, 0.0);
    }

    #[test]
    fn giou_disjoint_value() {
        let a = corners(0.0, 0.0, 0.1, 0.1);
        let b = corners(0.2, 0.2, 0.3, 0.3);
        assert!((box_giou(&a, &b) + 7.0 / 9.0).abs() < 1e-12);
        assert_eq!(box_giou(&a, &a), 1.0);
    }

    #[test]
    fn temporal_iou_cases() {
        let s = |a, b| TemporalSpan::new(a, b).unwrap();
        assert_eq!(temporal_iou(&s(3, 8), &s(3, 8)), 1.0);
        assert_eq!(temporal_iou(&s(0, 4), &s(5, 9)), 0.0);
        assert!((temporal_iou(&s(2, 5), &s(4, 7)) - 2.0 / 6.0).abs() < 1e-15);
        assert!(TemporalSpan::new(4, 3).is_err());
    }

    #[test]
    fn tube_rejects_wrong_box_count() {
        let span = TemporalSpan::new(2, 4).unwrap();
        let b = BBox::new(0.5, 0.5, 0.1, 0.1);
        assert!(Tube::new(span, vec![b; 2]).is_err());
        assert!(Tube::new(span, vec![b; 3]).is_ok());
        assert!(Tube::from_frames([(1, b), (3, b)]).is_err());
    }

    #[test]
    fn tube_serde_uses_flat_record() {
        let t = Tube::new(
            TemporalSpan::new(1, 2).unwrap(),
            vec![BBox::new(0.5, 0.5, 0.2, 0.2); 2],
        )
        .unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"start":1,"end":2,"boxes":[[0.5,0.5,0.2,0.2],[0.5,0.5,0.2,0.2]]}"#);
        let back: Tube = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<Tube>(r#"{"start":1,"end":2,"boxes":[]}"#).is_err());
    }
}
