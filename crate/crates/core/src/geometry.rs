//! Axis-aligned boxes in center-size form and the overlap measures built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned box stored as center and size, in pixels.
///
/// Corner form is only ever derived on demand. Serialized as `[cx, cy, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite component in ({cx}, {cy}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "non-positive size in ({cx}, {cy}, {w}, {h})"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = self.w / 2.0;
        let hh = self.h / 2.0;
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    /// Component array `[cx, cy, w, h]`.
    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: IoU minus the fraction of the smallest enclosing box not
/// covered by the union.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let enclosure = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (enclosure - union) / enclosure
}

/// Clip a box to `[0, width] x [0, height]`.
pub fn clamp_to_frame(b: &BBox, width: f64, height: f64) -> Result<BBox> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::InvalidBox(format!(
            "frame size must be positive, got {width}x{height}"
        )));
    }
    let (x1, y1, x2, y2) = b.corners();
    let (cx1, cy1) = (x1.clamp(0.0, width), y1.clamp(0.0, height));
    let (cx2, cy2) = (x2.clamp(0.0, width), y2.clamp(0.0, height));
    if cx2 <= cx1 || cy2 <= cy1 {
        return Err(Error::DegenerateBox(format!(
            "box {:?} lies outside the {width}x{height} frame",
            b.to_array()
        )));
    }
    BBox::from_corners(cx1, cy1, cx2, cy2)
}

/// Per-frame boxes of one video, ordered by strictly increasing frame index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSequence {
    pub video_id: String,
    pub boxes: Vec<(u32, BBox)>,
}

impl BoxSequence {
    pub fn new(video_id: impl Into<String>, boxes: Vec<(u32, BBox)>) -> Result<Self> {
        let seq = Self {
            video_id: video_id.into(),
            boxes,
        };
        seq.check_order()?;
        Ok(seq)
    }

    fn check_order(&self) -> Result<()> {
        for pair in self.boxes.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Alignment(format!(
                    "video {}: frame {} follows frame {}",
                    self.video_id, pair[1].0, pair[0].0
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = u32> + '_ {
        self.boxes.iter().map(|(f, _)| *f)
    }

    pub fn get(&self, frame: u32) -> Option<&BBox> {
        self.boxes
            .binary_search_by_key(&frame, |(f, _)| *f)
            .ok()
            .map(|i| &self.boxes[i].1)
    }

    /// True when the sequence holds exactly frames `1..=num_frames`.
    pub fn covers(&self, num_frames: u32) -> bool {
        self.boxes.len() == num_frames as usize
            && self
                .boxes
                .iter()
                .enumerate()
                .all(|(i, (f, _))| *f == i as u32 + 1)
    }
}

/// Per-frame IoU of two aligned sequences.
pub fn per_frame_iou(a: &BoxSequence, b: &BoxSequence) -> Result<Vec<f64>> {
    if a.video_id != b.video_id {
        return Err(Error::Alignment(format!(
            "video ids differ: {} vs {}",
            a.video_id, b.video_id
        )));
    }
    if a.len() != b.len() || a.frames().zip(b.frames()).any(|(x, y)| x != y) {
        return Err(Error::Alignment(format!(
            "video {}: frame coverage differs ({} vs {} frames)",
            a.video_id,
            a.len(),
            b.len()
        )));
    }
    Ok(a
        .boxes
        .iter()
        .zip(&b.boxes)
        .map(|((_, x), (_, y))| iou(x, y))
        .collect())
}

/// Mean per-frame IoU between two sequences with identical coverage.
pub fn box_miou(a: &BoxSequence, b: &BoxSequence) -> Result<f64> {
    let ious = per_frame_iou(a, b)?;
    if ious.is_empty() {
        return Err(Error::Alignment(format!("video {}: no frames", a.video_id)));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    /// Count unit cells of an integer grid covered by both / either box.
    fn raster_iou(a: &BBox, b: &BBox) -> f64 {
        let inside = |bb: &BBox, x: f64, y: f64| {
            let (x1, y1, x2, y2) = bb.corners();
            x >= x1 && x < x2 && y >= y1 && y < y2
        };
        let (mut inter, mut union) = (0u32, 0u32);
        for i in -20..40 {
            for j in -20..40 {
                let (x, y) = (i as f64 + 0.5, j as f64 + 0.5);
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u32;
                union += (ia || ib) as u32;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let b = bx(5.0, 5.0, 3.0, 4.0);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&bx(1.0, 1.0, 2.0, 2.0), &bx(10.0, 10.0, 2.0, 2.0)), 0.0);
        let a = bx(1.0, 1.0, 2.0, 2.0);
        let c = bx(2.0, 1.0, 2.0, 2.0);
        assert_eq!(raster_iou(&a, &c), 1.0 / 3.0);
        assert!((iou(&a, &c) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn giou_examples() {
        let b = bx(5.0, 5.0, 3.0, 4.0);
        assert_eq!(giou(&b, &b), 1.0);
        // IoU 0, union 8, enclosure 10.
        let g = giou(&bx(1.0, 1.0, 2.0, 2.0), &bx(4.0, 1.0, 2.0, 2.0));
        assert!((g - (0.0 - (10.0 - 8.0) / 10.0)).abs() < 1e-15);
        assert!((g + 0.2).abs() < 1e-15);
        let far = giou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1e6, 0.0, 1.0, 1.0));
        assert!((far + 1.0).abs() < 1e-3);
    }

    #[test]
    fn clamp_examples() {
        let inside = bx(5.0, 5.0, 2.0, 2.0);
        assert_eq!(clamp_to_frame(&inside, 10.0, 10.0).unwrap(), inside);
        let clipped = clamp_to_frame(&bx(0.0, 0.0, 4.0, 4.0), 10.0, 10.0).unwrap();
        assert_eq!(clipped, bx(1.0, 1.0, 2.0, 2.0));
        let err = clamp_to_frame(&bx(-10.0, 5.0, 2.0, 2.0), 10.0, 10.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateBox(_)));
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[1,1,0,1]").is_err());
    }

    #[test]
    fn box_miou_examples() {
        let s = BoxSequence::new(
            "v",
            vec![(1, bx(1.0, 1.0, 2.0, 2.0)), (2, bx(5.0, 5.0, 2.0, 2.0))],
        )
        .unwrap();
        assert_eq!(box_miou(&s, &s).unwrap(), 1.0);

        let t = BoxSequence::new(
            "v",
            vec![(1, bx(1.0, 1.0, 2.0, 2.0)), (2, bx(50.0, 5.0, 2.0, 2.0))],
        )
        .unwrap();
        assert_eq!(box_miou(&s, &t).unwrap(), 0.5);

        let short = BoxSequence::new("v", vec![(1, bx(1.0, 1.0, 2.0, 2.0))]).unwrap();
        assert!(matches!(box_miou(&s, &short), Err(Error::Alignment(_))));
        assert!(BoxSequence::new("v", vec![(2, s.boxes[0].1), (1, s.boxes[0].1)]).is_err());
    }

    #[test]
    fn box_miou_matches_loop() {
        let a = BoxSequence::new(
            "v",
            vec![
                (1, bx(10.0, 10.0, 4.0, 6.0)),
                (2, bx(12.0, 10.0, 4.0, 6.0)),
                (3, bx(14.0, 11.0, 5.0, 6.0)),
            ],
        )
        .unwrap();
        let b = BoxSequence::new(
            "v",
            vec![
                (1, bx(11.0, 10.0, 4.0, 6.0)),
                (2, bx(12.0, 12.0, 3.0, 6.0)),
                (3, bx(30.0, 11.0, 5.0, 6.0)),
            ],
        )
        .unwrap();
        let mut total = 0.0;
        for k in 0..3 {
            let (x1, y1, x2, y2) = a.boxes[k].1.corners();
            let (u1, v1, u2, v2) = b.boxes[k].1.corners();
            let iw = (x2.min(u2) - x1.max(u1)).max(0.0);
            let ih = (y2.min(v2) - y1.max(v1)).max(0.0);
            let inter = iw * ih;
            total += inter / ((x2 - x1) * (y2 - y1) + (u2 - u1) * (v2 - v1) - inter);
        }
        assert!((box_miou(&a, &b).unwrap() - total / 3.0).abs() < 1e-15);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn overlap_measures_are_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(giou(&a, &b), giou(&b, &a));
        }

        #[test]
        fn giou_bounded_by_iou(a in arb_box(), b in arb_box()) {
            let (i, g) = (iou(&a, &b), giou(&a, &b));
            prop_assert!(g <= i + 1e-12);
            prop_assert!((-1.0..=1.0).contains(&g));
            prop_assert!((0.0..=1.0).contains(&i));
        }

        #[test]
        fn iou_affine_invariant(
            a in arb_box(),
            b in arb_box(),
            scale in 0.1..10.0f64,
            dx in -100.0..100.0f64,
            dy in -100.0..100.0f64,
        ) {
            let map = |x: &BBox| BBox::new(x.cx() * scale + dx, x.cy() * scale + dy, x.w() * scale, x.h() * scale).unwrap();
            prop_assert!((iou(&a, &b) - iou(&map(&a), &map(&b))).abs() < 1e-12);
        }

        #[test]
        fn box_miou_between_extremes(pairs in prop::collection::vec((arb_box(), arb_box()), 1..8)) {
            let a = BoxSequence::new("v", pairs.iter().enumerate().map(|(i, p)| (i as u32 + 1, p.0)).collect()).unwrap();
            let b = BoxSequence::new("v", pairs.iter().enumerate().map(|(i, p)| (i as u32 + 1, p.1)).collect()).unwrap();
            let per = per_frame_iou(&a, &b).unwrap();
            let m = box_miou(&a, &b).unwrap();
            let lo = per.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        }
    }
}
