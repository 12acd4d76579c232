//! Region similarity J, contour accuracy F and dataset aggregation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_miou, BoxSequence};
use crate::io::{MaskRaster, MaskRecord};

fn check_shape(pred: &MaskRaster, gt: &MaskRaster) -> Result<()> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

/// Mask IoU; two empty masks count as a perfect match.
pub fn region_j(pred: &MaskRaster, gt: &MaskRaster) -> Result<f64> {
    check_shape(pred, gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, g) in pred.bits().iter().zip(gt.bits()) {
        inter += (*p && *g) as u64;
        union += (*p || *g) as u64;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mask pixels with at least one 4-neighbour outside the mask; pixels on the
/// image border always qualify.
pub fn boundary(mask: &MaskRaster) -> Vec<bool> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let bits = mask.bits();
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !bits[i] {
                continue;
            }
            out[i] = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !bits[i - 1]
                || !bits[i + 1]
                || !bits[i - w]
                || !bits[i + w];
        }
    }
    out
}

fn dilate(map: &[bool], w: usize, h: usize, radius: f64) -> Vec<bool> {
    let r = radius.floor() as i64;
    let r2 = radius * radius;
    let offsets: Vec<(i64, i64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| (dx * dx + dy * dy) as f64 <= r2)
        .collect();
    let mut out = vec![false; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !map[y as usize * w + x as usize] {
                continue;
            }
            for (dx, dy) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    out[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    out
}

/// Fraction of `from` boundary pixels lying within `radius` of `to`'s
/// boundary.
fn boundary_hits(from: &[bool], to_dilated: &[bool]) -> (usize, usize) {
    let total = from.iter().filter(|b| **b).count();
    let hit = from
        .iter()
        .zip(to_dilated)
        .filter(|(f, t)| **f && **t)
        .count();
    (hit, total)
}

/// Boundary F-measure with a Euclidean matching tolerance in pixels.
pub fn contour_f(pred: &MaskRaster, gt: &MaskRaster, tolerance_radius: f64) -> Result<f64> {
    check_shape(pred, gt)?;
    let (w, h) = (pred.width() as usize, pred.height() as usize);
    let (pb, gb) = (boundary(pred), boundary(gt));
    let (p_any, g_any) = (pb.iter().any(|b| *b), gb.iter().any(|b| *b));
    match (p_any, g_any) {
        (false, false) => return Ok(1.0),
        (false, true) | (true, false) => return Ok(0.0),
        _ => {}
    }
    let (p_hit, p_total) = boundary_hits(&pb, &dilate(&gb, w, h, tolerance_radius));
    let (g_hit, g_total) = boundary_hits(&gb, &dilate(&pb, w, h, tolerance_radius));
    let precision = p_hit as f64 / p_total as f64;
    let recall = g_hit as f64 / g_total as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// `ceil(0.008 * diagonal)` pixels.
pub fn default_tolerance(width: u32, height: u32) -> f64 {
    (0.008 * ((width as f64).powi(2) + (height as f64).powi(2)).sqrt()).ceil()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video: String,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box_miou: Option<f64>,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: Vec<VideoScore>,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
    pub box_miou: Option<f64>,
    pub num_videos: usize,
    pub num_frames: usize,
}

fn group_masks(masks: &[MaskRecord]) -> BTreeMap<&str, BTreeMap<u32, &MaskRaster>> {
    let mut out: BTreeMap<&str, BTreeMap<u32, &MaskRaster>> = BTreeMap::new();
    for m in masks {
        out.entry(m.video_id.as_str()).or_default().insert(m.frame, &m.mask);
    }
    out
}

/// Dataset evaluation: frame means per video, then unweighted means over
/// videos. `tolerance` of `None` uses [`default_tolerance`] per frame.
/// Box mIoU is reported when both box maps are given.
pub fn evaluate(
    pred: &[MaskRecord],
    gt: &[MaskRecord],
    tolerance: Option<f64>,
    boxes: Option<(&BTreeMap<String, BoxSequence>, &BTreeMap<String, BoxSequence>)>,
) -> Result<EvalReport> {
    let (pred_by, gt_by) = (group_masks(pred), group_masks(gt));
    let missing: Vec<String> = gt_by
        .iter()
        .flat_map(|(video, frames)| {
            let pred_by = &pred_by;
            frames.keys().filter_map(move |f| {
                let found = pred_by.get(video).is_some_and(|p| p.contains_key(f));
                (!found).then(|| format!("{video}/{f}"))
            })
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }

    let videos: Vec<(&str, &BTreeMap<u32, &MaskRaster>)> = gt_by.iter().map(|(v, f)| (*v, f)).collect();
    let scores: Vec<VideoScore> = videos
        .par_iter()
        .map(|(video, frames)| {
            let preds = &pred_by[video];
            let (mut j_sum, mut f_sum) = (0.0, 0.0);
            for (frame, g) in frames.iter() {
                let p = preds[frame];
                let tol = tolerance.unwrap_or_else(|| default_tolerance(g.width(), g.height()));
                j_sum += region_j(p, g)?;
                f_sum += contour_f(p, g, tol)?;
            }
            let n = frames.len() as f64;
            let (j, f) = (j_sum / n, f_sum / n);
            let box_miou = match boxes {
                Some((pb, gb)) => match (pb.get(*video), gb.get(*video)) {
                    (Some(p), Some(g)) => Some(box_miou(p, g)?),
                    _ => None,
                },
                None => None,
            };
            Ok(VideoScore {
                video: video.to_string(),
                j,
                f,
                jf: (j + f) / 2.0,
                box_miou,
                frames: frames.len(),
            })
        })
        .collect::<Result<_>>()?;

    let n = scores.len().max(1) as f64;
    let j = scores.iter().map(|s| s.j).sum::<f64>() / n;
    let f = scores.iter().map(|s| s.f).sum::<f64>() / n;
    let box_values: Vec<f64> = scores.iter().filter_map(|s| s.box_miou).collect();
    let box_miou = (!box_values.is_empty() && box_values.len() == scores.len())
        .then(|| box_values.iter().sum::<f64>() / n);
    Ok(EvalReport {
        num_frames: scores.iter().map(|s| s.frames).sum(),
        num_videos: scores.len(),
        videos: scores,
        j,
        f,
        jf: (j + f) / 2.0,
        box_miou,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn rect_mask(w: u32, h: u32, x1: u32, y1: u32, x2: u32, y2: u32) -> MaskRaster {
        let mut m = MaskRaster::zeros(w, h);
        for y in y1..y2 {
            for x in x1..x2 {
                m.set(x, y, true);
            }
        }
        m
    }

    /// All-pairs boundary distance oracle.
    pub(crate) fn brute_f(pred: &MaskRaster, gt: &MaskRaster, r: f64) -> f64 {
        let pts = |m: &MaskRaster| {
            let (w, h) = (m.width() as i64, m.height() as i64);
            let mut out = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !m.get(x as u32, y as u32) {
                        continue;
                    }
                    let outside = |nx: i64, ny: i64| nx < 0 || ny < 0 || nx >= w || ny >= h || !m.get(nx as u32, ny as u32);
                    if outside(x - 1, y) || outside(x + 1, y) || outside(x, y - 1) || outside(x, y + 1) {
                        out.push((x, y));
                    }
                }
            }
            out
        };
        let (pb, gb) = (pts(pred), pts(gt));
        if pb.is_empty() && gb.is_empty() {
            return 1.0;
        }
        if pb.is_empty() || gb.is_empty() {
            return 0.0;
        }
        let near = |a: &(i64, i64), set: &Vec<(i64, i64)>| {
            set.iter().any(|b| (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64).sqrt() <= r)
        };
        let p = pb.iter().filter(|a| near(a, &gb)).count() as f64 / pb.len() as f64;
        let rc = gb.iter().filter(|a| near(a, &pb)).count() as f64 / gb.len() as f64;
        if p + rc == 0.0 {
            0.0
        } else {
            2.0 * p * rc / (p + rc)
        }
    }

    #[test]
    fn j_examples() {
        let a = rect_mask(10, 10, 0, 0, 10, 5);
        assert_eq!(region_j(&a, &a).unwrap(), 1.0);
        let b = rect_mask(10, 10, 0, 5, 10, 10);
        assert_eq!(region_j(&a, &b).unwrap(), 0.0);
        let full = rect_mask(10, 10, 0, 0, 10, 10);
        // popcount oracle: 50 shared of 100
        let inter = a.bits().iter().zip(full.bits()).filter(|(x, y)| **x && **y).count();
        let union = a.bits().iter().zip(full.bits()).filter(|(x, y)| **x || **y).count();
        assert_eq!(region_j(&a, &full).unwrap(), inter as f64 / union as f64);
        assert_eq!(region_j(&MaskRaster::zeros(3, 3), &MaskRaster::zeros(3, 3)).unwrap(), 1.0);
        assert!(matches!(region_j(&a, &MaskRaster::zeros(3, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn f_examples() {
        let a = rect_mask(20, 20, 4, 4, 14, 14);
        assert_eq!(contour_f(&a, &a, 2.0).unwrap(), 1.0);
        assert_eq!(contour_f(&MaskRaster::zeros(20, 20), &a, 2.0).unwrap(), 0.0);
        assert_eq!(contour_f(&MaskRaster::zeros(20, 20), &MaskRaster::zeros(20, 20), 2.0).unwrap(), 1.0);
        let shifted = rect_mask(20, 20, 5, 4, 15, 14);
        let f = contour_f(&shifted, &a, 2.0).unwrap();
        assert!((f - brute_f(&shifted, &a, 2.0)).abs() < 1e-12);
        assert!(matches!(contour_f(&a, &MaskRaster::zeros(3, 3), 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn tolerance_default() {
        // diagonal of 854x480 is ~979.6 px -> ceil(7.84) = 8
        assert_eq!(default_tolerance(854, 480), 8.0);
        assert_eq!(default_tolerance(10, 10), 1.0);
    }

    fn mk(video: &str, frame: u32, mask: MaskRaster) -> MaskRecord {
        MaskRecord { video_id: video.into(), frame, mask }
    }

    #[test]
    fn evaluate_perfect_and_means() {
        let a = rect_mask(16, 16, 2, 2, 10, 10);
        let gt = vec![mk("v", 1, a.clone()), mk("v", 2, a.clone())];
        let r = evaluate(&gt, &gt, None, None).unwrap();
        assert_eq!((r.j, r.f, r.jf), (1.0, 1.0, 1.0));

        // video "a" perfect (JF 1.0), video "b" all-miss (JF 0.0)
        let miss = rect_mask(16, 16, 12, 12, 16, 16);
        let gt = vec![mk("a", 1, a.clone()), mk("b", 1, a.clone())];
        let pred = vec![mk("a", 1, a.clone()), mk("b", 1, miss)];
        let r = evaluate(&pred, &gt, Some(1.0), None).unwrap();
        assert_eq!(r.jf, 0.5);
        assert_eq!(r.num_videos, 2);
    }

    #[test]
    fn evaluate_missing_frame() {
        let a = rect_mask(8, 8, 2, 2, 6, 6);
        let gt = vec![mk("v", 1, a.clone()), mk("v", 2, a.clone())];
        match evaluate(&gt[..1], &gt, None, None) {
            Err(Error::Coverage(keys)) => assert_eq!(keys, vec!["v/2".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn evaluate_matches_loop() {
        let mut gt = Vec::new();
        let mut pred = Vec::new();
        for (vi, video) in ["a", "b", "c"].iter().enumerate() {
            for f in 1..=(vi as u32 + 2) {
                gt.push(mk(video, f, rect_mask(24, 20, 3, 3, 12 + f, 12)));
                pred.push(mk(video, f, rect_mask(24, 20, 3 + vi as u32, 4, 13, 12 + f)));
            }
        }
        let r = evaluate(&pred, &gt, Some(2.0), None).unwrap();
        let mut jf_sum = 0.0;
        for video in ["a", "b", "c"] {
            let frames: Vec<_> = gt.iter().filter(|m| m.video_id == video).collect();
            let (mut j, mut f) = (0.0, 0.0);
            for g in &frames {
                let p = pred.iter().find(|m| m.video_id == video && m.frame == g.frame).unwrap();
                j += region_j(&p.mask, &g.mask).unwrap();
                f += brute_f(&p.mask, &g.mask, 2.0);
            }
            let n = frames.len() as f64;
            jf_sum += (j / n + f / n) / 2.0;
        }
        assert!((r.jf - jf_sum / 3.0).abs() < 1e-12);
        for v in &r.videos {
            assert!((v.jf - (v.j + v.f) / 2.0).abs() < 1e-12);
        }
    }

    fn arb_pair() -> impl Strategy<Value = (MaskRaster, MaskRaster)> {
        (2u32..14, 2u32..14).prop_flat_map(|(w, h)| {
            let n = (w * h) as usize;
            (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n))
                .prop_map(move |(a, b)| (MaskRaster::new(w, h, a).unwrap(), MaskRaster::new(w, h, b).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn symmetric((a, b) in arb_pair()) {
            prop_assert_eq!(region_j(&a, &b).unwrap(), region_j(&b, &a).unwrap());
            prop_assert!((contour_f(&a, &b, 1.5).unwrap() - contour_f(&b, &a, 1.5).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn f_monotone_in_tolerance((a, b) in arb_pair(), r in 0.0..4.0f64, extra in 0.0..3.0f64) {
            prop_assert!(contour_f(&a, &b, r).unwrap() <= contour_f(&a, &b, r + extra).unwrap() + 1e-15);
        }

        #[test]
        fn f_matches_bruteforce((a, b) in arb_pair(), r in 0.0..4.0f64) {
            prop_assert!((contour_f(&a, &b, r).unwrap() - brute_f(&a, &b, r)).abs() < 1e-9);
        }
    }
}
