//! Observation-centric SORT-style motion tracker.
//!
//! Each frame: predict every track, associate detections by IoU plus a
//! direction-consistency penalty, correct matched tracks (replaying
//! interpolated virtual observations when a track is recovered after a gap),
//! spawn tracks for leftover detections and retire stale ones.

pub mod assignment;
pub mod kalman;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::io::{Detection, FrameDetections};

pub use assignment::assignment;
pub use kalman::{KalmanConfig, KalmanTrackState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub iou_threshold: f64,
    pub max_age: u32,
    pub min_hits: u32,
    /// Weight of the direction-inconsistency term in the association cost.
    pub direction_weight: f64,
    /// How many frames back to look when estimating a track's direction.
    pub delta_t: u32,
    pub kalman: KalmanConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            max_age: 30,
            min_hits: 1,
            direction_weight: 0.2,
            delta_t: 3,
            kalman: KalmanConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackHypothesis {
    pub track_id: u32,
    pub state: KalmanTrackState,
    pub hits: u32,
    pub time_since_update: u32,
    pub last_observation: BBox,
    pub observed_frames: Vec<Observation>,
    /// Filter state right after the last real observation.
    anchor: KalmanTrackState,
    predicted: BBox,
}

impl TrackHypothesis {
    fn spawn(track_id: u32, obs: Observation, cfg: &KalmanConfig) -> Self {
        let state = KalmanTrackState::from_box(&obs.bbox, cfg);
        Self {
            track_id,
            anchor: state.clone(),
            state,
            hits: 1,
            time_since_update: 0,
            last_observation: obs.bbox,
            observed_frames: vec![obs],
            predicted: obs.bbox,
        }
    }

    /// Box predicted for the current frame (falls back to the last
    /// observation when the filter's box is degenerate).
    pub fn predicted_box(&self) -> BBox {
        self.predicted
    }

    /// Unit direction of recent motion, from the oldest observation within
    /// `delta_t` frames of the last one towards the last one.
    pub fn direction(&self, delta_t: u32) -> Option<(f64, f64)> {
        let last = self.observed_frames.last()?;
        let from = last.frame.saturating_sub(delta_t);
        let prev = self
            .observed_frames
            .iter()
            .find(|o| o.frame >= from && o.frame < last.frame)?;
        unit(
            last.bbox.cx() - prev.bbox.cx(),
            last.bbox.cy() - prev.bbox.cy(),
        )
    }

    fn predict(&mut self, cfg: &KalmanConfig) -> Result<()> {
        self.state = self.state.predict(cfg)?;
        self.time_since_update += 1;
        self.predicted = self.state.to_box().unwrap_or(self.last_observation);
        Ok(())
    }

    fn correct(&mut self, obs: Observation, cfg: &KalmanConfig) -> Result<()> {
        let gap = self.time_since_update.saturating_sub(1);
        if gap > 0 {
            // re-anchor at the last real observation and replay a straight
            // line of virtual observations across the missed frames
            let (a, b) = (self.last_observation, obs.bbox);
            let mut state = self.anchor.clone();
            for step in 1..=gap {
                let t = step as f64 / (gap + 1) as f64;
                let virtual_box = BBox::new(
                    a.cx() + (b.cx() - a.cx()) * t,
                    a.cy() + (b.cy() - a.cy()) * t,
                    a.w() + (b.w() - a.w()) * t,
                    a.h() + (b.h() - a.h()) * t,
                )?;
                state = state.predict(cfg)?.update(&virtual_box, cfg)?;
            }
            self.state = state.predict(cfg)?.update(&obs.bbox, cfg)?;
        } else {
            self.state = self.state.update(&obs.bbox, cfg)?;
        }
        self.anchor = self.state.clone();
        self.hits += 1;
        self.time_since_update = 0;
        self.last_observation = obs.bbox;
        self.observed_frames.push(obs);
        Ok(())
    }
}

fn unit(dx: f64, dy: f64) -> Option<(f64, f64)> {
    let norm = (dx * dx + dy * dy).sqrt();
    (norm > 1e-9).then(|| (dx / norm, dy / norm))
}

/// Angle between the track's motion and the direction from its last
/// observation to `det`, scaled to `[0, 1]`. Zero when either is undefined.
pub fn direction_inconsistency(track: &TrackHypothesis, det: &BBox, delta_t: u32) -> f64 {
    let Some((vx, vy)) = track.direction(delta_t) else {
        return 0.0;
    };
    let last = track.last_observation;
    let Some((dx, dy)) = unit(det.cx() - last.cx(), det.cy() - last.cy()) else {
        return 0.0;
    };
    (vx * dx + vy * dy).clamp(-1.0, 1.0).acos() / std::f64::consts::PI
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Association {
    /// `(track index, detection index)`.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Cost used by [`associate`]: `-IoU + weight * inconsistency`.
pub fn association_cost(
    tracks: &[TrackHypothesis],
    detections: &[Detection],
    direction_weight: f64,
    delta_t: u32,
) -> DMatrix<f64> {
    DMatrix::from_fn(tracks.len(), detections.len(), |i, j| {
        let det = &detections[j].bbox;
        -iou(&tracks[i].predicted_box(), det)
            + direction_weight * direction_inconsistency(&tracks[i], det, delta_t)
    })
}

pub fn associate(
    tracks: &[TrackHypothesis],
    detections: &[Detection],
    iou_threshold: f64,
    direction_weight: f64,
    delta_t: u32,
) -> Association {
    let cost = association_cost(tracks, detections, direction_weight, delta_t);
    let mut track_used = vec![false; tracks.len()];
    let mut det_used = vec![false; detections.len()];
    let mut matches = Vec::new();
    for (t, d) in assignment(&cost) {
        if iou(&tracks[t].predicted_box(), &detections[d].bbox) < iou_threshold {
            continue;
        }
        track_used[t] = true;
        det_used[d] = true;
        matches.push((t, d));
    }
    Association {
        matches,
        unmatched_tracks: (0..tracks.len()).filter(|&t| !track_used[t]).collect(),
        unmatched_detections: (0..detections.len()).filter(|&d| !det_used[d]).collect(),
    }
}

/// Identity-consistent observations of one object as produced by [`run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrack {
    pub track_id: u32,
    pub observations: Vec<Observation>,
}

/// Tracker for a single video.
#[derive(Debug, Clone)]
pub struct Tracker {
    config: TrackerConfig,
    active: Vec<TrackHypothesis>,
    retired: Vec<TrackHypothesis>,
    next_id: u32,
    last_frame: Option<u32>,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self {
            config,
            active: Vec::new(),
            retired: Vec::new(),
            next_id: 1,
            last_frame: None,
        }
    }

    pub fn active_tracks(&self) -> &[TrackHypothesis] {
        &self.active
    }

    /// Advance by one frame. Returns `(track_id, box)` for every confirmed
    /// track observed in this frame, ordered by track id.
    pub fn step(&mut self, frame: &FrameDetections) -> Result<Vec<(u32, BBox)>> {
        if let Some(last) = self.last_frame {
            if frame.frame_index <= last {
                return Err(Error::FrameOrder {
                    last,
                    got: frame.frame_index,
                });
            }
            // frames with no record are empty frames
            for missing in last + 1..frame.frame_index {
                self.advance(missing, &[])?;
            }
        }
        self.advance(frame.frame_index, &frame.entries)
    }

    fn advance(&mut self, frame_index: u32, detections: &[Detection]) -> Result<Vec<(u32, BBox)>> {
        let cfg = self.config;
        self.last_frame = Some(frame_index);
        for track in &mut self.active {
            track.predict(&cfg.kalman)?;
        }
        let assoc = associate(
            &self.active,
            detections,
            cfg.iou_threshold,
            cfg.direction_weight,
            cfg.delta_t,
        );
        for &(t, d) in &assoc.matches {
            let det = detections[d];
            self.active[t].correct(
                Observation {
                    frame: frame_index,
                    bbox: det.bbox,
                    score: det.score,
                },
                &cfg.kalman,
            )?;
        }
        for &d in &assoc.unmatched_detections {
            let det = detections[d];
            let obs = Observation {
                frame: frame_index,
                bbox: det.bbox,
                score: det.score,
            };
            self.active
                .push(TrackHypothesis::spawn(self.next_id, obs, &cfg.kalman));
            self.next_id += 1;
        }
        let (keep, stale): (Vec<_>, Vec<_>) = std::mem::take(&mut self.active)
            .into_iter()
            .partition(|t| t.time_since_update <= cfg.max_age);
        self.active = keep;
        self.retired.extend(stale);

        let mut out: Vec<(u32, BBox)> = self
            .active
            .iter()
            .filter(|t| t.time_since_update == 0 && t.hits >= cfg.min_hits)
            .map(|t| (t.track_id, t.last_observation))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    /// All tracks seen so far that reached `min_hits`, ordered by id.
    pub fn finish(self) -> Vec<RawTrack> {
        let min_hits = self.config.min_hits;
        let mut tracks: Vec<RawTrack> = self
            .retired
            .into_iter()
            .chain(self.active)
            .filter(|t| t.hits >= min_hits)
            .map(|t| RawTrack {
                track_id: t.track_id,
                observations: t.observed_frames,
            })
            .collect();
        tracks.sort_by_key(|t| t.track_id);
        tracks
    }
}

/// Track one video end to end.
pub fn run(frames: &[FrameDetections], config: &TrackerConfig) -> Result<Vec<RawTrack>> {
    let mut tracker = Tracker::new(*config);
    for frame in frames {
        tracker.step(frame)?;
    }
    Ok(tracker.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::DetectorSource;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    fn frame(idx: u32, boxes: &[BBox]) -> FrameDetections {
        FrameDetections::new(
            "v",
            idx,
            DetectorSource::Pretrained,
            boxes
                .iter()
                .map(|b| Detection {
                    bbox: *b,
                    score: 0.9,
                })
                .collect(),
        )
    }

    fn track_at(b: BBox) -> TrackHypothesis {
        let mut t = TrackHypothesis::spawn(
            1,
            Observation {
                frame: 1,
                bbox: b,
                score: 1.0,
            },
            &KalmanConfig::default(),
        );
        t.predict(&KalmanConfig::default()).unwrap();
        t
    }

    fn dets(boxes: &[BBox]) -> Vec<Detection> {
        boxes
            .iter()
            .map(|b| Detection {
                bbox: *b,
                score: 0.5,
            })
            .collect()
    }

    #[test]
    fn associate_high_iou_matches() {
        let t = track_at(bx(10.0, 10.0, 10.0, 10.0));
        let a = associate(&[t], &dets(&[bx(10.5, 10.0, 10.0, 10.0)]), 0.3, 0.2, 3);
        assert_eq!(a.matches, vec![(0, 0)]);
        assert!(a.unmatched_tracks.is_empty() && a.unmatched_detections.is_empty());
    }

    #[test]
    fn associate_low_iou_rejected() {
        let t = track_at(bx(10.0, 10.0, 10.0, 10.0));
        // IoU of 10x10 boxes offset by 8.2 along x is about 0.1
        let d = bx(18.2, 10.0, 10.0, 10.0);
        assert!((iou(&t.predicted_box(), &d) - 0.0989).abs() < 1e-3);
        let a = associate(&[t], &dets(&[d]), 0.3, 0.2, 3);
        assert!(a.matches.is_empty());
        assert_eq!(a.unmatched_tracks, vec![0]);
        assert_eq!(a.unmatched_detections, vec![0]);
    }

    #[test]
    fn crossing_pair_matches_enumeration() {
        let cfg = TrackerConfig::default();
        // two tracks moving towards each other along x
        let mut tracker = Tracker::new(cfg);
        for (k, f) in (1..=4).enumerate() {
            let k = k as f64;
            tracker
                .step(&frame(f, &[bx(20.0 + 4.0 * k, 20.0, 10.0, 10.0), bx(40.0 - 4.0 * k, 22.0, 10.0, 10.0)]))
                .unwrap();
        }
        let mut tracks = tracker.active_tracks().to_vec();
        for t in &mut tracks {
            t.predict(&cfg.kalman).unwrap();
        }
        let detections = dets(&[bx(33.0, 21.0, 10.0, 10.0), bx(31.0, 21.0, 10.0, 10.0)]);
        let cost = association_cost(&tracks, &detections, 0.2, 3);
        let straight = cost[(0, 0)] + cost[(1, 1)];
        let swapped = cost[(0, 1)] + cost[(1, 0)];
        let expected = if straight <= swapped {
            vec![(0, 0), (1, 1)]
        } else {
            vec![(0, 1), (1, 0)]
        };
        let a = associate(&tracks, &detections, 0.0, 0.2, 3);
        assert_eq!(a.matches, expected);
        // the direction term decides this one: track 0 moves right
        assert_eq!(expected, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn first_frame_spawns_tracks() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        let out = tracker
            .step(&frame(1, &[bx(10.0, 10.0, 5.0, 5.0), bx(50.0, 50.0, 5.0, 5.0), bx(90.0, 10.0, 5.0, 5.0)]))
            .unwrap();
        assert_eq!(out.iter().map(|(id, _)| *id).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn empty_frame_ages_tracks() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        tracker.step(&frame(1, &[bx(10.0, 10.0, 5.0, 5.0)])).unwrap();
        let out = tracker.step(&frame(2, &[])).unwrap();
        assert!(out.is_empty());
        assert_eq!(tracker.active_tracks()[0].time_since_update, 1);
    }

    #[test]
    fn out_of_order_frame_rejected() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        tracker.step(&frame(3, &[])).unwrap();
        assert!(matches!(
            tracker.step(&frame(3, &[])),
            Err(Error::FrameOrder { last: 3, got: 3 })
        ));
    }

    #[test]
    fn identity_kept_across_short_gap() {
        let mut frames = Vec::new();
        for f in 1..=12u32 {
            let b = bx(20.0 + 3.0 * f as f64, 40.0 + 1.0 * f as f64, 12.0, 16.0);
            frames.push(if (6..=7).contains(&f) { frame(f, &[]) } else { frame(f, &[b]) });
        }
        let tracks = run(&frames, &TrackerConfig::default()).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].observations.len(), 10);
    }

    #[test]
    fn single_object_single_track() {
        let frames: Vec<_> = (1..=20u32)
            .map(|f| frame(f, &[bx(30.0 + 2.0 * f as f64, 50.0, 20.0, 10.0)]))
            .collect();
        let tracks = run(&frames, &TrackerConfig::default()).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(
            tracks[0].observations.iter().map(|o| o.frame).collect::<Vec<_>>(),
            (1..=20).collect::<Vec<_>>()
        );
    }

    #[test]
    fn two_linear_objects_no_switches() {
        let truth = |obj: usize, f: u32| {
            let t = f as f64;
            if obj == 0 {
                bx(20.0 + 4.0 * t, 30.0, 16.0, 16.0)
            } else {
                bx(180.0 - 4.0 * t, 90.0, 16.0, 16.0)
            }
        };
        // present detections in alternating order to exercise association
        let frames: Vec<_> = (1..=25u32)
            .map(|f| {
                if f % 2 == 0 {
                    frame(f, &[truth(0, f), truth(1, f)])
                } else {
                    frame(f, &[truth(1, f), truth(0, f)])
                }
            })
            .collect();
        let tracks = run(&frames, &TrackerConfig::default()).unwrap();
        assert_eq!(tracks.len(), 2);
        for t in &tracks {
            let obj = if t.observations[0].bbox == truth(0, 1) { 0 } else { 1 };
            assert_eq!(t.observations.len(), 25);
            for o in &t.observations {
                assert_eq!(o.bbox, truth(obj, o.frame), "identity switch in track {}", t.track_id);
            }
        }
    }

    #[test]
    fn no_detections_no_tracks() {
        let frames: Vec<_> = (1..=5u32).map(|f| frame(f, &[])).collect();
        assert!(run(&frames, &TrackerConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn noise_free_center_recovery() {
        let cfg = TrackerConfig::default();
        let truth = |f: u32| bx(40.0 + 3.0 * f as f64, 60.0 - 2.0 * f as f64, 20.0, 20.0);
        let mut tracker = Tracker::new(cfg);
        for f in 1..=30u32 {
            tracker.step(&frame(f, &[truth(f)])).unwrap();
            if f > 5 {
                let m = tracker.active_tracks()[0].state.measurement();
                let t = truth(f);
                assert!((m[0] - t.cx()).abs() < 1e-3, "frame {f}: {} vs {}", m[0], t.cx());
                assert!((m[1] - t.cy()).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn retire_after_max_age() {
        let cfg = TrackerConfig {
            max_age: 2,
            ..TrackerConfig::default()
        };
        let mut tracker = Tracker::new(cfg);
        tracker.step(&frame(1, &[bx(10.0, 10.0, 5.0, 5.0)])).unwrap();
        tracker.step(&frame(2, &[])).unwrap();
        tracker.step(&frame(3, &[])).unwrap();
        assert_eq!(tracker.active_tracks().len(), 1);
        tracker.step(&frame(4, &[])).unwrap();
        assert!(tracker.active_tracks().is_empty());
        assert_eq!(tracker.finish().len(), 1);
    }

    #[test]
    fn min_hits_filters_output() {
        let cfg = TrackerConfig {
            min_hits: 2,
            ..TrackerConfig::default()
        };
        let frames = vec![
            frame(1, &[bx(10.0, 10.0, 5.0, 5.0), bx(80.0, 80.0, 5.0, 5.0)]),
            frame(2, &[bx(10.0, 10.0, 5.0, 5.0)]),
        ];
        let tracks = run(&frames, &cfg).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].track_id, 1);
    }
}
