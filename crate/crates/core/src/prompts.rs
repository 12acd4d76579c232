//! Temporal prompts: the framewise top-1 reference proposal and the
//! tracker-derived candidate tracks, plus ground-truth analysis oracles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_miou, per_frame_iou, BBox, BoxSequence};
use crate::io::{Detection, DetectorSource, FrameDetections, TrackFrame, TrackKind, TrackRecord};
use crate::tracker::{self, Observation, RawTrack, TrackerConfig};

/// Prompt id of the reference proposal; candidates are numbered from 1.
pub const REFERENCE_ID: u32 = 0;

pub const DEFAULT_COVERAGE_MIN: f64 = 0.3;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceProposal {
    pub boxes: BoxSequence,
    pub scores: Vec<f64>,
    /// Set where the frame had no detection and the previous box was reused.
    pub carried: Vec<bool>,
}

impl ReferenceProposal {
    pub fn video_id(&self) -> &str {
        &self.boxes.video_id
    }

    pub fn num_frames(&self) -> u32 {
        self.boxes.len() as u32
    }

    pub fn to_record(&self) -> TrackRecord {
        TrackRecord {
            video_id: self.boxes.video_id.clone(),
            prompt_id: REFERENCE_ID,
            kind: TrackKind::Reference,
            frames: self
                .boxes
                .boxes
                .iter()
                .zip(&self.scores)
                .zip(&self.carried)
                .map(|(((frame, bbox), score), carried)| TrackFrame {
                    frame: *frame,
                    bbox: *bbox,
                    filled: *carried,
                    score: Some(*score),
                })
                .collect(),
            source_track: None,
        }
    }

    pub fn from_record(rec: &TrackRecord) -> Result<Self> {
        let boxes = BoxSequence::new(
            rec.video_id.clone(),
            rec.frames.iter().map(|f| (f.frame, f.bbox)).collect(),
        )?;
        if !boxes.covers(boxes.len() as u32) {
            return Err(Error::Alignment(format!(
                "reference for {} does not cover frames 1..T",
                rec.video_id
            )));
        }
        Ok(Self {
            boxes,
            scores: rec.frames.iter().map(|f| f.score.unwrap_or(0.0)).collect(),
            carried: rec.frames.iter().map(|f| f.filled).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTrack {
    pub prompt_id: u32,
    pub boxes: BoxSequence,
    /// True where the box was copied from the reference proposal.
    pub filled: Vec<bool>,
    /// Detection confidence on natively tracked frames.
    pub scores: Vec<Option<f64>>,
    pub source_track_id: u32,
}

impl CandidateTrack {
    pub fn video_id(&self) -> &str {
        &self.boxes.video_id
    }

    pub fn native_frames(&self) -> usize {
        self.filled.iter().filter(|f| !**f).count()
    }

    pub fn native_coverage(&self) -> f64 {
        self.native_frames() as f64 / self.filled.len().max(1) as f64
    }

    /// Mean detection score over natively tracked frames.
    pub fn mean_confidence(&self) -> f64 {
        let native: Vec<f64> = self
            .scores
            .iter()
            .zip(&self.filled)
            .filter(|(_, f)| !**f)
            .filter_map(|(s, _)| *s)
            .collect();
        if native.is_empty() {
            0.0
        } else {
            native.iter().sum::<f64>() / native.len() as f64
        }
    }

    /// The tracker observations this candidate was built from.
    pub fn to_raw(&self) -> RawTrack {
        RawTrack {
            track_id: self.source_track_id,
            observations: self
                .boxes
                .boxes
                .iter()
                .zip(&self.filled)
                .zip(&self.scores)
                .filter(|((_, filled), _)| !**filled)
                .map(|(((frame, bbox), _), score)| Observation {
                    frame: *frame,
                    bbox: *bbox,
                    score: score.unwrap_or(0.0),
                })
                .collect(),
        }
    }

    pub fn to_record(&self) -> TrackRecord {
        TrackRecord {
            video_id: self.boxes.video_id.clone(),
            prompt_id: self.prompt_id,
            kind: TrackKind::CandidateTrack,
            frames: self
                .boxes
                .boxes
                .iter()
                .zip(&self.filled)
                .zip(&self.scores)
                .map(|(((frame, bbox), filled), score)| TrackFrame {
                    frame: *frame,
                    bbox: *bbox,
                    filled: *filled,
                    score: *score,
                })
                .collect(),
            source_track: Some(self.source_track_id),
        }
    }

    pub fn from_record(rec: &TrackRecord) -> Result<Self> {
        Ok(Self {
            prompt_id: rec.prompt_id,
            boxes: BoxSequence::new(
                rec.video_id.clone(),
                rec.frames.iter().map(|f| (f.frame, f.bbox)).collect(),
            )?,
            filled: rec.frames.iter().map(|f| f.filled).collect(),
            scores: rec.frames.iter().map(|f| f.score).collect(),
            source_track_id: rec.source_track.unwrap_or(rec.prompt_id),
        })
    }
}

pub fn raw_track_record(video_id: &str, track: &RawTrack) -> TrackRecord {
    TrackRecord {
        video_id: video_id.to_string(),
        prompt_id: track.track_id,
        kind: TrackKind::Raw,
        frames: track
            .observations
            .iter()
            .map(|o| TrackFrame {
                frame: o.frame,
                bbox: o.bbox,
                filled: false,
                score: Some(o.score),
            })
            .collect(),
        source_track: None,
    }
}

pub fn raw_track_from_record(rec: &TrackRecord) -> RawTrack {
    RawTrack {
        track_id: rec.prompt_id,
        observations: rec
            .frames
            .iter()
            .map(|f| Observation {
                frame: f.frame,
                bbox: f.bbox,
                score: f.score.unwrap_or(0.0),
            })
            .collect(),
    }
}

fn frames_by_index(frames: &[FrameDetections]) -> BTreeMap<u32, &FrameDetections> {
    frames.iter().map(|f| (f.frame_index, f)).collect()
}

/// Framewise top-1 of the finetuned detector over frames `1..=num_frames`.
/// A frame without detections reuses the previous frame's box.
pub fn build_reference(
    video_id: &str,
    finetuned: &[FrameDetections],
    num_frames: u32,
) -> Result<ReferenceProposal> {
    if num_frames == 0 {
        return Err(Error::EmptyVideo(video_id.to_string()));
    }
    let by_frame = frames_by_index(finetuned);
    let mut boxes = Vec::with_capacity(num_frames as usize);
    let mut scores = Vec::with_capacity(num_frames as usize);
    let mut carried = Vec::with_capacity(num_frames as usize);
    let mut previous: Option<BBox> = None;
    for frame in 1..=num_frames {
        // entries are already in descending-score order; ties keep list order
        let top = by_frame.get(&frame).and_then(|f| f.entries.first());
        match (top, previous) {
            (Some(det), _) => {
                boxes.push((frame, det.bbox));
                scores.push(det.score);
                carried.push(false);
                previous = Some(det.bbox);
            }
            (None, Some(prev)) => {
                boxes.push((frame, prev));
                scores.push(0.0);
                carried.push(true);
            }
            (None, None) => {
                return Err(Error::MissingAnchor(format!(
                    "video {video_id}: no finetuned detection on frame 1"
                )));
            }
        }
    }
    Ok(ReferenceProposal {
        boxes: BoxSequence::new(video_id, boxes)?,
        scores,
        carried,
    })
}

/// Tracker input for one frame: the top `k` pretrained detections plus the
/// finetuned top-1. Near-duplicates are kept.
pub fn assemble_tracker_input(
    pretrained: &FrameDetections,
    finetuned_top1: Option<Detection>,
    k: usize,
) -> FrameDetections {
    let mut entries: Vec<Detection> = pretrained.entries.iter().take(k).copied().collect();
    entries.extend(finetuned_top1);
    FrameDetections::new(
        pretrained.video_id.clone(),
        pretrained.frame_index,
        DetectorSource::Pretrained,
        entries,
    )
}

/// Assemble tracker input for frames `1..=num_frames` of one video.
pub fn assemble_video_input(
    video_id: &str,
    pretrained: &[FrameDetections],
    finetuned: &[FrameDetections],
    num_frames: u32,
    k: usize,
) -> Vec<FrameDetections> {
    let pre = frames_by_index(pretrained);
    let fine = frames_by_index(finetuned);
    (1..=num_frames)
        .map(|frame| {
            let empty = FrameDetections::empty(video_id, frame, DetectorSource::Pretrained);
            let p = pre.get(&frame).copied().unwrap_or(&empty);
            let top1 = fine.get(&frame).and_then(|f| f.top1().copied());
            assemble_tracker_input(p, top1, k)
        })
        .collect()
}

/// Keep raw tracks observing at least `coverage_min` of the frames and fill
/// their untracked frames with the reference boxes. Output is ordered by
/// descending native coverage then track id, numbered from 1.
pub fn build_candidates(
    raw_tracks: &[RawTrack],
    reference: &ReferenceProposal,
    coverage_min: f64,
) -> Vec<CandidateTrack> {
    let t = reference.num_frames();
    let mut kept: Vec<(usize, &RawTrack)> = raw_tracks
        .iter()
        .filter_map(|track| {
            let native = track
                .observations
                .iter()
                .filter(|o| (1..=t).contains(&o.frame))
                .count();
            (native as f64 / t as f64 >= coverage_min).then_some((native, track))
        })
        .collect();
    kept.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.track_id.cmp(&b.1.track_id)));

    kept.into_iter()
        .enumerate()
        .map(|(i, (_, track))| {
            let obs: BTreeMap<u32, &Observation> =
                track.observations.iter().map(|o| (o.frame, o)).collect();
            let mut boxes = Vec::with_capacity(t as usize);
            let mut filled = Vec::with_capacity(t as usize);
            let mut scores = Vec::with_capacity(t as usize);
            for (frame, ref_box) in &reference.boxes.boxes {
                match obs.get(frame) {
                    Some(o) => {
                        boxes.push((*frame, o.bbox));
                        filled.push(false);
                        scores.push(Some(o.score));
                    }
                    None => {
                        boxes.push((*frame, *ref_box));
                        filled.push(true);
                        scores.push(None);
                    }
                }
            }
            CandidateTrack {
                prompt_id: i as u32 + 1,
                boxes: BoxSequence {
                    video_id: reference.video_id().to_string(),
                    boxes,
                },
                filled,
                scores,
                source_track_id: track.track_id,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptGenerationConfig {
    pub top_k: usize,
    pub coverage_min: f64,
    pub tracker: TrackerConfig,
}

impl Default for PromptGenerationConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            coverage_min: DEFAULT_COVERAGE_MIN,
            tracker: TrackerConfig::default(),
        }
    }
}

/// Reference proposal, raw tracks and candidate tracks for one video.
#[derive(Debug, Clone)]
pub struct VideoPrompts {
    pub reference: ReferenceProposal,
    pub raw_tracks: Vec<RawTrack>,
    pub candidates: Vec<CandidateTrack>,
}

/// The whole prompt generation chain for one video.
pub fn generate_prompts(
    video_id: &str,
    pretrained: &[FrameDetections],
    finetuned: &[FrameDetections],
    num_frames: u32,
    config: &PromptGenerationConfig,
) -> Result<VideoPrompts> {
    let reference = build_reference(video_id, finetuned, num_frames)?;
    let input = assemble_video_input(video_id, pretrained, finetuned, num_frames, config.top_k);
    let raw_tracks = tracker::run(&input, &config.tracker)?;
    let candidates = build_candidates(&raw_tracks, &reference, config.coverage_min);
    Ok(VideoPrompts {
        reference,
        raw_tracks,
        candidates,
    })
}

/// Box sequence of a prompt id (0 = reference).
pub fn prompt_boxes<'a>(
    id: u32,
    candidates: &'a [CandidateTrack],
    reference: &'a ReferenceProposal,
) -> Option<&'a BoxSequence> {
    if id == REFERENCE_ID {
        Some(&reference.boxes)
    } else {
        candidates.iter().find(|c| c.prompt_id == id).map(|c| &c.boxes)
    }
}

/// Prompt with the highest box mIoU against ground truth; the reference is
/// considered first, so it wins ties.
pub fn oracle_best(
    candidates: &[CandidateTrack],
    reference: &ReferenceProposal,
    gt: &BoxSequence,
) -> Result<(u32, f64)> {
    let mut best = (REFERENCE_ID, box_miou(&reference.boxes, gt)?);
    for c in candidates {
        let m = box_miou(&c.boxes, gt)?;
        if m > best.1 {
            best = (c.prompt_id, m);
        }
    }
    Ok(best)
}

/// Candidate with the highest mean native detection confidence.
pub fn oracle_conf(candidates: &[CandidateTrack]) -> Result<&CandidateTrack> {
    let mut best: Option<(&CandidateTrack, f64)> = None;
    for c in candidates {
        let conf = c.mean_confidence();
        if best.is_none_or(|(_, b)| conf > b) {
            best = Some((c, conf));
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::EmptySelection("no candidate tracks".into()))
}

/// Greedy mIoU-ranked merge of prompts (ground truth required).
///
/// All prompts (reference included, all of its frames counting as native)
/// are ranked by box mIoU. The merge starts from the top-ranked prompt; each
/// following prompt contributes its native boxes on frames the merge has
/// not yet covered natively, and that contribution is kept only if it raises
/// the merged mIoU. The result is therefore never below the best single
/// prompt.
pub fn merge_tracks_oracle(
    candidates: &[CandidateTrack],
    reference: &ReferenceProposal,
    gt: &BoxSequence,
) -> Result<BoxSequence> {
    let t = reference.num_frames() as usize;
    struct Ranked<'a> {
        miou: f64,
        boxes: &'a BoxSequence,
        native: Vec<bool>,
        order: usize,
    }
    let mut ranked = vec![Ranked {
        miou: box_miou(&reference.boxes, gt)?,
        boxes: &reference.boxes,
        native: vec![true; t],
        order: 0,
    }];
    for (i, c) in candidates.iter().enumerate() {
        ranked.push(Ranked {
            miou: box_miou(&c.boxes, gt)?,
            boxes: &c.boxes,
            native: c.filled.iter().map(|f| !f).collect(),
            order: i + 1,
        });
    }
    // descending mIoU; candidates before the reference on ties, then list order
    ranked.sort_by(|a, b| {
        b.miou
            .total_cmp(&a.miou)
            .then_with(|| (a.order == 0).cmp(&(b.order == 0)))
            .then(a.order.cmp(&b.order))
    });

    let mut merged = ranked[0].boxes.clone();
    let mut covered = ranked[0].native.clone();
    let mut current = ranked[0].miou;
    for r in &ranked[1..] {
        let mut trial = merged.clone();
        let mut changed = false;
        for k in 0..t {
            if !covered[k] && r.native[k] {
                trial.boxes[k] = r.boxes.boxes[k];
                changed = true;
            }
        }
        if !changed {
            continue;
        }
        let m = box_miou(&trial, gt)?;
        if m > current {
            for k in 0..t {
                covered[k] |= r.native[k];
            }
            merged = trial;
            current = m;
        }
    }
    Ok(merged)
}

/// Oracle-best mIoU of one video for each distinct `K` (ascending).
pub fn k_sweep(
    video_id: &str,
    pretrained: &[FrameDetections],
    finetuned: &[FrameDetections],
    gt: &BoxSequence,
    k_values: &[usize],
    config: &PromptGenerationConfig,
) -> Result<Vec<(usize, f64)>> {
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let num_frames = gt.len() as u32;
    ks.into_iter()
        .map(|k| {
            let cfg = PromptGenerationConfig { top_k: k, ..*config };
            let p = generate_prompts(video_id, pretrained, finetuned, num_frames, &cfg)?;
            Ok((k, oracle_best(&p.candidates, &p.reference, gt)?.1))
        })
        .collect()
}

/// Per-frame IoUs of a prompt against ground truth.
pub fn prompt_frame_ious(boxes: &BoxSequence, gt: &BoxSequence) -> Result<Vec<f64>> {
    per_frame_iou(boxes, gt)
}
