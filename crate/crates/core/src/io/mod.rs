//! On-disk record formats.
//!
//! Every file is line-delimited JSON, one object per line, each carrying
//! `"schema": 1`. Parsers return records in a canonical order so that
//! permuting the lines of a file never changes the parsed result.

mod rle;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub use rle::{rle_decode, rle_encode, MaskRaster};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorSource {
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Total order used for detection entries: descending score, then box
/// components ascending so that equal scores still sort deterministically.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        a.bbox
            .to_array()
            .iter()
            .zip(b.bbox.to_array().iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Scored boxes from one detector for one frame, sorted by descending score.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub video_id: String,
    pub frame_index: u32,
    pub source: DetectorSource,
    pub entries: Vec<Detection>,
}

impl FrameDetections {
    /// Builds the frame with entries placed in canonical order.
    pub fn new(
        video_id: impl Into<String>,
        frame_index: u32,
        source: DetectorSource,
        mut entries: Vec<Detection>,
    ) -> Self {
        entries.sort_by(detection_order);
        Self {
            video_id: video_id.into(),
            frame_index,
            source,
            entries,
        }
    }

    pub fn empty(video_id: impl Into<String>, frame_index: u32, source: DetectorSource) -> Self {
        Self::new(video_id, frame_index, source, Vec::new())
    }

    pub fn top1(&self) -> Option<&Detection> {
        self.entries.first()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    CandidateTrack,
    Reference,
    Text,
}

/// Precomputed feature vectors for one prompt (one per frame) or for the
/// referring text (exactly one vector).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub video_id: String,
    pub prompt_id: u32,
    pub kind: FeatureKind,
    pub vectors: Vec<Vec<f64>>,
}

impl FeatureRecord {
    pub fn key(&self) -> String {
        feature_key(&self.video_id, self.kind, self.prompt_id)
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

fn feature_key(video: &str, kind: FeatureKind, prompt_id: u32) -> String {
    let kind = match kind {
        FeatureKind::CandidateTrack => "candidate_track",
        FeatureKind::Reference => "reference",
        FeatureKind::Text => "text",
    };
    format!("{video}/{kind}/{prompt_id}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackKind {
    Raw,
    Reference,
    CandidateTrack,
    GroundTruth,
    Selected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub frame: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub filled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// A per-frame box track as persisted: raw tracker output, reference
/// proposal, candidate track, ground truth or a selected prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    #[serde(rename = "video")]
    pub video_id: String,
    pub prompt_id: u32,
    pub kind: TrackKind,
    pub frames: Vec<TrackFrame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_track: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub video_id: String,
    pub frame: u32,
    pub mask: MaskRaster,
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    schema: u32,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize, Deserialize)]
struct DetectionLine {
    video: String,
    frame: u32,
    source: DetectorSource,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct FeatureLine {
    video: String,
    prompt_id: u32,
    kind: FeatureKind,
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct MaskLine {
    pub video: String,
    pub frame: u32,
    pub width: u32,
    pub height: u32,
    pub rle: Vec<u64>,
}

impl MaskLine {
    pub(crate) fn from_record(r: &MaskRecord) -> Self {
        MaskLine {
            video: r.video_id.clone(),
            frame: r.frame,
            width: r.mask.width(),
            height: r.mask.height(),
            rle: rle_encode(&r.mask),
        }
    }

    pub(crate) fn into_record(self) -> Result<MaskRecord> {
        Ok(MaskRecord {
            mask: rle_decode(&self.rle, self.width, self.height)?,
            video_id: self.video,
            frame: self.frame,
        })
    }
}

/// Reads every non-blank line of a record file, checking the schema version.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records_from(BufReader::new(file), path)
}

fn read_records_from<T: DeserializeOwned, R: BufRead>(
    reader: R,
    path: &Path,
) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: Versioned<T> = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.schema != SCHEMA_VERSION {
            return Err(parse_err(format!(
                "unsupported schema version {}",
                rec.schema
            )));
        }
        out.push((line_no, rec.body));
    }
    Ok(out)
}

/// Writes records one per line with the schema version attached.
pub fn write_records<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for body in records {
        let rec = Versioned {
            schema: SCHEMA_VERSION,
            body,
        };
        serde_json::to_writer(&mut w, &rec)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_detections(path: &Path) -> Result<Vec<FrameDetections>> {
    let lines: Vec<(usize, DetectionLine)> = read_records(path)?;
    let mut groups: BTreeMap<(String, u32, DetectorSource), Vec<Detection>> = BTreeMap::new();
    for (line_no, rec) in lines {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if rec.frame < 1 {
            return Err(parse_err("frame indices start at 1".into()));
        }
        let bbox = BBox::try_from(rec.bbox).map_err(|e| parse_err(e.to_string()))?;
        if !rec.score.is_finite() {
            return Err(parse_err(format!("non-finite score {}", rec.score)));
        }
        let score = if (0.0..=1.0).contains(&rec.score) {
            rec.score
        } else {
            warn!(
                "{}:{line_no}: score {} outside [0,1], clamped",
                path.display(),
                rec.score
            );
            rec.score.clamp(0.0, 1.0)
        };
        let entries = groups.entry((rec.video, rec.frame, rec.source)).or_default();
        if entries.iter().any(|d| d.bbox == bbox) {
            warn!(
                "{}:{line_no}: duplicate box {:?} in the same frame, kept",
                path.display(),
                bbox.to_array()
            );
        }
        entries.push(Detection { bbox, score });
    }
    Ok(groups
        .into_iter()
        .map(|((video, frame, source), entries)| FrameDetections::new(video, frame, source, entries))
        .collect())
}

/// Writes detections in canonical (video, frame, source, score) order.
pub fn write_detections(path: &Path, frames: &[FrameDetections]) -> Result<()> {
    let mut sorted: Vec<&FrameDetections> = frames.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.video_id, a.frame_index, a.source).cmp(&(&b.video_id, b.frame_index, b.source))
    });
    let lines = sorted.into_iter().flat_map(|fd| {
        let mut entries = fd.entries.clone();
        entries.sort_by(detection_order);
        entries.into_iter().map(move |d| DetectionLine {
            video: fd.video_id.clone(),
            frame: fd.frame_index,
            source: fd.source,
            bbox: d.bbox.to_array(),
            score: d.score,
        })
    });
    write_records(path, lines)
}

fn check_features(records: &[FeatureRecord]) -> Result<()> {
    let mut dataset_dim: Option<(usize, String)> = None;
    for rec in records {
        let key = rec.key();
        let dim_err = |message: String| Error::Dimension {
            key: key.clone(),
            message,
        };
        if rec.vectors.is_empty() {
            return Err(dim_err("no vectors".into()));
        }
        if rec.kind == FeatureKind::Text && rec.vectors.len() != 1 {
            return Err(dim_err(format!(
                "text features carry exactly one vector, found {}",
                rec.vectors.len()
            )));
        }
        let d = rec.dim();
        if d == 0 {
            return Err(dim_err("zero-dimensional vector".into()));
        }
        if let Some(bad) = rec.vectors.iter().find(|v| v.len() != d) {
            return Err(dim_err(format!("vector of length {} in a {d}-d record", bad.len())));
        }
        if rec.vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(dim_err("non-finite entry".into()));
        }
        match &dataset_dim {
            None => dataset_dim = Some((d, key.clone())),
            Some((d0, k0)) if *d0 != d => {
                return Err(dim_err(format!("dimension {d} differs from {d0} of {k0}")));
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn sort_features(records: &mut [FeatureRecord]) {
    records.sort_by(|a, b| {
        (&a.video_id, a.kind, a.prompt_id).cmp(&(&b.video_id, b.kind, b.prompt_id))
    });
}

pub fn parse_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let lines: Vec<(usize, FeatureLine)> = read_records(path)?;
    let mut records = Vec::with_capacity(lines.len());
    for (line_no, rec) in lines {
        let key = feature_key(&rec.video, rec.kind, rec.prompt_id);
        if rec.dim == 0 {
            return Err(Error::Dimension {
                key,
                message: format!("line {line_no}: declared dim 0"),
            });
        }
        if let Some(v) = rec.vectors.iter().find(|v| v.len() != rec.dim) {
            return Err(Error::Dimension {
                key,
                message: format!(
                    "line {line_no}: vector of length {} but declared dim {}",
                    v.len(),
                    rec.dim
                ),
            });
        }
        records.push(FeatureRecord {
            video_id: rec.video,
            prompt_id: rec.prompt_id,
            kind: rec.kind,
            vectors: rec.vectors,
        });
    }
    check_features(&records)?;
    sort_features(&mut records);
    Ok(records)
}

pub fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    check_features(records)?;
    let mut sorted = records.to_vec();
    sort_features(&mut sorted);
    write_records(
        path,
        sorted.into_iter().map(|r| FeatureLine {
            dim: r.dim(),
            video: r.video_id,
            prompt_id: r.prompt_id,
            kind: r.kind,
            vectors: r.vectors,
        }),
    )
}

fn sort_tracks(tracks: &mut [TrackRecord]) {
    tracks.sort_by(|a, b| {
        (&a.video_id, a.kind, a.prompt_id).cmp(&(&b.video_id, b.kind, b.prompt_id))
    });
}

pub fn parse_tracks(path: &Path) -> Result<Vec<TrackRecord>> {
    let lines: Vec<(usize, TrackRecord)> = read_records(path)?;
    let mut tracks = Vec::with_capacity(lines.len());
    for (line_no, t) in lines {
        if t.frames.windows(2).any(|w| w[1].frame <= w[0].frame) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("track {} frames not strictly increasing", t.prompt_id),
            });
        }
        tracks.push(t);
    }
    sort_tracks(&mut tracks);
    Ok(tracks)
}

pub fn write_tracks(path: &Path, tracks: &[TrackRecord]) -> Result<()> {
    let mut sorted = tracks.to_vec();
    sort_tracks(&mut sorted);
    write_records(path, sorted)
}

pub fn parse_masks(path: &Path) -> Result<Vec<MaskRecord>> {
    let lines: Vec<(usize, MaskLine)> = read_records(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (line_no, line) in lines {
        out.push(line.into_record().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?);
    }
    out.sort_by(|a, b| (&a.video_id, a.frame).cmp(&(&b.video_id, b.frame)));
    Ok(out)
}

pub fn write_masks(path: &Path, masks: &[MaskRecord]) -> Result<()> {
    let mut sorted: Vec<&MaskRecord> = masks.iter().collect();
    sorted.sort_by(|a, b| (&a.video_id, a.frame).cmp(&(&b.video_id, b.frame)));
    write_records(path, sorted.into_iter().map(MaskLine::from_record))
}

/// Per-video manifest entry: frame size and number of frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoInfo {
    #[serde(rename = "video")]
    pub video_id: String,
    pub width: u32,
    pub height: u32,
    pub frames: u32,
}

pub fn parse_videos(path: &Path) -> Result<Vec<VideoInfo>> {
    let mut out: Vec<VideoInfo> = Vec::new();
    for (line_no, v) in read_records::<VideoInfo>(path)? {
        if v.width == 0 || v.height == 0 || v.frames == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("video {} has an empty frame size or no frames", v.video_id),
            });
        }
        out.push(v);
    }
    out.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    if let Some(w) = out.windows(2).find(|w| w[0].video_id == w[1].video_id) {
        return Err(Error::Validation(format!("video {} listed twice", w[0].video_id)));
    }
    Ok(out)
}

pub fn write_videos(path: &Path, videos: &[VideoInfo]) -> Result<()> {
    let mut sorted = videos.to_vec();
    sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    write_records(path, sorted)
}
