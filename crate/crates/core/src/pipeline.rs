//! File-to-file stages behind the `tenet` command: synth, track, prompts,
//! train, select, segment, eval.
//!
//! Every stage reads the dataset directory and/or earlier stage outputs,
//! works on videos in parallel, writes its outputs in canonical order and
//! leaves its effective configuration next to them as
//! `<stage>.config.json`. Outputs are pure functions of inputs, config and
//! seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_miou, BoxSequence};
use crate::io::{
    parse_detections, parse_features, parse_masks, parse_tracks, parse_videos, read_records, write_detections,
    write_features, write_masks, write_records, write_tracks, write_videos, DetectorSource, FeatureKind,
    FeatureRecord, FrameDetections, MaskRecord, TrackFrame, TrackKind, TrackRecord, VideoInfo,
};
use crate::metrics::{contour_f, default_tolerance, evaluate, region_j, EvalReport};
use crate::preference::{
    grad_check, make_labels, read_checkpoint, sample_track_tokens, select, select_from_probabilities, train,
    write_checkpoint, write_training_log, ModelConfig, PreferenceModel, PreferenceSample, TrainingConfig,
    VideoBatch,
};
use crate::prompts::{
    assemble_video_input, generate_prompts, merge_tracks_oracle, oracle_best, oracle_conf, prompt_boxes,
    raw_track_record, CandidateTrack, PromptGenerationConfig, ReferenceProposal, REFERENCE_ID,
};
use crate::segment::{mock_segment, RemoteConfig, RemoteSegmenter, SegmentRequest};
use crate::synth::{derive_seed, generate, SceneSpec, SuiteSpec, SyntheticEncoder};
use crate::tracker;

/// File names inside the dataset and output directories.
pub mod files {
    pub const VIDEOS: &str = "videos.jsonl";
    pub const DETECTIONS: &str = "detections.jsonl";
    pub const GT_TRACKS: &str = "gt_tracks.jsonl";
    pub const GT_MASKS: &str = "gt_masks.jsonl";
    pub const TEXT_FEATURES: &str = "text_features.jsonl";
    pub const SCENES: &str = "scenes.jsonl";
    pub const RAW_TRACKS: &str = "raw_tracks.jsonl";
    pub const PROMPTS: &str = "prompts.jsonl";
    pub const FEATURES: &str = "features.jsonl";
    pub const MODEL: &str = "model.jsonl";
    pub const TRAIN_LOG: &str = "train_log.jsonl";
    pub const SELECTION: &str = "selection.jsonl";
    pub const SELECTED_TRACKS: &str = "selected_tracks.jsonl";
    pub const MASKS: &str = "masks.jsonl";
    pub const EVAL: &str = "eval.json";
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainStageConfig {
    /// Fraction of videos kept out of training, chosen by a seeded hash of
    /// the video id.
    pub holdout: f64,
    /// Run a finite-difference gradient check on the trained model.
    pub grad_check: bool,
}

impl Default for TrainStageConfig {
    fn default() -> Self {
        Self {
            holdout: 0.0,
            grad_check: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    /// Select with the ground-truth oracle scorer instead of a model.
    pub oracle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    #[default]
    Selected,
    Reference,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    /// Remote segmentation service; the mock segmenter is used when absent.
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub prompt: PromptSource,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_secs: 30.0,
            retries: 3,
            backoff_ms: 200,
            max_in_flight: 4,
            prompt: PromptSource::Selected,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Boundary tolerance in pixels; by default derived from the frame size.
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub jobs: Option<usize>,
    /// Dataset directory (as written by `synth`).
    pub data: PathBuf,
    /// Output directory for stage results.
    pub out: PathBuf,
    /// External prompt features; defaults to `<out>/features.jsonl`.
    pub features: Option<PathBuf>,
    /// Model checkpoint used by `select`.
    pub checkpoint: Option<PathBuf>,
    pub prompts: PromptGenerationConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub train: TrainStageConfig,
    pub select: SelectConfig,
    pub segment: SegmentConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: None,
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            features: None,
            checkpoint: None,
            prompts: PromptGenerationConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            train: TrainStageConfig::default(),
            select: SelectConfig::default(),
            segment: SegmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.prompts.top_k < 1 {
            return fail("prompts.top_k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.prompts.coverage_min) {
            return fail("prompts.coverage_min must lie in [0, 1]".into());
        }
        if self.training.epochs < 1 {
            return fail("training.epochs must be at least 1".into());
        }
        self.training.validate()?;
        self.model.validate()?;
        if !(0.0..1.0).contains(&self.train.holdout) {
            return fail("train.holdout must lie in [0, 1)".into());
        }
        if !(self.segment.timeout_secs.is_finite() && self.segment.timeout_secs > 0.0) {
            return fail("segment.timeout_secs must be positive".into());
        }
        if self.segment.max_in_flight == 0 {
            return fail("segment.max_in_flight must be at least 1".into());
        }
        if let Some(t) = self.eval.tolerance {
            if !(t.is_finite() && t >= 0.0) {
                return fail("eval.tolerance must be non-negative".into());
            }
        }
        if self.jobs == Some(0) {
            return fail("jobs must be at least 1".into());
        }
        Ok(())
    }

    fn data_file(&self, name: &str) -> PathBuf {
        self.data.join(name)
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn features_path(&self) -> PathBuf {
        self.features.clone().unwrap_or_else(|| self.out_file(files::FEATURES))
    }

    /// Whether a video is excluded from training.
    pub fn is_held_out(&self, video_id: &str) -> bool {
        if self.train.holdout <= 0.0 {
            return false;
        }
        let h = derive_seed(self.seed, &format!("holdout/{video_id}"));
        (h as f64 / u64::MAX as f64) < self.train.holdout
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "train/init")
    }

    pub fn shuffle_seed(&self) -> u64 {
        derive_seed(self.seed, "train/shuffle")
    }

    pub fn remote(&self) -> Option<RemoteConfig> {
        self.segment.endpoint.as_ref().map(|endpoint| RemoteConfig {
            endpoint: endpoint.clone(),
            timeout: Duration::from_secs_f64(self.segment.timeout_secs),
            retries: self.segment.retries,
            backoff: Duration::from_millis(self.segment.backoff_ms),
        })
    }
}

/// What a stage did: the files it wrote and a few headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub outputs: Vec<PathBuf>,
    pub metrics: BTreeMap<String, f64>,
}

impl StageReport {
    fn new(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    fn metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }
}

fn require(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_effective_config<T: Serialize>(dir: &Path, stage: &str, config: &T) -> Result<PathBuf> {
    let path = dir.join(format!("{stage}.config.json"));
    write_json(&path, config)?;
    Ok(path)
}

// ---- synth ----

/// What to generate: a random suite, explicit scenes, or both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Video id prefix for suite scenes.
    pub prefix: String,
    pub suite: Option<SuiteSpec>,
    pub scene: Vec<SceneSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            prefix: "vid".into(),
            suite: None,
            scene: Vec::new(),
        }
    }
}

impl SynthConfig {
    /// Concrete scenes; the suite seed is drawn from the pipeline seed.
    pub fn scenes(&self, seed: u64) -> Result<Vec<SceneSpec>> {
        let mut scenes = match &self.suite {
            Some(suite) => SuiteSpec {
                seed: derive_seed(seed, "synth"),
                ..*suite
            }
            .scenes(&self.prefix)?,
            None => Vec::new(),
        };
        scenes.extend(self.scene.iter().cloned());
        if scenes.is_empty() {
            return Err(Error::Validation("synth config describes no scenes".into()));
        }
        scenes.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        if let Some(w) = scenes.windows(2).find(|w| w[0].video_id == w[1].video_id) {
            return Err(Error::Validation(format!("duplicate scene id {}", w[0].video_id)));
        }
        Ok(scenes)
    }
}

/// Generate a synthetic dataset into `out_dir`.
pub fn run_synth(config: &SynthConfig, seed: u64, out_dir: &Path) -> Result<StageReport> {
    let scenes = config.scenes(seed)?;
    let generated = scenes.par_iter().map(generate).collect::<Result<Vec<_>>>()?;
    ensure_dir(out_dir)?;

    let videos: Vec<VideoInfo> = generated.iter().map(|g| g.info.clone()).collect();
    let detections: Vec<FrameDetections> = generated
        .iter()
        .flat_map(|g| g.pretrained.iter().chain(&g.finetuned).cloned())
        .collect();
    let gt_tracks: Vec<TrackRecord> = generated
        .iter()
        .map(|g| TrackRecord {
            video_id: g.info.video_id.clone(),
            prompt_id: 0,
            kind: TrackKind::GroundTruth,
            frames: g
                .gt
                .boxes
                .iter()
                .map(|(frame, bbox)| TrackFrame {
                    frame: *frame,
                    bbox: *bbox,
                    filled: false,
                    score: None,
                })
                .collect(),
            source_track: None,
        })
        .collect();
    let masks: Vec<MaskRecord> = generated.iter().flat_map(|g| g.gt_masks.iter().cloned()).collect();
    let text: Vec<FeatureRecord> = generated.iter().map(|g| g.text.clone()).collect();

    let mut report = StageReport::new("synth");
    let mut out = |name: &str| {
        let p = out_dir.join(name);
        report.outputs.push(p.clone());
        p
    };
    write_videos(&out(files::VIDEOS), &videos)?;
    write_detections(&out(files::DETECTIONS), &detections)?;
    write_tracks(&out(files::GT_TRACKS), &gt_tracks)?;
    write_masks(&out(files::GT_MASKS), &masks)?;
    write_features(&out(files::TEXT_FEATURES), &text)?;
    write_records(&out(files::SCENES), &scenes)?;
    #[derive(Serialize)]
    struct Effective<'a> {
        seed: u64,
        #[serde(flatten)]
        config: &'a SynthConfig,
    }
    let cfg_path = write_effective_config(out_dir, "synth", &Effective { seed, config })?;
    report.outputs.push(cfg_path);
    Ok(report.metric("videos", videos.len() as f64))
}

// ---- shared loaders ----

type DetectionsByVideo = BTreeMap<String, Vec<FrameDetections>>;

fn load_videos(cfg: &PipelineConfig) -> Result<Vec<VideoInfo>> {
    parse_videos(&require(&cfg.data_file(files::VIDEOS))?)
}

fn load_detections(cfg: &PipelineConfig) -> Result<(DetectionsByVideo, DetectionsByVideo)> {
    let frames = parse_detections(&require(&cfg.data_file(files::DETECTIONS))?)?;
    let (mut pre, mut fine): (DetectionsByVideo, DetectionsByVideo) = Default::default();
    for f in frames {
        let map = match f.source {
            DetectorSource::Pretrained => &mut pre,
            DetectorSource::Finetuned => &mut fine,
        };
        map.entry(f.video_id.clone()).or_default().push(f);
    }
    Ok((pre, fine))
}

fn load_gt(cfg: &PipelineConfig) -> Result<BTreeMap<String, BoxSequence>> {
    let path = require(&cfg.data_file(files::GT_TRACKS))?;
    parse_tracks(&path)?
        .into_iter()
        .filter(|t| t.kind == TrackKind::GroundTruth)
        .map(|t| {
            let seq = BoxSequence::new(t.video_id.clone(), t.frames.iter().map(|f| (f.frame, f.bbox)).collect())?;
            Ok((t.video_id, seq))
        })
        .collect()
}

/// Reference proposal and candidates of one video, as read back from disk.
#[derive(Debug, Clone)]
pub struct StoredPrompts {
    pub reference: ReferenceProposal,
    pub candidates: Vec<CandidateTrack>,
}

pub fn load_prompts(path: &Path) -> Result<BTreeMap<String, StoredPrompts>> {
    let mut refs: BTreeMap<String, ReferenceProposal> = BTreeMap::new();
    let mut cands: BTreeMap<String, Vec<CandidateTrack>> = BTreeMap::new();
    for t in parse_tracks(&require(path)?)? {
        match t.kind {
            TrackKind::Reference => {
                refs.insert(t.video_id.clone(), ReferenceProposal::from_record(&t)?);
            }
            TrackKind::CandidateTrack => cands.entry(t.video_id.clone()).or_default().push(CandidateTrack::from_record(&t)?),
            _ => {}
        }
    }
    if let Some(v) = cands.keys().find(|v| !refs.contains_key(*v)) {
        return Err(Error::Validation(format!("video {v} has candidates but no reference proposal")));
    }
    Ok(refs
        .into_iter()
        .map(|(v, reference)| {
            let candidates = cands.remove(&v).unwrap_or_default();
            (v, StoredPrompts { reference, candidates })
        })
        .collect())
}

fn detections_for<'a>(map: &'a DetectionsByVideo, video: &str) -> &'a [FrameDetections] {
    map.get(video).map_or(&[], Vec::as_slice)
}

// ---- track ----

pub fn run_track(cfg: &PipelineConfig) -> Result<StageReport> {
    cfg.validate()?;
    let videos = load_videos(cfg)?;
    let (pre, fine) = load_detections(cfg)?;
    let per_video = videos
        .par_iter()
        .map(|v| {
            let input = assemble_video_input(
                &v.video_id,
                detections_for(&pre, &v.video_id),
                detections_for(&fine, &v.video_id),
                v.frames,
                cfg.prompts.top_k,
            );
            let raw = tracker::run(&input, &cfg.prompts.tracker)?;
            Ok(raw.iter().map(|t| raw_track_record(&v.video_id, t)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<TrackRecord> = per_video.into_iter().flatten().collect();
    ensure_dir(&cfg.out)?;
    let path = cfg.out_file(files::RAW_TRACKS);
    write_tracks(&path, &records)?;
    let mut report = StageReport::new("track").metric("raw_tracks", records.len() as f64);
    report.outputs = vec![path, write_effective_config(&cfg.out, "track", cfg)?];
    Ok(report)
}

// ---- prompts ----

fn load_scenes(cfg: &PipelineConfig) -> Result<Option<BTreeMap<String, SceneSpec>>> {
    let path = cfg.data_file(files::SCENES);
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(
        read_records::<SceneSpec>(&path)?
            .into_iter()
            .map(|(_, s)| (s.video_id.clone(), s))
            .collect(),
    ))
}

pub fn run_prompts(cfg: &PipelineConfig) -> Result<StageReport> {
    cfg.validate()?;
    let videos = load_videos(cfg)?;
    let (pre, fine) = load_detections(cfg)?;
    let scenes = load_scenes(cfg)?;

    let per_video = videos
        .par_iter()
        .map(|v| {
            let p = generate_prompts(
                &v.video_id,
                detections_for(&pre, &v.video_id),
                detections_for(&fine, &v.video_id),
                v.frames,
                &cfg.prompts,
            )?;
            let mut tracks = vec![p.reference.to_record()];
            tracks.extend(p.candidates.iter().map(CandidateTrack::to_record));
            let features = match scenes.as_ref().and_then(|s| s.get(&v.video_id)) {
                Some(scene) => {
                    let enc = SyntheticEncoder::new(scene)?;
                    let mut f = vec![FeatureRecord {
                        video_id: v.video_id.clone(),
                        prompt_id: REFERENCE_ID,
                        kind: FeatureKind::Reference,
                        vectors: enc.encode_track(&p.reference.boxes),
                    }];
                    f.extend(p.candidates.iter().map(|c| FeatureRecord {
                        video_id: v.video_id.clone(),
                        prompt_id: c.prompt_id,
                        kind: FeatureKind::CandidateTrack,
                        vectors: enc.encode_track(&c.boxes),
                    }));
                    f
                }
                None => Vec::new(),
            };
            Ok((tracks, features, p.candidates.len()))
        })
        .collect::<Result<Vec<_>>>()?;

    ensure_dir(&cfg.out)?;
    let mut report = StageReport::new("prompts");
    let candidates: usize = per_video.iter().map(|p| p.2).sum();
    let (tracks, mut features): (Vec<TrackRecord>, Vec<FeatureRecord>) = per_video
        .into_iter()
        .fold((Vec::new(), Vec::new()), |(mut t, mut f), (tv, fv, _)| {
            t.extend(tv);
            f.extend(fv);
            (t, f)
        });
    let prompts_path = cfg.out_file(files::PROMPTS);
    write_tracks(&prompts_path, &tracks)?;
    report.outputs.push(prompts_path);
    if scenes.is_some() {
        let text_path = cfg.data_file(files::TEXT_FEATURES);
        if text_path.is_file() {
            features.extend(parse_features(&text_path)?);
        }
        let path = cfg.out_file(files::FEATURES);
        write_features(&path, &features)?;
        report.outputs.push(path);
    } else {
        info!("no scene file in {}; prompt features must be supplied externally", cfg.data.display());
    }
    report.outputs.push(write_effective_config(&cfg.out, "prompts", cfg)?);
    Ok(report
        .metric("videos", videos.len() as f64)
        .metric("candidates", candidates as f64))
}

// ---- features / samples ----

struct VideoFeatures<'a> {
    reference: &'a FeatureRecord,
    candidates: BTreeMap<u32, &'a FeatureRecord>,
    text: Option<&'a [f64]>,
}

fn index_features(records: &[FeatureRecord]) -> BTreeMap<&str, Vec<&FeatureRecord>> {
    let mut out: BTreeMap<&str, Vec<&FeatureRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.video_id.as_str()).or_default().push(r);
    }
    out
}

fn video_features<'a>(
    video: &str,
    index: &BTreeMap<&str, Vec<&'a FeatureRecord>>,
    prompts: &StoredPrompts,
) -> Result<VideoFeatures<'a>> {
    let missing = |what: String| Error::Coverage(vec![format!("{video}/{what}")]);
    let records = index.get(video).ok_or_else(|| missing("features".into()))?;
    let reference = records
        .iter()
        .find(|r| r.kind == FeatureKind::Reference)
        .copied()
        .ok_or_else(|| missing("reference".into()))?;
    let candidates: BTreeMap<u32, &FeatureRecord> = records
        .iter()
        .filter(|r| r.kind == FeatureKind::CandidateTrack)
        .map(|r| (r.prompt_id, *r))
        .collect();
    for c in &prompts.candidates {
        if !candidates.contains_key(&c.prompt_id) {
            return Err(missing(format!("candidate_track/{}", c.prompt_id)));
        }
    }
    let text = records
        .iter()
        .find(|r| r.kind == FeatureKind::Text)
        .and_then(|r| r.vectors.first())
        .map(Vec::as_slice);
    Ok(VideoFeatures {
        reference,
        candidates,
        text,
    })
}

/// Classifier samples for one video (labels need ground truth; they are 0
/// when `gt` is absent).
pub fn video_samples(
    prompts: &StoredPrompts,
    reference_features: &[Vec<f64>],
    candidate_features: &[&[Vec<f64>]],
    text: Option<&[f64]>,
    gt: Option<&BoxSequence>,
    frames: usize,
) -> Result<Vec<PreferenceSample>> {
    let labels = match gt {
        Some(g) => make_labels(&prompts.candidates, &prompts.reference, g)?,
        None => vec![0.0; prompts.candidates.len()],
    };
    let reference = sample_track_tokens(reference_features, frames)?;
    candidate_features
        .iter()
        .zip(labels)
        .map(|(cf, label)| {
            Ok(PreferenceSample {
                candidate: sample_track_tokens(cf, frames)?,
                reference: reference.clone(),
                text: text.map(<[f64]>::to_vec),
                label,
            })
        })
        .collect()
}

fn feature_dim(records: &[FeatureRecord]) -> Result<usize> {
    records
        .iter()
        .map(FeatureRecord::dim)
        .find(|d| *d > 0)
        .ok_or_else(|| Error::Validation("feature file holds no vectors".into()))
}

// ---- train ----

pub fn run_train(cfg: &PipelineConfig) -> Result<StageReport> {
    cfg.validate()?;
    let prompts = load_prompts(&cfg.out_file(files::PROMPTS))?;
    let features = parse_features(&require(&cfg.features_path())?)?;
    let gt = load_gt(cfg)?;
    let index = index_features(&features);
    let model_cfg = ModelConfig {
        d_in: feature_dim(&features)?,
        ..cfg.model
    };
    if model_cfg.d_in != cfg.model.d_in {
        info!("model d_in set to {} from the feature file", model_cfg.d_in);
    }

    let training: Vec<(&String, &StoredPrompts)> = prompts
        .iter()
        .filter(|(v, p)| !cfg.is_held_out(v) && !p.candidates.is_empty())
        .collect();
    let batches = training
        .par_iter()
        .map(|(video, p)| {
            let vf = video_features(video, &index, p)?;
            let cands: Vec<&[Vec<f64>]> = p
                .candidates
                .iter()
                .map(|c| vf.candidates[&c.prompt_id].vectors.as_slice())
                .collect();
            let g = gt
                .get(*video)
                .ok_or_else(|| Error::Coverage(vec![format!("{video}/ground_truth")]))?;
            Ok(VideoBatch {
                video_id: video.to_string(),
                samples: video_samples(p, &vf.reference.vectors, &cands, vf.text, Some(g), model_cfg.frames)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let samples: usize = batches.iter().map(|b| b.samples.len()).sum();
    let positives: usize = batches
        .iter()
        .flat_map(|b| &b.samples)
        .filter(|s| s.label > 0.5)
        .count();

    let model = PreferenceModel::init(model_cfg, cfg.init_seed())?;
    let training_cfg = TrainingConfig {
        seed: cfg.shuffle_seed(),
        ..cfg.training
    };
    let outcome = train(model, &batches, &training_cfg)?;

    ensure_dir(&cfg.out)?;
    let model_path = cfg.out_file(files::MODEL);
    let log_path = cfg.out_file(files::TRAIN_LOG);
    write_checkpoint(&model_path, &outcome.model)?;
    write_training_log(&log_path, &outcome.log)?;
    let mut report = StageReport::new("train")
        .metric("videos", batches.len() as f64)
        .metric("samples", samples as f64)
        .metric("positives", positives as f64);
    if let Some(last) = outcome.log.last() {
        report = report.metric("final_loss", last.loss).metric("train_acc", last.train_acc);
    }
    if cfg.train.grad_check {
        let first = &batches[0].samples[0];
        let check = grad_check(&outcome.model, first)?;
        if check.max_relative_error > 1e-4 {
            warn!("gradient check: max relative error {:.3e}", check.max_relative_error);
        }
        report = report.metric("grad_check_max_rel_error", check.max_relative_error);
    }
    report.outputs = vec![model_path, log_path, write_effective_config(&cfg.out, "train", cfg)?];
    Ok(report)
}

// ---- select ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Model,
    Oracle,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateProbability {
    pub prompt_id: u32,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    #[serde(rename = "video")]
    pub video_id: String,
    pub prompt_id: u32,
    pub method: SelectionMethod,
    pub probabilities: Vec<CandidateProbability>,
}

/// The selection rule driven by ground truth: a candidate scores 1 when it
/// beats the reference's box mIoU, else 0.
pub fn oracle_select(prompts: &StoredPrompts, gt: &BoxSequence) -> Result<(u32, Vec<(u32, f64)>)> {
    let labels = make_labels(&prompts.candidates, &prompts.reference, gt)?;
    let probs: Vec<(u32, f64)> = prompts
        .candidates
        .iter()
        .zip(labels)
        .map(|(c, y)| (c.prompt_id, y))
        .collect();
    Ok((select_from_probabilities(&probs), probs))
}

fn selected_track(video: &str, prompts: &StoredPrompts, id: u32) -> Result<TrackRecord> {
    let mut rec = if id == REFERENCE_ID {
        prompts.reference.to_record()
    } else {
        prompts
            .candidates
            .iter()
            .find(|c| c.prompt_id == id)
            .map(CandidateTrack::to_record)
            .ok_or_else(|| Error::Validation(format!("{video}: selected unknown prompt {id}")))?
    };
    rec.kind = TrackKind::Selected;
    rec.source_track = Some(id);
    Ok(rec)
}

pub fn run_select(cfg: &PipelineConfig) -> Result<StageReport> {
    cfg.validate()?;
    let prompts = load_prompts(&cfg.out_file(files::PROMPTS))?;
    let model = match (&cfg.checkpoint, cfg.select.oracle) {
        (Some(path), false) => Some(read_checkpoint(&require(path)?)?),
        _ => None,
    };
    let gt = if cfg.select.oracle { Some(load_gt(cfg)?) } else { None };
    let features = match &model {
        Some(_) => parse_features(&require(&cfg.features_path())?)?,
        None => Vec::new(),
    };
    if model.is_none() && !cfg.select.oracle {
        info!("no checkpoint given: selecting the reference proposal for every video");
    }
    let index = index_features(&features);
    let entries: Vec<(&String, &StoredPrompts)> = prompts.iter().collect();
    let results = entries
        .par_iter()
        .map(|(video, p)| {
            let (prompt_id, probs, method) = if let Some(gt) = &gt {
                let g = gt
                    .get(*video)
                    .ok_or_else(|| Error::Coverage(vec![format!("{video}/ground_truth")]))?;
                let (id, probs) = oracle_select(p, g)?;
                (id, probs, SelectionMethod::Oracle)
            } else if let Some(m) = &model {
                let vf = video_features(video, &index, p)?;
                let n = m.config.frames;
                let cands = p
                    .candidates
                    .iter()
                    .map(|c| Ok((c.prompt_id, sample_track_tokens(&vf.candidates[&c.prompt_id].vectors, n)?)))
                    .collect::<Result<Vec<_>>>()?;
                let reference = sample_track_tokens(&vf.reference.vectors, n)?;
                let s = select(m, &cands, &reference, vf.text)?;
                (s.prompt_id, s.probabilities, SelectionMethod::Model)
            } else {
                (REFERENCE_ID, Vec::new(), SelectionMethod::Reference)
            };
            let record = SelectionRecord {
                video_id: video.to_string(),
                prompt_id,
                method,
                probabilities: probs
                    .into_iter()
                    .map(|(prompt_id, p)| CandidateProbability { prompt_id, p })
                    .collect(),
            };
            Ok((record, selected_track(video, p, prompt_id)?))
        })
        .collect::<Result<Vec<_>>>()?;

    ensure_dir(&cfg.out)?;
    let (records, tracks): (Vec<SelectionRecord>, Vec<TrackRecord>) = results.into_iter().unzip();
    let sel_path = cfg.out_file(files::SELECTION);
    let tracks_path = cfg.out_file(files::SELECTED_TRACKS);
    write_records(&sel_path, &records)?;
    write_tracks(&tracks_path, &tracks)?;
    let non_reference = records.iter().filter(|r| r.prompt_id != REFERENCE_ID).count();
    let mut report = StageReport::new("select")
        .metric("videos", records.len() as f64)
        .metric("candidate_selected", non_reference as f64);
    report.outputs = vec![sel_path, tracks_path, write_effective_config(&cfg.out, "select", cfg)?];
    Ok(report)
}

pub fn load_selection(path: &Path) -> Result<Vec<SelectionRecord>> {
    Ok(read_records(&require(path)?)?.into_iter().map(|(_, r)| r).collect())
}

// ---- segment ----

fn prompt_sequences(cfg: &PipelineConfig) -> Result<BTreeMap<String, BoxSequence>> {
    match cfg.segment.prompt {
        PromptSource::GroundTruth => load_gt(cfg),
        PromptSource::Reference => Ok(load_prompts(&cfg.out_file(files::PROMPTS))?
            .into_iter()
            .map(|(v, p)| (v, p.reference.boxes))
            .collect()),
        PromptSource::Selected => parse_tracks(&require(&cfg.out_file(files::SELECTED_TRACKS))?)?
            .into_iter()
            .filter(|t| t.kind == TrackKind::Selected)
            .map(|t| {
                let seq = BoxSequence::new(t.video_id.clone(), t.frames.iter().map(|f| (f.frame, f.bbox)).collect())?;
                Ok((t.video_id, seq))
            })
            .collect(),
    }
}

pub fn run_segment(cfg: &PipelineConfig) -> Result<StageReport> {
    cfg.validate()?;
    let videos = load_videos(cfg)?;
    let prompts = prompt_sequences(cfg)?;
    let requests: Vec<Vec<SegmentRequest>> = videos
        .iter()
        .map(|v| {
            let seq = prompts
                .get(&v.video_id)
                .ok_or_else(|| Error::Coverage(vec![format!("{}/prompt", v.video_id)]))?;
            Ok(seq
                .boxes
                .iter()
                .map(|(frame, b)| SegmentRequest {
                    video_id: v.video_id.clone(),
                    frame_index: *frame,
                    frame_size: (v.width, v.height),
                    prompt_box: *b,
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let masks: Vec<MaskRecord> = match cfg.remote() {
        None => requests
            .par_iter()
            .flat_map_iter(|reqs| {
                reqs.iter().map(|r| MaskRecord {
                    video_id: r.video_id.clone(),
                    frame: r.frame_index,
                    mask: mock_segment(r),
                })
            })
            .collect(),
        Some(remote) => {
            let client = RemoteSegmenter::new(remote);
            let mut out = Vec::new();
            for reqs in &requests {
                for (r, mask) in reqs.iter().zip(client.segment_batch(reqs, cfg.segment.max_in_flight)) {
                    out.push(MaskRecord {
                        video_id: r.video_id.clone(),
                        frame: r.frame_index,
                        mask: mask?,
                    });
                }
            }
            out
        }
    };
    ensure_dir(&cfg.out)?;
    let path = cfg.out_file(files::MASKS);
    write_masks(&path, &masks)?;
    let mut report = StageReport::new("segment").metric("masks", masks.len() as f64);
    report.outputs = vec![path, write_effective_config(&cfg.out, "segment", cfg)?];
    Ok(report)
}

// ---- eval ----

/// One line of the prompt comparison: mean box mIoU of a prompt choice and
/// the J&F its boxes reach under the rectangle segmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub subset: String,
    pub videos: usize,
    pub box_miou: f64,
    pub mock_jf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub rows: Vec<ComparisonRow>,
}

/// Dataset-level mean J&F of rectangle masks drawn from `boxes`.
fn mock_jf(boxes: &BoxSequence, gt: &BTreeMap<u32, &MaskRecord>, tolerance: Option<f64>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (frame, b) in &boxes.boxes {
        let Some(g) = gt.get(frame) else { continue };
        let (w, h) = (g.mask.width(), g.mask.height());
        let pred = crate::segment::rasterize_box(b, w, h);
        let tol = tolerance.unwrap_or_else(|| default_tolerance(w, h));
        sum += (region_j(&pred, &g.mask)? + contour_f(&pred, &g.mask, tol)?) / 2.0;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Coverage(vec![format!("{}/masks", boxes.video_id)]));
    }
    Ok(sum / n as f64)
}

const ROW_NAMES: [&str; 6] = [
    "reference",
    "highest_confidence",
    "oracle_best",
    "selected",
    "merged_oracle",
    "ground_truth_boxes",
];

pub fn run_eval(cfg: &PipelineConfig) -> Result<StageReport> {
    cfg.validate()?;
    let pred = parse_masks(&require(&cfg.out_file(files::MASKS))?)?;
    let gt_masks = parse_masks(&require(&cfg.data_file(files::GT_MASKS))?)?;
    let gt = load_gt(cfg)?;
    let selected_path = cfg.out_file(files::SELECTED_TRACKS);
    let selected: BTreeMap<String, BoxSequence> = if selected_path.is_file() {
        parse_tracks(&selected_path)?
            .into_iter()
            .filter(|t| t.kind == TrackKind::Selected)
            .map(|t| {
                let seq = BoxSequence::new(t.video_id.clone(), t.frames.iter().map(|f| (f.frame, f.bbox)).collect())?;
                Ok((t.video_id, seq))
            })
            .collect::<Result<_>>()?
    } else {
        BTreeMap::new()
    };
    let boxes = (!selected.is_empty()).then_some((&selected, &gt));
    let report = evaluate(&pred, &gt_masks, cfg.eval.tolerance, boxes)?;

    let prompts_path = cfg.out_file(files::PROMPTS);
    let rows = if prompts_path.is_file() {
        comparison_rows(cfg, &load_prompts(&prompts_path)?, &selected, &gt, &gt_masks)?
    } else {
        Vec::new()
    };
    let out = EvalOutput { report, rows };
    ensure_dir(&cfg.out)?;
    let path = cfg.out_file(files::EVAL);
    write_json(&path, &out)?;
    let mut report = StageReport::new("eval")
        .metric("J", out.report.j)
        .metric("F", out.report.f)
        .metric("JF", out.report.jf);
    if let Some(m) = out.report.box_miou {
        report = report.metric("box_miou", m);
    }
    for row in out.rows.iter().filter(|r| r.subset == "all") {
        report = report.metric(&format!("{}_box_miou", row.name), row.box_miou);
    }
    report.outputs = vec![path, write_effective_config(&cfg.out, "eval", cfg)?];
    Ok(report)
}

fn comparison_rows(
    cfg: &PipelineConfig,
    prompts: &BTreeMap<String, StoredPrompts>,
    selected: &BTreeMap<String, BoxSequence>,
    gt: &BTreeMap<String, BoxSequence>,
    gt_masks: &[MaskRecord],
) -> Result<Vec<ComparisonRow>> {
    let mut masks_by: BTreeMap<&str, BTreeMap<u32, &MaskRecord>> = BTreeMap::new();
    for m in gt_masks {
        masks_by.entry(m.video_id.as_str()).or_default().insert(m.frame, m);
    }
    let entries: Vec<(&String, &StoredPrompts)> = prompts.iter().filter(|(v, _)| gt.contains_key(*v)).collect();
    // per video: (box mIoU, mock J&F) for each row, None where not available
    let per_video = entries
        .par_iter()
        .map(|(video, p)| {
            let g = &gt[*video];
            let gm = masks_by
                .get(video.as_str())
                .ok_or_else(|| Error::Coverage(vec![format!("{video}/masks")]))?;
            let best_id = oracle_best(&p.candidates, &p.reference, g)?.0;
            let conf = oracle_conf(&p.candidates).map(|c| &c.boxes).unwrap_or(&p.reference.boxes);
            let merged = merge_tracks_oracle(&p.candidates, &p.reference, g)?;
            let sequences: [Option<&BoxSequence>; 6] = [
                Some(&p.reference.boxes),
                Some(conf),
                prompt_boxes(best_id, &p.candidates, &p.reference),
                selected.get(*video),
                Some(&merged),
                Some(g),
            ];
            sequences
                .iter()
                .map(|s| match s {
                    Some(seq) => Ok(Some((box_miou(seq, g)?, mock_jf(seq, gm, cfg.eval.tolerance)?))),
                    None => Ok(None),
                })
                .collect::<Result<Vec<_>>>()
                .map(|v| (video.to_string(), v))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let subsets: &[&str] = if cfg.train.holdout > 0.0 { &["all", "held_out"] } else { &["all"] };
    for subset in subsets {
        let keep = |v: &str| *subset == "all" || cfg.is_held_out(v);
        for (i, name) in ROW_NAMES.iter().enumerate() {
            let values: Vec<(f64, f64)> = per_video
                .iter()
                .filter(|(v, _)| keep(v))
                .filter_map(|(_, vals)| vals[i])
                .collect();
            if values.is_empty() {
                continue;
            }
            let n = values.len() as f64;
            rows.push(ComparisonRow {
                name: name.to_string(),
                subset: subset.to_string(),
                videos: values.len(),
                box_miou: values.iter().map(|x| x.0).sum::<f64>() / n,
                mock_jf: values.iter().map(|x| x.1).sum::<f64>() / n,
            });
        }
    }
    Ok(rows)
}

pub fn load_eval(path: &Path) -> Result<EvalOutput> {
    let text = fs::read_to_string(require(path)?).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
