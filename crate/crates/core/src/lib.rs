//! Temporal box-prompt generation and selection for referring video object
//! segmentation.
//!
//! Per-frame detections are turned into a reference proposal (framewise
//! top-1) and tracker-derived candidate tracks; a small transformer
//! classifier decides which of them to hand to a promptable segmenter.

pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod preference;
pub mod prompts;
pub mod segment;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
pub use geometry::{box_miou, giou, iou, BBox, BoxSequence};
pub use io::{FeatureRecord, FrameDetections, MaskRaster, MaskRecord, TrackRecord, VideoInfo};
pub use pipeline::{PipelineConfig, StageReport, SynthConfig};
pub use preference::{ModelConfig, PreferenceModel, TrainingConfig};
pub use prompts::{CandidateTrack, PromptGenerationConfig, ReferenceProposal};
pub use synth::{SceneSpec, SuiteSpec};
pub use tracker::TrackerConfig;
