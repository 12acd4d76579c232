//! Fixed inputs for the benchmarks.

use tenet_core::io::FrameDetections;
use tenet_core::preference::PreferenceSample;
use tenet_core::prompts::assemble_video_input;
use tenet_core::synth::{generate, SceneSpec, SuiteSpec, SyntheticEncoder};
use tenet_core::preference::sample_track_tokens;
use tenet_core::prompts::{generate_prompts, PromptGenerationConfig};

/// One synthetic scene of `frames` frames with three distractors.
pub fn scene(frames: u32) -> SceneSpec {
    let suite = SuiteSpec {
        videos: 1,
        seed: 11,
        min_frames: frames,
        max_frames: frames,
        min_distractors: 3,
        max_distractors: 3,
        ..SuiteSpec::default()
    };
    suite.scenes("bench").expect("valid suite").remove(0)
}

/// Tracker input for a scene: top-K pretrained plus finetuned top-1.
pub fn tracker_input(spec: &SceneSpec, top_k: usize) -> Vec<FrameDetections> {
    let data = generate(spec).expect("scene generates");
    assemble_video_input(&spec.video_id, &data.pretrained, &data.finetuned, spec.frames, top_k)
}

/// Classifier samples built from a scene's candidate tracks.
pub fn samples(spec: &SceneSpec, frames: usize) -> Vec<PreferenceSample> {
    let data = generate(spec).expect("scene generates");
    let enc = SyntheticEncoder::new(spec).expect("encoder");
    let p = generate_prompts(
        &spec.video_id,
        &data.pretrained,
        &data.finetuned,
        spec.frames,
        &PromptGenerationConfig::default(),
    )
    .expect("prompts");
    let reference = sample_track_tokens(&enc.encode_track(&p.reference.boxes), frames).expect("tokens");
    p.candidates
        .iter()
        .map(|c| PreferenceSample {
            candidate: sample_track_tokens(&enc.encode_track(&c.boxes), frames).expect("tokens"),
            reference: reference.clone(),
            text: Some(enc.encode_text()),
            label: 1.0,
        })
        .collect()
}
