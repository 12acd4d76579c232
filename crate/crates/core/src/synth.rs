//! Synthetic scenes: moving boxes, two simulated detectors, ground truth,
//! and a box-conditioned feature encoder standing in for a frozen visual
//! backbone.
//!
//! One object per scene is the referred target. The "finetuned" detector
//! puts its top-1 on the target with small jitter, except for framewise
//! independent dropouts and swaps onto a distractor. The "pretrained"
//! detector sees every object with larger jitter, but scores distractors
//! higher than the target, so confidence is a poor guide to identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clamp_to_frame, iou, BBox, BoxSequence};
use crate::io::{Detection, DetectorSource, FeatureKind, FeatureRecord, FrameDetections, MaskRecord, VideoInfo};
use crate::segment::rasterize_box;

/// Layout of an encoded feature vector: 4 box-geometry dims, one planted
/// target-overlap dim (averaged over the track's temporal context), one
/// objectness dim, then appearance.
const GEOMETRY_DIMS: usize = 4;
const SIGNAL_DIM: usize = 4;
const OBJECTNESS_DIM: usize = 5;
const APPEARANCE_START: usize = 6;
pub const MIN_FEATURE_DIM: usize = APPEARANCE_START + 2;

/// Deterministic 64-bit mix of a seed and a label (FNV-1a then splitmix).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    /// Constant velocity in pixels per frame, bouncing off the frame edges.
    Linear { vx: f64, vy: f64 },
    /// Drift plus a sinusoidal sway, also folded back into the frame.
    Sinusoidal {
        vx: f64,
        vy: f64,
        amplitude_x: f64,
        amplitude_y: f64,
        period: f64,
        phase: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub initial: BBox,
    pub motion: Motion,
    #[serde(default)]
    pub is_target: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Finetuned centre jitter, as a fraction of box width/height.
    pub center_jitter: f64,
    /// Finetuned log-size jitter.
    pub size_jitter: f64,
    /// Probability that the finetuned detector misses a frame (never frame 1).
    pub dropout: f64,
    /// Probability that the finetuned top-1 lands on a distractor.
    pub swap: f64,
    /// Added to distractor scores in the pretrained detector.
    pub distractor_score_bias: f64,
    /// Multiplier on both jitters for the pretrained detector.
    pub pretrained_jitter: f64,
    /// Per-object miss probability of the pretrained detector.
    pub pretrained_dropout: f64,
    /// Low-score random boxes per frame in the pretrained output.
    pub clutter: u32,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            center_jitter: 0.04,
            size_jitter: 0.04,
            dropout: 0.05,
            swap: 0.15,
            distractor_score_bias: 0.2,
            pretrained_jitter: 1.5,
            pretrained_dropout: 0.03,
            clutter: 3,
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            center_jitter: 0.0,
            size_jitter: 0.0,
            dropout: 0.0,
            swap: 0.0,
            distractor_score_bias: 0.0,
            pretrained_jitter: 1.0,
            pretrained_dropout: 0.0,
            clutter: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub dim: usize,
    /// Scale of the planted target-overlap component.
    pub signal: f64,
    /// Standard deviation of the additive noise on every component.
    pub noise: f64,
    /// Half-width in frames of the window the planted component averages
    /// over along a track; absent means the whole track.
    pub context: Option<u32>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            signal: 4.0,
            noise: 0.1,
            context: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(rename = "video")]
    pub video_id: String,
    pub width: u32,
    pub height: u32,
    pub frames: u32,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub seed: u64,
}

fn probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Validation(format!("{name} = {p} is not a probability")))
    }
}

fn non_negative(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("{name} = {x} must be finite and non-negative")))
    }
}

impl NoiseSpec {
    fn validate(&self) -> Result<()> {
        non_negative("center_jitter", self.center_jitter)?;
        non_negative("size_jitter", self.size_jitter)?;
        non_negative("pretrained_jitter", self.pretrained_jitter)?;
        non_negative("distractor_score_bias", self.distractor_score_bias)?;
        probability("dropout", self.dropout)?;
        probability("swap", self.swap)?;
        probability("pretrained_dropout", self.pretrained_dropout)
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("scene {}: {m}", self.video_id)));
        if self.video_id.is_empty() {
            return fail("empty video id".into());
        }
        if self.frames == 0 {
            return fail("needs at least one frame".into());
        }
        if self.width == 0 || self.height == 0 {
            return fail("empty frame size".into());
        }
        let targets = self.objects.iter().filter(|o| o.is_target).count();
        if targets != 1 {
            return fail(format!("exactly one target object required, found {targets}"));
        }
        if self.features.dim < MIN_FEATURE_DIM {
            return fail(format!("feature dim must be at least {MIN_FEATURE_DIM}"));
        }
        non_negative("features.signal", self.features.signal)?;
        non_negative("features.noise", self.features.noise)?;
        for (i, o) in self.objects.iter().enumerate() {
            let inside = clamp_to_frame(&o.initial, self.width as f64, self.height as f64);
            if inside.is_err() {
                return fail(format!("object {i} starts outside the frame"));
            }
            let finite = match o.motion {
                Motion::Linear { vx, vy } => vx.is_finite() && vy.is_finite(),
                Motion::Sinusoidal {
                    vx,
                    vy,
                    amplitude_x,
                    amplitude_y,
                    period,
                    phase,
                } => [vx, vy, amplitude_x, amplitude_y, phase].iter().all(|x| x.is_finite()) && period > 0.0,
            };
            if !finite {
                return fail(format!("object {i} has invalid motion parameters"));
            }
        }
        self.noise.validate()
    }

    pub fn target_index(&self) -> usize {
        self.objects.iter().position(|o| o.is_target).unwrap_or(0)
    }

    pub fn video_info(&self) -> VideoInfo {
        VideoInfo {
            video_id: self.video_id.clone(),
            width: self.width,
            height: self.height,
            frames: self.frames,
        }
    }

    /// Noise-free box of object `obj` on frame `frame` (1-based).
    pub fn object_box(&self, obj: usize, frame: u32) -> BBox {
        let o = &self.objects[obj];
        let tau = (frame - 1) as f64;
        let (w, h) = (
            o.initial.w().min(self.width as f64),
            o.initial.h().min(self.height as f64),
        );
        let (dx, dy) = match o.motion {
            Motion::Linear { vx, vy } => (vx * tau, vy * tau),
            Motion::Sinusoidal {
                vx,
                vy,
                amplitude_x,
                amplitude_y,
                period,
                phase,
            } => {
                let a = std::f64::consts::TAU * tau / period + phase;
                (
                    vx * tau + amplitude_x * (a.sin() - phase.sin()),
                    vy * tau + amplitude_y * (a.sin() - phase.sin()),
                )
            }
        };
        let cx = fold(o.initial.cx() + dx, w / 2.0, self.width as f64 - w / 2.0);
        let cy = fold(o.initial.cy() + dy, h / 2.0, self.height as f64 - h / 2.0);
        BBox::new(cx, cy, w, h).expect("object sizes validated positive")
    }
}

/// Reflect `x` into `[lo, hi]` as if bouncing between the bounds.
fn fold(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return (lo + hi) / 2.0;
    }
    let y = (x - lo).rem_euclid(2.0 * span);
    lo + if y > span { 2.0 * span - y } else { y }
}

/// Everything generated for one scene.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub info: VideoInfo,
    pub gt: BoxSequence,
    pub gt_masks: Vec<MaskRecord>,
    pub pretrained: Vec<FrameDetections>,
    pub finetuned: Vec<FrameDetections>,
    pub text: FeatureRecord,
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, center: f64, size: f64, width: u32, height: u32) -> Option<BBox> {
    let (gx, gy, gw, gh) = (gauss(rng), gauss(rng), gauss(rng), gauss(rng));
    let moved = BBox::new(
        b.cx() + center * b.w() * gx,
        b.cy() + center * b.h() * gy,
        b.w() * (size * gw).exp(),
        b.h() * (size * gh).exp(),
    )
    .ok()?;
    clamp_to_frame(&moved, width as f64, height as f64).ok()
}

fn finetuned_frame(spec: &SceneSpec, frame: u32, rng: &mut ChaCha8Rng) -> FrameDetections {
    let n = &spec.noise;
    let target = spec.target_index();
    let distractors: Vec<usize> = (0..spec.objects.len()).filter(|&i| i != target).collect();
    let (w, h) = (spec.width, spec.height);
    let drop = rng.random_bool(n.dropout);
    let swap = rng.random_bool(n.swap);
    let pick = rng.random_range(0..distractors.len().max(1));
    let top_score = rng.random_range(0.6..0.95);
    let second = rng.random_range(0.3..0.9);
    let t_box = jitter(rng, &spec.object_box(target, frame), n.center_jitter, n.size_jitter, w, h);
    let d_box = distractors
        .get(pick)
        .and_then(|&d| jitter(rng, &spec.object_box(d, frame), n.center_jitter, n.size_jitter, w, h));
    let mut entries = Vec::new();
    if !(drop && frame > 1) {
        match (swap && frame > 1, t_box, d_box) {
            (true, t, Some(d)) => {
                entries.push(Detection { bbox: d, score: top_score });
                entries.extend(t.map(|b| Detection {
                    bbox: b,
                    score: top_score * second,
                }));
            }
            (_, Some(t), _) => entries.push(Detection { bbox: t, score: top_score }),
            (_, None, _) => {}
        }
    }
    FrameDetections::new(spec.video_id.clone(), frame, DetectorSource::Finetuned, entries)
}

fn pretrained_frame(spec: &SceneSpec, frame: u32, rng: &mut ChaCha8Rng) -> FrameDetections {
    let n = &spec.noise;
    let (w, h) = (spec.width, spec.height);
    let mut entries = Vec::new();
    for (i, o) in spec.objects.iter().enumerate() {
        let miss = rng.random_bool(n.pretrained_dropout);
        let base = rng.random_range(0.35..0.65);
        let b = jitter(
            rng,
            &spec.object_box(i, frame),
            n.center_jitter * n.pretrained_jitter,
            n.size_jitter * n.pretrained_jitter,
            w,
            h,
        );
        if miss {
            continue;
        }
        let score = if o.is_target { base } else { (base + n.distractor_score_bias).min(1.0) };
        entries.extend(b.map(|bbox| Detection { bbox, score }));
    }
    for _ in 0..n.clutter {
        let bw = rng.random_range(0.05..0.2) * w as f64;
        let bh = rng.random_range(0.05..0.2) * h as f64;
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let score = rng.random_range(0.01..0.2);
        let clipped = BBox::new(cx, cy, bw, bh)
            .ok()
            .and_then(|b| clamp_to_frame(&b, w as f64, h as f64).ok());
        entries.extend(clipped.map(|bbox| Detection { bbox, score }));
    }
    FrameDetections::new(spec.video_id.clone(), frame, DetectorSource::Pretrained, entries)
}

/// Generate detections, ground truth and the text feature of one scene.
pub fn generate(spec: &SceneSpec) -> Result<SceneData> {
    spec.validate()?;
    let target = spec.target_index();
    let gt_boxes: Vec<(u32, BBox)> = (1..=spec.frames).map(|f| (f, spec.object_box(target, f))).collect();
    let gt_masks = gt_boxes
        .iter()
        .map(|(f, b)| MaskRecord {
            video_id: spec.video_id.clone(),
            frame: *f,
            mask: rasterize_box(b, spec.width, spec.height),
        })
        .collect();
    let mut fine_rng = substream(spec.seed, "finetuned");
    let mut pre_rng = substream(spec.seed, "pretrained");
    let finetuned = (1..=spec.frames).map(|f| finetuned_frame(spec, f, &mut fine_rng)).collect();
    let pretrained = (1..=spec.frames).map(|f| pretrained_frame(spec, f, &mut pre_rng)).collect();
    let encoder = SyntheticEncoder::new(spec)?;
    Ok(SceneData {
        info: spec.video_info(),
        gt: BoxSequence::new(spec.video_id.clone(), gt_boxes)?,
        gt_masks,
        pretrained,
        finetuned,
        text: FeatureRecord {
            video_id: spec.video_id.clone(),
            prompt_id: 0,
            kind: FeatureKind::Text,
            vectors: vec![encoder.encode_text()],
        },
    })
}

/// Frozen, deterministic box-conditioned encoder for one scene. The same
/// box on the same frame always encodes to the same vector.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    spec: SceneSpec,
    appearance: Vec<Vec<f64>>,
}

impl SyntheticEncoder {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let dims = spec.features.dim - APPEARANCE_START;
        let mut rng = substream(spec.seed, "appearance");
        let appearance = spec
            .objects
            .iter()
            .map(|_| {
                let v: Vec<f64> = (0..dims).map(|_| gauss(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            appearance,
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.features.dim
    }

    fn noise_rng(&self, frame: u32, b: &BBox) -> ChaCha8Rng {
        let mut label = format!("box/{frame}");
        for v in b.to_array() {
            label.push_str(&format!("/{:016x}", v.to_bits()));
        }
        substream(self.spec.seed, &label)
    }

    fn target_overlap(&self, frame: u32, b: &BBox) -> f64 {
        iou(b, &self.spec.object_box(self.spec.target_index(), frame))
    }

    /// Encode one box given the planted target-overlap value for it.
    fn encode_with_overlap(&self, frame: u32, b: &BBox, overlap: f64) -> Vec<f64> {
        let s = &self.spec;
        let (w, h) = (s.width as f64, s.height as f64);
        let mut f = vec![0.0; s.features.dim];
        f[..GEOMETRY_DIMS].copy_from_slice(&[b.cx() / w, b.cy() / h, b.w() / w, b.h() / h]);
        let overlaps: Vec<f64> = (0..s.objects.len())
            .map(|o| iou(b, &s.object_box(o, frame)))
            .collect();
        f[SIGNAL_DIM] = s.features.signal * overlap;
        f[OBJECTNESS_DIM] = overlaps.iter().cloned().fold(0.0, f64::max);
        for (ov, app) in overlaps.iter().zip(&self.appearance) {
            for (k, a) in app.iter().enumerate() {
                f[APPEARANCE_START + k] += ov * a;
            }
        }
        let mut rng = self.noise_rng(frame, b);
        for x in f.iter_mut() {
            *x += s.features.noise * gauss(&mut rng);
        }
        f
    }

    /// A single box seen without track context.
    pub fn encode_box(&self, frame: u32, b: &BBox) -> Vec<f64> {
        self.encode_with_overlap(frame, b, self.target_overlap(frame, b))
    }

    /// One vector per frame of the sequence; the planted component is the
    /// target overlap averaged over the temporal context of each frame.
    pub fn encode_track(&self, boxes: &BoxSequence) -> Vec<Vec<f64>> {
        let overlaps: Vec<f64> = boxes.boxes.iter().map(|(f, b)| self.target_overlap(*f, b)).collect();
        let n = overlaps.len();
        let mut prefix = vec![0.0; n + 1];
        for (i, o) in overlaps.iter().enumerate() {
            prefix[i + 1] = prefix[i] + o;
        }
        boxes
            .boxes
            .iter()
            .enumerate()
            .map(|(i, (f, b))| {
                let (lo, hi) = match self.spec.features.context {
                    Some(r) => (i.saturating_sub(r as usize), (i + r as usize + 1).min(n)),
                    None => (0, n),
                };
                let pooled = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
                self.encode_with_overlap(*f, b, pooled)
            })
            .collect()
    }

    /// The referring expression: the target's appearance, noised.
    pub fn encode_text(&self) -> Vec<f64> {
        let s = &self.spec;
        let mut f = vec![0.0; s.features.dim];
        let mut rng = substream(s.seed, "text");
        for (k, a) in self.appearance[s.target_index()].iter().enumerate() {
            f[APPEARANCE_START + k] = a + s.features.noise * gauss(&mut rng);
        }
        f
    }
}

/// Parameters for a randomly drawn suite of scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub videos: usize,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub min_frames: u32,
    pub max_frames: u32,
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Per-video finetuned swap probability is drawn uniformly from this range.
    pub swap_range: (f64, f64),
    pub noise: NoiseSpec,
    pub features: FeatureSpec,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            videos: 200,
            seed: 0,
            width: 160,
            height: 120,
            min_frames: 16,
            max_frames: 32,
            min_distractors: 1,
            max_distractors: 3,
            swap_range: (0.0, 0.3),
            noise: NoiseSpec::default(),
            features: FeatureSpec::default(),
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(format!("suite: {m}")));
        if self.width < 16 || self.height < 16 {
            return fail("frame must be at least 16x16");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return fail("need 1 <= min_frames <= max_frames");
        }
        if self.min_distractors > self.max_distractors {
            return fail("need min_distractors <= max_distractors");
        }
        let (lo, hi) = self.swap_range;
        probability("swap_range.0", lo)?;
        probability("swap_range.1", hi)?;
        if lo > hi {
            return fail("empty swap range");
        }
        self.noise.validate()
    }

    fn random_object(&self, rng: &mut ChaCha8Rng, is_target: bool) -> ObjectSpec {
        let (fw, fh) = (self.width as f64, self.height as f64);
        let w = rng.random_range(0.12..0.25) * fw;
        let h = rng.random_range(0.15..0.35) * fh;
        let cx = rng.random_range(w / 2.0..fw - w / 2.0);
        let cy = rng.random_range(h / 2.0..fh - h / 2.0);
        let vx = rng.random_range(-2.0..2.0);
        let vy = rng.random_range(-1.5..1.5);
        let motion = if rng.random_bool(0.5) {
            Motion::Linear { vx, vy }
        } else {
            Motion::Sinusoidal {
                vx: vx / 2.0,
                vy: vy / 2.0,
                amplitude_x: rng.random_range(0.0..0.15) * fw,
                amplitude_y: rng.random_range(0.0..0.1) * fh,
                period: rng.random_range(12.0..40.0),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        };
        ObjectSpec {
            initial: BBox::new(cx, cy, w, h).expect("positive size"),
            motion,
            is_target,
        }
    }

    /// Expand into concrete scenes `{prefix}0001, {prefix}0002, ...`.
    pub fn scenes(&self, prefix: &str) -> Result<Vec<SceneSpec>> {
        self.validate()?;
        (0..self.videos)
            .map(|i| {
                let video_id = format!("{prefix}{:04}", i + 1);
                let mut rng = substream(self.seed, &format!("suite/{video_id}"));
                let frames = rng.random_range(self.min_frames..=self.max_frames);
                let distractors = rng.random_range(self.min_distractors..=self.max_distractors);
                let (lo, hi) = self.swap_range;
                let swap = if hi > lo { rng.random_range(lo..hi) } else { lo };
                let target_slot = rng.random_range(0..=distractors);
                let objects = (0..=distractors)
                    .map(|k| self.random_object(&mut rng, k == target_slot))
                    .collect();
                let spec = SceneSpec {
                    video_id,
                    width: self.width,
                    height: self.height,
                    frames,
                    objects,
                    noise: NoiseSpec { swap, ..self.noise },
                    features: self.features,
                    seed: rng.random(),
                };
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }
}
