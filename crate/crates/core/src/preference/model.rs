//! One-layer transformer preference classifier with hand-written backprop.
//!
//! Token layout for one candidate:
//! `[z, cand_1..cand_N, ref_1..ref_N, text]`, where visual tokens go through
//! a shared two-layer MLP and receive role and temporal embeddings, the text
//! token goes through its own MLP and receives a role embedding. A single
//! post-norm encoder layer runs over the sequence and a linear head reads the
//! class-token output.
//!
//! Only the class-token row of the encoder output is ever read, so the
//! forward pass computes attention for that single query and skips the
//! feed-forward block on the other rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub const ROLE_CLASS: usize = 0;
pub const ROLE_CANDIDATE: usize = 1;
pub const ROLE_REFERENCE: usize = 2;
pub const ROLE_TEXT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input feature dimension (visual and text).
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Sampled frames per track.
    pub frames: usize,
    /// Feed the class token straight to the head, skipping the encoder.
    /// Only useful for diagnostics.
    pub bypass_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_model: 64,
            heads: 4,
            frames: 8,
            bypass_encoder: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.heads == 0 || self.frames == 0 {
            return Err(Error::Config(format!("all model dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

/// A named parameter tensor stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn filled(name: &str, shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(name, shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }
}

macro_rules! params {
    ($($field:ident),* $(,)?) => {
        /// Every trainable tensor of the classifier. Gradients use the same
        /// layout.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Params {
            $(pub $field: Tensor,)*
        }

        impl Params {
            pub fn tensors(&self) -> Vec<&Tensor> {
                vec![$(&self.$field),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
                vec![$(&mut self.$field),*]
            }
        }
    };
}

params!(
    class_token,
    visual_w1,
    visual_b1,
    visual_w2,
    visual_b2,
    text_w1,
    text_b1,
    text_w2,
    text_b2,
    role_embeddings,
    temporal_embeddings,
    attn_wq,
    attn_bq,
    attn_wk,
    attn_bk,
    attn_wv,
    attn_bv,
    attn_wo,
    attn_bo,
    ln1_gain,
    ln1_bias,
    ff_w1,
    ff_b1,
    ff_w2,
    ff_b2,
    ln2_gain,
    ln2_bias,
    head_w,
    head_b,
);

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, di, ff, n) = (cfg.d_model, cfg.d_in, cfg.d_ff(), cfg.frames);
        Self {
            class_token: Tensor::zeros("class_token", &[d]),
            visual_w1: Tensor::zeros("visual_w1", &[d, di]),
            visual_b1: Tensor::zeros("visual_b1", &[d]),
            visual_w2: Tensor::zeros("visual_w2", &[d, d]),
            visual_b2: Tensor::zeros("visual_b2", &[d]),
            text_w1: Tensor::zeros("text_w1", &[d, di]),
            text_b1: Tensor::zeros("text_b1", &[d]),
            text_w2: Tensor::zeros("text_w2", &[d, d]),
            text_b2: Tensor::zeros("text_b2", &[d]),
            role_embeddings: Tensor::zeros("role_embeddings", &[4, d]),
            temporal_embeddings: Tensor::zeros("temporal_embeddings", &[n, d]),
            attn_wq: Tensor::zeros("attn_wq", &[d, d]),
            attn_bq: Tensor::zeros("attn_bq", &[d]),
            attn_wk: Tensor::zeros("attn_wk", &[d, d]),
            attn_bk: Tensor::zeros("attn_bk", &[d]),
            attn_wv: Tensor::zeros("attn_wv", &[d, d]),
            attn_bv: Tensor::zeros("attn_bv", &[d]),
            attn_wo: Tensor::zeros("attn_wo", &[d, d]),
            attn_bo: Tensor::zeros("attn_bo", &[d]),
            ln1_gain: Tensor::filled("ln1_gain", &[d], 1.0),
            ln1_bias: Tensor::zeros("ln1_bias", &[d]),
            ff_w1: Tensor::zeros("ff_w1", &[ff, d]),
            ff_b1: Tensor::zeros("ff_b1", &[ff]),
            ff_w2: Tensor::zeros("ff_w2", &[d, ff]),
            ff_b2: Tensor::zeros("ff_b2", &[d]),
            ln2_gain: Tensor::filled("ln2_gain", &[d], 1.0),
            ln2_bias: Tensor::zeros("ln2_bias", &[d]),
            head_w: Tensor::zeros("head_w", &[d]),
            head_b: Tensor::zeros("head_b", &[1]),
        }
    }

    /// Same layout, all zeros (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for t in g.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        g
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// One training/inference example: candidate and reference per-frame tokens,
/// the optional text token and the binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceSample {
    pub candidate: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
    pub text: Option<Vec<f64>>,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceModel {
    pub config: ModelConfig,
    pub params: Params,
}

// small dense helpers

fn matvec(w: &Tensor, x: &[f64], b: &Tensor) -> Vec<f64> {
    let rows = w.shape[0];
    (0..rows)
        .map(|i| w.row(i).iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b.data[i])
        .collect()
}

/// `dx += W^T dy`
fn matvec_t_acc(w: &Tensor, dy: &[f64], dx: &mut [f64]) {
    for (i, g) in dy.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        for (d, a) in dx.iter_mut().zip(w.row(i)) {
            *d += g * a;
        }
    }
}

/// `dW += dy x^T`, `db += dy`
fn outer_acc(dw: &mut Tensor, db: &mut Tensor, dy: &[f64], x: &[f64]) {
    for (i, g) in dy.iter().enumerate() {
        db.data[i] += g;
        for (d, xv) in dw.row_mut(i).iter_mut().zip(x) {
            *d += g * xv;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LayerNormCache {
    normalized: Vec<f64>,
    inv_std: f64,
}

fn layer_norm(x: &[f64], gain: &Tensor, bias: &Tensor) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let normalized: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = normalized
        .iter()
        .zip(&gain.data)
        .zip(&bias.data)
        .map(|((h, g), b)| h * g + b)
        .collect();
    (y, LayerNormCache { normalized, inv_std })
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    gain: &Tensor,
    dgain: &mut Tensor,
    dbias: &mut Tensor,
) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    for i in 0..dy.len() {
        dgain.data[i] += dy[i] * cache.normalized[i];
        dbias.data[i] += dy[i];
        dxhat[i] = dy[i] * gain.data[i];
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(d, h)| d * h)
        .sum::<f64>()
        / n;
    dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(d, h)| cache.inv_std * (d - mean_d - h * mean_dx))
        .collect()
}

struct MlpCache {
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

fn mlp(x: &[f64], w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> (Vec<f64>, MlpCache) {
    let pre = matvec(w1, x, b1);
    let hidden: Vec<f64> = pre.iter().map(|v| gelu(*v)).collect();
    let out = matvec(w2, &hidden, b2);
    (out, MlpCache { pre, hidden })
}

#[derive(Clone, Copy)]
enum TokenKind {
    Class,
    Candidate(usize),
    Reference(usize),
    Text,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache {
    kinds: Vec<TokenKind>,
    inputs: Vec<Option<Vec<f64>>>,
    mlp: Vec<Option<MlpCache>>,
    tokens: Vec<Vec<f64>>,
    encoder: Option<EncoderCache>,
    head_input: Vec<f64>,
    pub score: f64,
}

struct EncoderCache {
    q: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    /// `attn[h][i]`
    weights: Vec<Vec<f64>>,
    context: Vec<f64>,
    ln1: LayerNormCache,
    h1: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_hidden: Vec<f64>,
    ln2: LayerNormCache,
}

impl PreferenceModel {
    /// Seeded initialisation: weights and biases uniform in
    /// `±1/sqrt(fan_in)`, class token and embeddings from `N(0, 0.02²)`,
    /// layer-norm gains one and biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        for t in params.tensors_mut() {
            let name = t.name.as_str();
            if name.starts_with("ln") {
                continue;
            }
            if name == "class_token" || name.ends_with("embeddings") {
                t.data.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
                continue;
            }
            let fan_in = match name {
                "visual_w1" | "visual_b1" | "text_w1" | "text_b1" => config.d_in,
                "ff_w2" | "ff_b2" => config.d_ff(),
                _ => config.d_model,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            t.data.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
        }
        Ok(Self { config, params })
    }

    pub fn check_sample(&self, sample: &PreferenceSample) -> Result<()> {
        let c = &self.config;
        let bad = |what: String| Err(Error::Config(what));
        if sample.candidate.len() != c.frames || sample.reference.len() != c.frames {
            return bad(format!(
                "expected {} frames per track, got {} candidate / {} reference",
                c.frames,
                sample.candidate.len(),
                sample.reference.len()
            ));
        }
        let dims_ok = sample
            .candidate
            .iter()
            .chain(&sample.reference)
            .chain(sample.text.iter())
            .all(|v| v.len() == c.d_in);
        if !dims_ok {
            return bad(format!("token dimension differs from d_in = {}", c.d_in));
        }
        Ok(())
    }

    pub fn score(&self, sample: &PreferenceSample) -> Result<f64> {
        Ok(self.forward(sample)?.score)
    }

    pub fn forward(&self, sample: &PreferenceSample) -> Result<ForwardCache> {
        self.check_sample(sample)?;
        let p = &self.params;
        let n = self.config.frames;

        let mut kinds = vec![TokenKind::Class];
        kinds.extend((0..n).map(TokenKind::Candidate));
        kinds.extend((0..n).map(TokenKind::Reference));
        if sample.text.is_some() {
            kinds.push(TokenKind::Text);
        }

        let mut inputs = Vec::with_capacity(kinds.len());
        let mut mlp_caches = Vec::with_capacity(kinds.len());
        let mut tokens = Vec::with_capacity(kinds.len());
        for kind in &kinds {
            let (input, role, temporal) = match *kind {
                TokenKind::Class => (None, ROLE_CLASS, None),
                TokenKind::Candidate(j) => (Some(&sample.candidate[j]), ROLE_CANDIDATE, Some(j)),
                TokenKind::Reference(j) => (Some(&sample.reference[j]), ROLE_REFERENCE, Some(j)),
                TokenKind::Text => (sample.text.as_ref(), ROLE_TEXT, None),
            };
            let (mut token, cache) = match (kind, input) {
                (TokenKind::Class, _) => (p.class_token.data.clone(), None),
                (TokenKind::Text, Some(x)) => {
                    let (o, c) = mlp(x, &p.text_w1, &p.text_b1, &p.text_w2, &p.text_b2);
                    (o, Some(c))
                }
                (_, Some(x)) => {
                    let (o, c) = mlp(x, &p.visual_w1, &p.visual_b1, &p.visual_w2, &p.visual_b2);
                    (o, Some(c))
                }
                (_, None) => unreachable!("visual tokens always carry input"),
            };
            add_into(&mut token, p.role_embeddings.row(role));
            if let Some(j) = temporal {
                add_into(&mut token, p.temporal_embeddings.row(j));
            }
            inputs.push(input.cloned());
            mlp_caches.push(cache);
            tokens.push(token);
        }

        let (head_input, encoder) = if self.config.bypass_encoder {
            (tokens[0].clone(), None)
        } else {
            let (out, cache) = self.encode(&tokens);
            (out, Some(cache))
        };
        let score = head_input
            .iter()
            .zip(&p.head_w.data)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + p.head_b.data[0];
        Ok(ForwardCache {
            kinds,
            inputs,
            mlp: mlp_caches,
            tokens,
            encoder,
            head_input,
            score,
        })
    }

    /// Post-norm encoder layer evaluated at the class-token position.
    fn encode(&self, tokens: &[Vec<f64>]) -> (Vec<f64>, EncoderCache) {
        let p = &self.params;
        let (d, heads) = (self.config.d_model, self.config.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = matvec(&p.attn_wq, &tokens[0], &p.attn_bq);
        let keys: Vec<Vec<f64>> = tokens.iter().map(|t| matvec(&p.attn_wk, t, &p.attn_bk)).collect();
        let values: Vec<Vec<f64>> = tokens.iter().map(|t| matvec(&p.attn_wv, t, &p.attn_bv)).collect();

        let mut weights = Vec::with_capacity(heads);
        let mut context = vec![0.0; d];
        for h in 0..heads {
            let range = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| q[range.clone()].iter().zip(&k[range.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let w: Vec<f64> = exps.iter().map(|e| e / total).collect();
            for (wi, v) in w.iter().zip(&values) {
                for k in range.clone() {
                    context[k] += wi * v[k];
                }
            }
            weights.push(w);
        }
        let attn_out = matvec(&p.attn_wo, &context, &p.attn_bo);
        let mut residual = tokens[0].clone();
        add_into(&mut residual, &attn_out);
        let (h1, ln1) = layer_norm(&residual, &p.ln1_gain, &p.ln1_bias);

        let ff_pre = matvec(&p.ff_w1, &h1, &p.ff_b1);
        let ff_hidden: Vec<f64> = ff_pre.iter().map(|v| gelu(*v)).collect();
        let ff_out = matvec(&p.ff_w2, &ff_hidden, &p.ff_b2);
        let mut residual2 = h1.clone();
        add_into(&mut residual2, &ff_out);
        let (h2, ln2) = layer_norm(&residual2, &p.ln2_gain, &p.ln2_bias);
        (
            h2,
            EncoderCache {
                q,
                keys,
                values,
                weights,
                context,
                ln1,
                h1,
                ff_pre,
                ff_hidden,
                ln2,
            },
        )
    }

    /// Accumulate `d_score * d score / d params` into `grads`.
    pub fn backward(&self, cache: &ForwardCache, d_score: f64, grads: &mut Params) {
        let p = &self.params;
        for (g, x) in grads.head_w.data.iter_mut().zip(&cache.head_input) {
            *g += d_score * x;
        }
        grads.head_b.data[0] += d_score;
        let d_head_input: Vec<f64> = p.head_w.data.iter().map(|w| d_score * w).collect();

        let mut d_tokens: Vec<Vec<f64>> = vec![vec![0.0; self.config.d_model]; cache.tokens.len()];
        match &cache.encoder {
            None => add_into(&mut d_tokens[0], &d_head_input),
            Some(enc) => self.encoder_backward(cache, enc, &d_head_input, &mut d_tokens, grads),
        }

        for (idx, kind) in cache.kinds.iter().enumerate() {
            let dt = &d_tokens[idx];
            match *kind {
                TokenKind::Class => {
                    add_into(&mut grads.class_token.data, dt);
                    add_into(grads.role_embeddings.row_mut(ROLE_CLASS), dt);
                }
                TokenKind::Candidate(j) | TokenKind::Reference(j) => {
                    let role = if matches!(kind, TokenKind::Candidate(_)) {
                        ROLE_CANDIDATE
                    } else {
                        ROLE_REFERENCE
                    };
                    add_into(grads.role_embeddings.row_mut(role), dt);
                    add_into(grads.temporal_embeddings.row_mut(j), dt);
                    let (Some(input), Some(mc)) = (&cache.inputs[idx], &cache.mlp[idx]) else {
                        unreachable!()
                    };
                    mlp_backward(
                        dt,
                        input,
                        mc,
                        &p.visual_w2,
                        [&mut grads.visual_w1, &mut grads.visual_b1, &mut grads.visual_w2, &mut grads.visual_b2],
                    );
                }
                TokenKind::Text => {
                    add_into(grads.role_embeddings.row_mut(ROLE_TEXT), dt);
                    let (Some(input), Some(mc)) = (&cache.inputs[idx], &cache.mlp[idx]) else {
                        unreachable!()
                    };
                    mlp_backward(
                        dt,
                        input,
                        mc,
                        &p.text_w2,
                        [&mut grads.text_w1, &mut grads.text_b1, &mut grads.text_w2, &mut grads.text_b2],
                    );
                }
            }
        }
    }

    fn encoder_backward(
        &self,
        cache: &ForwardCache,
        enc: &EncoderCache,
        d_out: &[f64],
        d_tokens: &mut [Vec<f64>],
        g: &mut Params,
    ) {
        let p = &self.params;
        let (d, heads) = (self.config.d_model, self.config.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let d_res2 = layer_norm_backward(d_out, &enc.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
        // feed-forward branch
        outer_acc(&mut g.ff_w2, &mut g.ff_b2, &d_res2, &enc.ff_hidden);
        let mut d_hidden = vec![0.0; enc.ff_hidden.len()];
        matvec_t_acc(&p.ff_w2, &d_res2, &mut d_hidden);
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&enc.ff_pre)
            .map(|(dh_, x)| dh_ * gelu_grad(*x))
            .collect();
        outer_acc(&mut g.ff_w1, &mut g.ff_b1, &d_pre, &enc.h1);
        let mut d_h1 = d_res2.clone();
        matvec_t_acc(&p.ff_w1, &d_pre, &mut d_h1);

        let d_res1 = layer_norm_backward(&d_h1, &enc.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
        add_into(&mut d_tokens[0], &d_res1);

        // attention
        outer_acc(&mut g.attn_wo, &mut g.attn_bo, &d_res1, &enc.context);
        let mut d_context = vec![0.0; d];
        matvec_t_acc(&p.attn_wo, &d_res1, &mut d_context);

        let l = cache.tokens.len();
        let mut d_q = vec![0.0; d];
        let mut d_keys = vec![vec![0.0; d]; l];
        let mut d_values = vec![vec![0.0; d]; l];
        for h in 0..heads {
            let range = h * dh..(h + 1) * dh;
            let w = &enc.weights[h];
            let mut d_w = vec![0.0; l];
            for i in 0..l {
                for k in range.clone() {
                    d_values[i][k] += w[i] * d_context[k];
                    d_w[i] += d_context[k] * enc.values[i][k];
                }
            }
            let dot: f64 = w.iter().zip(&d_w).map(|(a, b)| a * b).sum();
            for i in 0..l {
                let d_logit = w[i] * (d_w[i] - dot) * scale;
                for k in range.clone() {
                    d_q[k] += d_logit * enc.keys[i][k];
                    d_keys[i][k] += d_logit * enc.q[k];
                }
            }
        }
        outer_acc(&mut g.attn_wq, &mut g.attn_bq, &d_q, &cache.tokens[0]);
        matvec_t_acc(&p.attn_wq, &d_q, &mut d_tokens[0]);
        for i in 0..l {
            outer_acc(&mut g.attn_wk, &mut g.attn_bk, &d_keys[i], &cache.tokens[i]);
            matvec_t_acc(&p.attn_wk, &d_keys[i], &mut d_tokens[i]);
            outer_acc(&mut g.attn_wv, &mut g.attn_bv, &d_values[i], &cache.tokens[i]);
            matvec_t_acc(&p.attn_wv, &d_values[i], &mut d_tokens[i]);
        }
    }
}

fn mlp_backward(d_out: &[f64], input: &[f64], cache: &MlpCache, w2: &Tensor, grads: [&mut Tensor; 4]) {
    let [dw1, db1, dw2, db2] = grads;
    outer_acc(dw2, db2, d_out, &cache.hidden);
    let mut d_hidden = vec![0.0; cache.hidden.len()];
    matvec_t_acc(w2, d_out, &mut d_hidden);
    let d_pre: Vec<f64> = d_hidden
        .iter()
        .zip(&cache.pre)
        .map(|(g, x)| g * gelu_grad(*x))
        .collect();
    outer_acc(dw1, db1, &d_pre, input);
}
