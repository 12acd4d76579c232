use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Params, PreferenceModel, PreferenceSample};
use super::sigmoid;
use crate::error::{Error, Result};

/// Binary cross-entropy of one logit, in the overflow-free form
/// `max(s, 0) - s y + ln(1 + e^{-|s|})`.
fn bce_single(s: f64, y: f64) -> f64 {
    s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
}

/// Summed BCE over one video's candidates.
pub fn bce_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(scores.iter().zip(labels).map(|(s, y)| bce_single(*s, *y)).sum())
}

/// BCE of a single sample under the model.
pub fn sample_loss(model: &PreferenceModel, sample: &PreferenceSample) -> Result<f64> {
    Ok(bce_single(model.score(sample)?, sample.label))
}

/// Gradient of `sample_loss` with respect to every parameter.
pub fn analytic_gradient(model: &PreferenceModel, sample: &PreferenceSample) -> Result<(f64, Params)> {
    let cache = model.forward(sample)?;
    let mut grads = model.params.zeros_like();
    let loss = bce_single(cache.score, sample.label);
    model.backward(&cache, sigmoid(cache.score) - sample.label, &mut grads);
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

/// All labelled candidates of one video; one optimizer step each.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoBatch {
    pub video_id: String,
    pub samples: Vec<PreferenceSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over steps of the per-video summed loss.
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PreferenceModel,
    pub log: Vec<EpochLog>,
}

struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params, grads: &Params, cfg: &TrainingConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
                v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m.data[i] / c1;
                let v_hat = v.data[i] / c2;
                p.data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

fn add_params(acc: &mut Params, g: &Params) {
    for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
        for (x, y) in a.data.iter_mut().zip(&b.data) {
            *x += y;
        }
    }
}

/// Adam over per-video steps in a seeded shuffled order. Per-sample
/// gradients are computed in parallel and summed in sample order, so the
/// result is bitwise reproducible for a given seed.
pub fn train(model: PreferenceModel, data: &[VideoBatch], config: &TrainingConfig) -> Result<TrainOutcome> {
    config.validate()?;
    for batch in data {
        for s in &batch.samples {
            model.check_sample(s)?;
        }
    }
    let mut model = model;
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).filter(|&i| !data[i].samples.is_empty()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (step, &vi) in order.iter().enumerate() {
            let batch = &data[vi];
            let per_sample: Vec<(f64, f64, Params)> = batch
                .samples
                .par_iter()
                .map(|s| {
                    let cache = model.forward(s)?;
                    let mut g = model.params.zeros_like();
                    model.backward(&cache, sigmoid(cache.score) - s.label, &mut g);
                    Ok((cache.score, s.label, g))
                })
                .collect::<Result<_>>()?;
            let mut grads = model.params.zeros_like();
            let mut loss = 0.0;
            for (score, label, g) in &per_sample {
                loss += bce_single(*score, *label);
                correct += ((sigmoid(*score) > 0.5) == (*label > 0.5)) as usize;
                add_params(&mut grads, g);
            }
            seen += per_sample.len();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: step + 1,
                    loss,
                });
            }
            loss_sum += loss;
            adam.step(&mut model.params, &grads, config);
            if !model.params.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: step + 1,
                    loss: f64::NAN,
                });
            }
        }
        let entry = EpochLog {
            epoch,
            loss: if order.is_empty() { 0.0 } else { loss_sum / order.len() as f64 },
            train_acc: if seen == 0 { 0.0 } else { correct as f64 / seen as f64 },
        };
        log::debug!("epoch {epoch}: loss {:.6} acc {:.4}", entry.loss, entry.train_acc);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(tensor name, max relative error, entries checked)`
    pub per_tensor: Vec<(String, f64, usize)>,
}

const FD_STEP: f64 = 1e-5;
const FD_MAX_ENTRIES: usize = 64;
/// Denominator floor, so that gradients that are zero up to rounding do not
/// register as large relative errors.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare the analytic gradient of the sample loss with central finite
/// differences on up to 64 evenly strided entries of every tensor.
pub fn grad_check(model: &PreferenceModel, sample: &PreferenceSample) -> Result<GradCheckReport> {
    let (_, grads) = analytic_gradient(model, sample)?;
    let mut probe = model.clone();
    let mut per_tensor = Vec::new();
    let mut max_err: f64 = 0.0;
    let n_tensors = grads.tensors().len();
    for ti in 0..n_tensors {
        let len = grads.tensors()[ti].len();
        let stride = len.div_ceil(FD_MAX_ENTRIES).max(1);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for idx in (0..len).step_by(stride) {
            let original = probe.params.tensors()[ti].data[idx];
            probe.params.tensors_mut()[ti].data[idx] = original + FD_STEP;
            let plus = sample_loss(&probe, sample)?;
            probe.params.tensors_mut()[ti].data[idx] = original - FD_STEP;
            let minus = sample_loss(&probe, sample)?;
            probe.params.tensors_mut()[ti].data[idx] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads.tensors()[ti].data[idx];
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        }
        max_err = max_err.max(worst);
        per_tensor.push((grads.tensors()[ti].name.clone(), worst, checked));
    }
    Ok(GradCheckReport {
        max_relative_error: max_err,
        per_tensor,
    })
}
