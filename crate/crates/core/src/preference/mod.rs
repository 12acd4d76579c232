//! Prompt preference learning: score each candidate track against the
//! reference proposal and pick the temporal prompt to segment with.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{read_checkpoint, read_training_log, write_checkpoint, write_training_log};
pub use model::{ModelConfig, Params, PreferenceModel, PreferenceSample, Tensor};
pub use train::{
    analytic_gradient, bce_loss, grad_check, sample_loss, train, EpochLog, GradCheckReport, TrainOutcome,
    TrainingConfig, VideoBatch,
};

use crate::error::{Error, Result};
use crate::geometry::{box_miou, BoxSequence};
use crate::prompts::{CandidateTrack, ReferenceProposal, REFERENCE_ID};

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `1` where the candidate's box mIoU strictly beats the reference's, else `0`.
pub fn make_labels(
    candidates: &[CandidateTrack],
    reference: &ReferenceProposal,
    gt: &BoxSequence,
) -> Result<Vec<f64>> {
    let reference_miou = box_miou(&reference.boxes, gt)?;
    candidates
        .iter()
        .map(|c| Ok(if box_miou(&c.boxes, gt)? > reference_miou { 1.0 } else { 0.0 }))
        .collect()
}

/// 1-based frame indices spread evenly over `1..=t`, endpoints included.
pub fn even_frame_indices(t: usize, n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![1];
    }
    // round(k (t-1) / (n-1)) with halves rounded up, in integers
    (0..n)
        .map(|k| (2 * k * (t - 1) + (n - 1)) / (2 * (n - 1)) + 1)
        .collect()
}

/// The `n` per-frame tokens a track contributes to the classifier.
pub fn sample_track_tokens(frames: &[Vec<f64>], n: usize) -> Result<Vec<Vec<f64>>> {
    if frames.is_empty() {
        return Err(Error::EmptyVideo("track has no frame features".into()));
    }
    Ok(even_frame_indices(frames.len(), n)
        .into_iter()
        .map(|i| frames[i - 1].clone())
        .collect())
}

/// Apply the selection rule to per-candidate probabilities: the most
/// probable candidate if it clears 0.5 (ties to the lowest id), otherwise
/// the reference.
pub fn select_from_probabilities(probabilities: &[(u32, f64)]) -> u32 {
    let mut best: Option<(u32, f64)> = None;
    for &(id, p) in probabilities {
        best = match best {
            Some((bid, bp)) if bp > p || (bp == p && bid < id) => Some((bid, bp)),
            _ => Some((id, p)),
        };
    }
    match best {
        Some((id, p)) if p > 0.5 => id,
        _ => REFERENCE_ID,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub prompt_id: u32,
    /// `(prompt_id, sigma(s))` for every candidate, in input order.
    pub probabilities: Vec<(u32, f64)>,
}

/// Score every candidate against the reference and apply the selection rule.
pub fn select(
    model: &PreferenceModel,
    candidates: &[(u32, Vec<Vec<f64>>)],
    reference: &[Vec<f64>],
    text: Option<&[f64]>,
) -> Result<Selection> {
    let probabilities = candidates
        .iter()
        .map(|(id, tokens)| {
            let sample = PreferenceSample {
                candidate: tokens.clone(),
                reference: reference.to_vec(),
                text: text.map(|t| t.to_vec()),
                label: 0.0,
            };
            Ok((*id, sigmoid(model.score(&sample)?)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Selection {
        prompt_id: select_from_probabilities(&probabilities),
        probabilities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    #[test]
    fn even_spacing() {
        assert_eq!(even_frame_indices(8, 8), (1..=8).collect::<Vec<_>>());
        assert_eq!(even_frame_indices(7, 4), vec![1, 3, 5, 7]);
        assert_eq!(even_frame_indices(1, 4), vec![1, 1, 1, 1]);
        assert_eq!(even_frame_indices(10, 1), vec![1]);
        for t in 1..40 {
            for n in 2..10 {
                let idx = even_frame_indices(t, n);
                assert_eq!(idx[0], 1);
                assert_eq!(idx[n - 1], t);
                assert!(idx.windows(2).all(|w| w[0] <= w[1]));
                for (k, i) in idx.iter().enumerate() {
                    let exact = k as f64 * (t - 1) as f64 / (n - 1) as f64;
                    assert!((*i as f64 - 1.0 - exact).abs() <= 0.5);
                }
            }
        }
    }

    #[test]
    fn track_tokens() {
        let frames: Vec<Vec<f64>> = (1..=7).map(|i| vec![i as f64]).collect();
        let toks = sample_track_tokens(&frames, 4).unwrap();
        assert_eq!(toks, vec![vec![1.0], vec![3.0], vec![5.0], vec![7.0]]);
        let one = sample_track_tokens(&frames[..1], 3).unwrap();
        assert_eq!(one, vec![vec![1.0]; 3]);
        assert!(matches!(sample_track_tokens(&[], 3), Err(Error::EmptyVideo(_))));
    }

    #[test]
    fn selection_rule() {
        assert_eq!(select_from_probabilities(&[(1, 0.4), (2, 0.45)]), REFERENCE_ID);
        assert_eq!(select_from_probabilities(&[(1, 0.6), (2, 0.9)]), 2);
        assert_eq!(select_from_probabilities(&[]), REFERENCE_ID);
        assert_eq!(select_from_probabilities(&[(3, 0.7), (2, 0.7)]), 2);
        assert_eq!(select_from_probabilities(&[(1, 0.5)]), REFERENCE_ID);
    }

    #[test]
    fn selection_argmax_ignores_shift() {
        let probs: Vec<f64> = vec![-1.3, 0.2, 2.5, 0.7];
        for shift in [-5.0, -1.0, 0.0, 3.0] {
            let p: Vec<(u32, f64)> = probs
                .iter()
                .enumerate()
                .map(|(i, s)| (i as u32 + 1, sigmoid(s + shift)))
                .collect();
            let best = p.iter().cloned().fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
            assert_eq!(best.0, 3);
            let sel = select_from_probabilities(&p);
            assert!(sel == 3 || sel == REFERENCE_ID);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(30.0) < 1.0 && sigmoid(-30.0) > 0.0);
    }

    fn seq(boxes: &[f64]) -> BoxSequence {
        BoxSequence::new(
            "v",
            boxes
                .iter()
                .enumerate()
                .map(|(i, cx)| (i as u32 + 1, BBox::new(*cx, 10.0, 10.0, 10.0).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    fn candidate(id: u32, boxes: &[f64]) -> CandidateTrack {
        CandidateTrack {
            prompt_id: id,
            boxes: seq(boxes),
            filled: vec![false; boxes.len()],
            scores: vec![Some(0.5); boxes.len()],
            source_track_id: id,
        }
    }

    #[test]
    fn labels_are_strict() {
        let gt = seq(&[10.0, 10.0]);
        let reference = ReferenceProposal {
            boxes: seq(&[12.0, 12.0]),
            scores: vec![0.9; 2],
            carried: vec![false; 2],
        };
        let cands = vec![
            candidate(1, &[11.0, 11.0]),
            candidate(2, &[12.0, 12.0]),
            candidate(3, &[15.0, 15.0]),
            candidate(4, &[10.0, 14.0]),
            candidate(5, &[10.0, 10.0]),
        ];
        let labels = make_labels(&cands, &reference, &gt).unwrap();
        let r = box_miou(&reference.boxes, &gt).unwrap();
        let expected: Vec<f64> = cands
            .iter()
            .map(|c| if box_miou(&c.boxes, &gt).unwrap() > r { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(labels, expected);
        assert_eq!(labels, vec![1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn select_scores_each_candidate_independently() {
        let cfg = ModelConfig {
            d_in: 3,
            d_model: 8,
            heads: 2,
            frames: 2,
            bypass_encoder: false,
        };
        let model = PreferenceModel::init(cfg, 4).unwrap();
        let tok = |a: f64| vec![vec![a, -a, 0.5], vec![0.1, a, a * a]];
        let cands = vec![(1, tok(0.3)), (2, tok(-0.8)), (3, tok(1.2))];
        let reference = tok(0.0);
        let text = [0.2, 0.2, -0.1];
        let a = select(&model, &cands, &reference, Some(&text)).unwrap();
        let rev: Vec<_> = cands.iter().rev().cloned().collect();
        let b = select(&model, &rev, &reference, Some(&text)).unwrap();
        let mut pa = a.probabilities.clone();
        let mut pb = b.probabilities.clone();
        pa.sort_by_key(|p| p.0);
        pb.sort_by_key(|p| p.0);
        assert_eq!(pa, pb);
        assert_eq!(a.prompt_id, b.prompt_id);
        let empty = select(&model, &[], &reference, Some(&text)).unwrap();
        assert_eq!(empty.prompt_id, REFERENCE_ID);
    }
}
