//! Average precision, pooled mAP, precision–recall curves and the
//! embedding similarity study.

use std::fmt::Write as _;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_embedding, AugConfig};
use crate::corpus::{TrainingExample, Utterance};
use crate::error::{PvadError, Result};
use crate::features::FeatureExtractor;
use crate::nn::{Mode, ParamSet};
use crate::pvad::PvadModel;
use crate::rng;
use crate::speaker::{cosine_similarity, SpeakerModel};

/// Indices sorted by descending score; ties keep their original order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Step-wise AP: mean over positives of the precision at their rank.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(PvadError::Shape {
            path: "average_precision labels".into(),
            expected: vec![scores.len()],
            got: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PvadError::Numeric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(PvadError::ApUndefined);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (n, &i) in ranking(scores).iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (n + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per distinct score, predicting positive for `score >= threshold`.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<PrPoint>> {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(PvadError::ApUndefined);
    }
    let order = ranking(scores);
    let mut out = Vec::new();
    let mut tp = 0usize;
    for (n, &i) in order.iter().enumerate() {
        tp += usize::from(labels[i] == 1);
        let last_of_tie = order.get(n + 1).map_or(true, |&j| scores[j] != scores[i]);
        if last_of_tie {
            out.push(PrPoint {
                threshold: scores[i],
                precision: tp as f64 / (n + 1) as f64,
                recall: tp as f64 / positives as f64,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "AP (ns/nts)")]
    pub ap_ns_nts: f64,
    #[serde(rename = "AP (ts)")]
    pub ap_ts: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

/// Pools frames of all sequences. Class 1 is scored by posterior column 1
/// against `q`, class 0 by column 0 against `1 - q`; mAP ranks the
/// frame-major interleaving of both.
pub fn pooled_metrics<'a>(items: impl IntoIterator<Item = (ArrayView2<'a, f64>, &'a [u8])>) -> Result<Metrics> {
    let (mut s0, mut l0, mut s1, mut l1, mut sm, mut lm) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for (post, q) in items {
        if post.nrows() != q.len() || post.ncols() != 2 {
            return Err(PvadError::Shape {
                path: "posteriors".into(),
                expected: vec![q.len(), 2],
                got: post.shape().to_vec(),
            });
        }
        for (row, &qt) in post.rows().into_iter().zip(q) {
            s0.push(row[0]);
            l0.push(1 - qt);
            s1.push(row[1]);
            l1.push(qt);
            sm.extend([row[0], row[1]]);
            lm.extend([1 - qt, qt]);
        }
    }
    if s0.is_empty() {
        return Err(PvadError::EmptyDataset("no frames to evaluate".into()));
    }
    Ok(Metrics {
        ap_ns_nts: average_precision(&s0, &l0)?,
        ap_ts: average_precision(&s1, &l1)?,
        map: average_precision(&sm, &lm)?,
    })
}

/// Eval-mode posteriors for one example. Personalized models embed the
/// example's conditioning features without augmentation.
pub fn example_posteriors(
    model: &PvadModel,
    params: &ParamSet,
    example: &TrainingExample,
    speaker: &SpeakerModel,
    extractor: &FeatureExtractor,
) -> Result<ndarray::Array2<f64>> {
    let e = if model.is_personalized() {
        Some(speaker.encode(&extractor.finish(&example.conditioning.features)?)?)
    } else {
        None
    };
    model.posteriors(params, example.input.view(), e.as_ref().map(|e| e.view()))
}

/// Metrics against target-speaker labels `q` over pooled test frames.
pub fn evaluate_pvad(
    model: &PvadModel,
    params: &ParamSet,
    test: &[TrainingExample],
    speaker: &SpeakerModel,
    extractor: &FeatureExtractor,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(PvadError::EmptyDataset("empty test set".into()));
    }
    let posts = test
        .iter()
        .map(|ex| example_posteriors(model, params, ex, speaker, extractor))
        .collect::<Result<Vec<_>>>()?;
    pooled_metrics(posts.iter().zip(test).map(|(p, ex)| (p.view(), ex.pvad_labels.as_slice())))
}

/// Linearly interpolated quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(PvadError::EmptyDataset("quantile of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub const HIST_BIN_WIDTH: f64 = 0.05;
pub const HIST_BINS: usize = 40;

/// Counts over `[-1, 1]` in bins of 0.05; 1.0 falls in the last bin.
pub fn histogram(values: &[f64]) -> Vec<usize> {
    let mut counts = vec![0; HIST_BINS];
    for &v in values {
        let b = ((v + 1.0) / HIST_BIN_WIDTH).floor();
        counts[(b.max(0.0) as usize).min(HIST_BINS - 1)] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStudy {
    /// Panel (a): different utterances of one speaker.
    pub same_speaker: Vec<f64>,
    /// Unaugmented embeddings of different speakers (shown in every panel).
    pub cross_speaker: Vec<f64>,
    /// Panel (b): each utterance against itself, unaugmented.
    pub self_similarity: Vec<f64>,
    /// Panel (c): two independent augmentations of one utterance.
    pub augmented_pairs: Vec<f64>,
}

impl SimilarityStudy {
    pub fn to_csv(&self, header_comment: &str) -> String {
        let cols = [
            histogram(&self.same_speaker),
            histogram(&self.cross_speaker),
            histogram(&self.self_similarity),
            histogram(&self.augmented_pairs),
        ];
        let mut out = String::new();
        if !header_comment.is_empty() {
            let _ = writeln!(out, "# {header_comment}");
        }
        out.push_str("bin_lo,bin_hi,a_same_speaker,a_cross_speaker,b_self,b_cross_speaker,c_augmented,c_cross_speaker\n");
        for b in 0..HIST_BINS {
            let lo = -1.0 + b as f64 * HIST_BIN_WIDTH;
            let _ = writeln!(
                out,
                "{lo:.2},{:.2},{},{},{},{},{},{}",
                lo + HIST_BIN_WIDTH,
                cols[0][b],
                cols[1][b],
                cols[2][b],
                cols[1][b],
                cols[3][b],
                cols[1][b]
            );
        }
        out
    }
}

/// Similarity distributions over `utts` (speaker-labeled). Augmented pairs
/// use `seed` for their masks and dropout.
pub fn similarity_study(
    speaker: &SpeakerModel,
    extractor: &FeatureExtractor,
    utts: &[&Utterance],
    aug: &AugConfig,
    seed: u64,
) -> Result<SimilarityStudy> {
    let mut statics = Vec::with_capacity(utts.len());
    let mut embs: Vec<Array1<f64>> = Vec::with_capacity(utts.len());
    for u in utts {
        if u.speaker_id.is_none() {
            return Err(PvadError::invalid(format!("{} has no speaker label", u.utterance_id)));
        }
        let st = extractor.static_features(&u.audio)?;
        embs.push(speaker.encode(&extractor.finish(&st)?)?);
        statics.push(st);
    }
    let mut study = SimilarityStudy {
        same_speaker: vec![],
        cross_speaker: vec![],
        self_similarity: vec![],
        augmented_pairs: vec![],
    };
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            let c = cosine_similarity(embs[i].view(), embs[j].view())?;
            if utts[i].speaker_id == utts[j].speaker_id {
                study.same_speaker.push(c);
            } else {
                study.cross_speaker.push(c);
            }
        }
        study.self_similarity.push(cosine_similarity(embs[i].view(), embs[i].view())?);
        let mut r = rng::stream(seed, "similarity-aug", i as u64);
        let a = augment_embedding(&statics[i], speaker, extractor, aug, Mode::Train, &mut r)?;
        let b = augment_embedding(&statics[i], speaker, extractor, aug, Mode::Train, &mut r)?;
        study.augmented_pairs.push(cosine_similarity(a.view(), b.view())?);
    }
    if study.same_speaker.is_empty() {
        return Err(PvadError::invalid("similarity study needs at least 2 utterances of one speaker"));
    }
    if study.cross_speaker.is_empty() {
        return Err(PvadError::invalid("similarity study needs at least 2 speakers"));
    }
    Ok(study)
}
