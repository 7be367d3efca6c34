//! Training and test example construction.
//!
//! Enrollment-less examples concatenate 1–3 utterances and condition on a
//! copy of one of them; enrollment-full examples reserve one utterance of the
//! target speaker as enrollment and never place it in the input.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::noise::mix_noise;
use super::utterance::{labels_from_spans, Span, Utterance};
use crate::error::{PvadError, Result};
use crate::features::{FeatureExtractor, FeatureSequence, Waveform};
use crate::rng;

/// Concatenated input audio with sample-level bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Concatenation {
    pub audio: Waveform,
    pub utterance_ids: Vec<String>,
    /// Start sample of each constituent.
    pub offsets: Vec<usize>,
    /// Silence inserted after constituent `i` (length `n - 1`).
    pub gaps: Vec<usize>,
    pub speech_spans: Vec<Span>,
    pub target_spans: Vec<Span>,
    pub vad_labels: Vec<u8>,
    pub pvad_labels: Vec<u8>,
}

impl Concatenation {
    pub fn as_utterance(&self) -> Utterance {
        Utterance {
            utterance_id: self.utterance_ids.join("+"),
            speaker_id: None,
            audio: self.audio.clone(),
            vad_labels: self.vad_labels.clone(),
            speech_spans: self.speech_spans.clone(),
        }
    }
}

/// Places `utts` back to back with `gaps[i]` samples of digital silence after
/// utterance `i`. `is_target[i]` marks constituents whose speech counts as
/// target speech.
pub fn concatenate(
    utts: &[&Utterance],
    is_target: &[bool],
    gaps: &[usize],
    framing: crate::features::Framing,
) -> Result<Concatenation> {
    if utts.is_empty() {
        return Err(PvadError::invalid("cannot concatenate zero utterances"));
    }
    if is_target.len() != utts.len() || gaps.len() + 1 != utts.len() {
        return Err(PvadError::invalid("target flags / gaps do not match utterance count"));
    }
    let sample_rate = utts[0].audio.sample_rate;
    if utts.iter().any(|u| u.audio.sample_rate != sample_rate) {
        return Err(PvadError::invalid("mixed sample rates in concatenation"));
    }
    let mut samples = Vec::new();
    let mut offsets = Vec::new();
    let mut speech_spans = Vec::new();
    let mut target_spans = Vec::new();
    for (i, u) in utts.iter().enumerate() {
        let off = samples.len();
        offsets.push(off);
        samples.extend_from_slice(&u.audio.samples);
        for &(a, b) in &u.speech_spans {
            speech_spans.push((a + off, b + off));
            if is_target[i] {
                target_spans.push((a + off, b + off));
            }
        }
        if let Some(&g) = gaps.get(i) {
            samples.resize(samples.len() + g, 0.0);
        }
    }
    let n = samples.len();
    Ok(Concatenation {
        audio: Waveform {
            samples,
            sample_rate,
        },
        utterance_ids: utts.iter().map(|u| u.utterance_id.clone()).collect(),
        offsets,
        gaps: gaps.to_vec(),
        vad_labels: labels_from_spans(n, &speech_spans, framing),
        pvad_labels: labels_from_spans(n, &target_spans, framing),
        speech_spans,
        target_spans,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningKind {
    /// A copy of one of the input's own constituents (enrollment-less).
    SelfCopy,
    /// A separate enrollment utterance of the target speaker.
    Enrollment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub kind: ConditioningKind,
    pub utterance_id: String,
    /// Static log-mel features; deltas and context are added downstream so
    /// frequency masking can act on mel bins.
    pub features: FeatureSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// Context-stacked input features `X̃`.
    pub input: FeatureSequence,
    pub conditioning: Conditioning,
    /// `q_t`: target-speaker speech.
    pub pvad_labels: Vec<u8>,
    /// `s_t`: any speech.
    pub vad_labels: Vec<u8>,
    pub input_utterance_ids: Vec<String>,
    pub offsets: Vec<usize>,
    pub gaps: Vec<usize>,
    pub snr_db: Option<f64>,
}

/// How background noise is applied to example inputs.
#[derive(Debug, Clone, Copy)]
pub enum NoisePlan<'a> {
    Clean,
    /// With probability `prob`, mix a random bank entry at a uniform SNR.
    Random {
        bank: &'a [Waveform],
        prob: f64,
        snr_range_db: (f64, f64),
        noisy_conditioning: bool,
    },
    Fixed {
        noise: &'a Waveform,
        snr_db: f64,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ExampleBuilder<'a> {
    pub extractor: &'a FeatureExtractor,
    pub gap_range_s: (f64, f64),
    pub noise: NoisePlan<'a>,
}

pub const DEFAULT_GAP_RANGE_S: (f64, f64) = (0.0, 0.5);

impl<'a> ExampleBuilder<'a> {
    pub fn new(extractor: &'a FeatureExtractor) -> Self {
        Self {
            extractor,
            gap_range_s: DEFAULT_GAP_RANGE_S,
            noise: NoisePlan::Clean,
        }
    }

    pub fn with_noise(self, noise: NoisePlan<'a>) -> Self {
        Self { noise, ..self }
    }

    fn sample_gaps(&self, count: usize, r: &mut rng::Rng) -> Result<Vec<usize>> {
        let (lo, hi) = self.gap_range_s;
        if !(0.0 <= lo && lo <= hi) {
            return Err(PvadError::invalid(format!("bad gap range {lo}..{hi}")));
        }
        let sr = f64::from(self.extractor.config.sample_rate);
        Ok((0..count)
            .map(|_| {
                let g = if hi > lo { r.gen_range(lo..hi) } else { lo };
                (g * sr).round() as usize
            })
            .collect())
    }

    /// Returns the (possibly noisy) input utterance and the SNR used.
    fn apply_noise(&self, input: Utterance, seed: u64) -> Result<(Utterance, Option<f64>)> {
        let framing = self.extractor.framing();
        match self.noise {
            NoisePlan::Clean => Ok((input, None)),
            NoisePlan::Fixed { noise, snr_db } => {
                Ok((mix_noise(&input, noise, snr_db, seed, framing)?, Some(snr_db)))
            }
            NoisePlan::Random {
                bank,
                prob,
                snr_range_db: (lo, hi),
                ..
            } => {
                let mut r = rng::stream(seed, "noise-plan", 0);
                if bank.is_empty() || !input.has_speech() || !r.gen_bool(prob.clamp(0.0, 1.0)) {
                    return Ok((input, None));
                }
                let noise = &bank[r.gen_range(0..bank.len())];
                let snr = if hi > lo { r.gen_range(lo..hi) } else { lo };
                Ok((mix_noise(&input, noise, snr, r.gen(), framing)?, Some(snr)))
            }
        }
    }

    fn conditioning_features(&self, u: &Utterance, seed: u64) -> Result<FeatureSequence> {
        if let NoisePlan::Random {
            noisy_conditioning: true,
            ..
        } = self.noise
        {
            let (noisy, _) = self.apply_noise(u.clone(), seed)?;
            return self.extractor.static_features(&noisy.audio);
        }
        self.extractor.static_features(&u.audio)
    }

    fn assemble(
        &self,
        utts: &[&Utterance],
        is_target: &[bool],
        conditioning: &Utterance,
        kind: ConditioningKind,
        r: &mut rng::Rng,
    ) -> Result<TrainingExample> {
        let gaps = self.sample_gaps(utts.len() - 1, r)?;
        let concat = concatenate(utts, is_target, &gaps, self.extractor.framing())?;
        let (noisy, snr_db) = self.apply_noise(concat.as_utterance(), r.gen())?;
        let input = self.extractor.extract(&noisy.audio)?;
        debug_assert_eq!(input.frames(), concat.pvad_labels.len());
        let features = self.conditioning_features(conditioning, r.gen())?;
        Ok(TrainingExample {
            input,
            conditioning: Conditioning {
                kind,
                utterance_id: conditioning.utterance_id.clone(),
                features,
            },
            pvad_labels: concat.pvad_labels,
            vad_labels: concat.vad_labels,
            input_utterance_ids: concat.utterance_ids,
            offsets: concat.offsets,
            gaps: concat.gaps,
            snr_db,
        })
    }

    /// Concatenates 1–3 utterances; the conditioning is `utts[target_index]`
    /// itself. Speaker ids are never consulted.
    pub fn build_enroll_less_example(
        &self,
        utts: &[&Utterance],
        target_index: usize,
        rng_seed: u64,
    ) -> Result<TrainingExample> {
        if utts.is_empty() || utts.len() > 3 {
            return Err(PvadError::invalid(format!(
                "enroll-less examples take 1 to 3 utterances, got {}",
                utts.len()
            )));
        }
        if target_index >= utts.len() {
            return Err(PvadError::invalid(format!(
                "target index {target_index} out of range for {} utterances",
                utts.len()
            )));
        }
        let is_target: Vec<bool> = (0..utts.len()).map(|i| i == target_index).collect();
        let mut r = rng::stream(rng_seed, "enroll-less", 0);
        self.assemble(utts, &is_target, utts[target_index], ConditioningKind::SelfCopy, &mut r)
    }

    /// Reserves one of `target_utts` as enrollment; the rest plus the
    /// distractors are shuffled into the input.
    pub fn build_enroll_full_example(
        &self,
        target_utts: &[&Utterance],
        distractor_utts: &[&Utterance],
        rng_seed: u64,
    ) -> Result<TrainingExample> {
        if target_utts.len() < 2 {
            return Err(PvadError::invalid(
                "enroll-full examples need at least 2 target utterances (one is reserved as enrollment)",
            ));
        }
        let speaker = target_utts[0]
            .speaker_id
            .as_deref()
            .ok_or_else(|| PvadError::invalid("enroll-full examples need speaker labels"))?;
        if target_utts.iter().any(|u| u.speaker_id.as_deref() != Some(speaker)) {
            return Err(PvadError::invalid("target utterances span several speakers"));
        }
        if distractor_utts
            .iter()
            .any(|u| u.speaker_id.is_none() || u.speaker_id.as_deref() == Some(speaker))
        {
            return Err(PvadError::invalid("distractors must be labeled non-target speakers"));
        }
        let mut r = rng::stream(rng_seed, "enroll-full", 0);
        let enroll_idx = r.gen_range(0..target_utts.len());
        let mut parts: Vec<(&Utterance, bool)> = target_utts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != enroll_idx)
            .map(|(_, u)| (*u, true))
            .chain(distractor_utts.iter().map(|u| (*u, false)))
            .collect();
        parts.shuffle(&mut r);
        let utts: Vec<&Utterance> = parts.iter().map(|p| p.0).collect();
        let is_target: Vec<bool> = parts.iter().map(|p| p.1).collect();
        self.assemble(&utts, &is_target, target_utts[enroll_idx], ConditioningKind::Enrollment, &mut r)
    }

    /// Test-time example with an explicitly chosen enrollment utterance.
    pub fn build_test_example(
        &self,
        input_utts: &[&Utterance],
        is_target: &[bool],
        enrollment: &Utterance,
        rng_seed: u64,
    ) -> Result<TrainingExample> {
        if input_utts.iter().any(|u| u.utterance_id == enrollment.utterance_id) {
            return Err(PvadError::invalid("enrollment utterance appears in the input"));
        }
        let mut r = rng::stream(rng_seed, "test-example", 0);
        self.assemble(input_utts, is_target, enrollment, ConditioningKind::Enrollment, &mut r)
    }
}
