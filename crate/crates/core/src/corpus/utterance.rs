use serde::{Deserialize, Serialize};

use crate::features::{Framing, Waveform};

/// Half-open sample range `[start, end)` containing speech.
pub type Span = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: Option<String>,
    pub audio: Waveform,
    /// Per-frame speech state `s_t`.
    pub vad_labels: Vec<u8>,
    /// Sample-level speech regions the frame labels were derived from.
    pub speech_spans: Vec<Span>,
}

impl Utterance {
    pub fn from_spans(
        utterance_id: impl Into<String>,
        speaker_id: Option<String>,
        audio: Waveform,
        speech_spans: Vec<Span>,
        framing: Framing,
    ) -> Self {
        let vad_labels = labels_from_spans(audio.len(), &speech_spans, framing);
        Self {
            utterance_id: utterance_id.into(),
            speaker_id,
            audio,
            vad_labels,
            speech_spans,
        }
    }

    /// Rebuilds sample spans from stored frame labels (see [`spans_from_labels`]).
    pub fn from_labels(
        utterance_id: impl Into<String>,
        speaker_id: Option<String>,
        audio: Waveform,
        vad_labels: Vec<u8>,
        framing: Framing,
    ) -> Self {
        let speech_spans = spans_from_labels(&vad_labels, audio.len(), framing);
        Self {
            utterance_id: utterance_id.into(),
            speaker_id,
            audio,
            vad_labels,
            speech_spans,
        }
    }

    pub fn has_speech(&self) -> bool {
        self.vad_labels.iter().any(|&s| s == 1)
    }

    pub fn speech_frames(&self) -> usize {
        self.vad_labels.iter().filter(|&&s| s == 1).count()
    }
}

/// Frame `t` is speech iff its window `[t·hop, t·hop + win)` overlaps any span.
pub fn labels_from_spans(n_samples: usize, spans: &[Span], framing: Framing) -> Vec<u8> {
    (0..framing.num_frames(n_samples))
        .map(|t| {
            let (lo, hi) = framing.frame_span(t);
            u8::from(spans.iter().any(|&(a, b)| a < b && a < hi && b > lo))
        })
        .collect()
}

/// Inverse of [`labels_from_spans`] for labels produced by the overlap rule:
/// each run of speech frames becomes the samples covered *only* by frames in
/// that run. A run too short to own any sample maps to its window midpoint.
pub fn spans_from_labels(labels: &[u8], n_samples: usize, framing: Framing) -> Vec<Span> {
    let t_len = labels.len();
    let mut spans = Vec::new();
    let mut t = 0;
    while t < t_len {
        if labels[t] == 0 {
            t += 1;
            continue;
        }
        let a = t;
        while t < t_len && labels[t] == 1 {
            t += 1;
        }
        let b = t - 1;
        let lo = if a == 0 {
            0
        } else {
            (a - 1) * framing.hop + framing.win
        };
        let hi = if b + 1 == t_len {
            n_samples
        } else {
            (b + 1) * framing.hop
        };
        if lo < hi {
            spans.push((lo, hi));
        } else {
            let mid = (a * framing.hop + b * framing.hop + framing.win) / 2;
            spans.push((mid, mid + 1));
        }
    }
    spans
}

/// Summary of an utterance for manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceInfo {
    pub utterance_id: String,
    pub speaker_id: Option<String>,
    pub duration_s: f64,
    pub speech_frames: usize,
}
