//! Utterances, synthetic speakers, noise and example construction.

mod examples;
mod manifest;
mod noise;
mod synth;
mod utterance;

pub use examples::{
    concatenate, Concatenation, Conditioning, ConditioningKind, ExampleBuilder, NoisePlan, TrainingExample,
    DEFAULT_GAP_RANGE_S,
};
pub use manifest::{
    noise_bank, read_corpus_utterances, read_manifest, read_noise_bank, speaker_name, write_corpus, Corpus,
    CorpusConfig, ManifestRecord, NoiseRecording, MANIFEST_FILE, NOISE_DIR,
};
pub use noise::{generate_noise, mix_noise, speech_power, speech_sample_mask, NoiseKind};
pub use synth::{synth_utterance, SpeakerSpec, Synthesizer, MIN_DURATION_S};
pub use utterance::{labels_from_spans, spans_from_labels, Span, Utterance, UtteranceInfo};
