//! Synthetic corpus generation and the on-disk manifest format.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::noise::{generate_noise, NoiseKind};
use super::synth::{SpeakerSpec, Synthesizer};
use super::utterance::Utterance;
use crate::error::{PvadError, Result};
use crate::features::{read_wav, write_wav, Framing, Waveform, DEFAULT_SAMPLE_RATE};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Voiced duration range; silence padding comes on top.
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub sample_rate: u32,
    /// Length of each noise bank recording.
    pub noise_len_s: f64,
    /// Recordings per noise kind.
    pub noise_per_kind: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utts_per_speaker: 50,
            min_duration_s: 0.5,
            max_duration_s: 1.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            noise_len_s: 8.0,
            noise_per_kind: 2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.utts_per_speaker == 0 {
            return Err(PvadError::Config("corpus needs at least one speaker and utterance".into()));
        }
        if !(self.min_duration_s >= super::synth::MIN_DURATION_S && self.max_duration_s >= self.min_duration_s) {
            return Err(PvadError::Config(format!(
                "bad duration range {}..{}",
                self.min_duration_s, self.max_duration_s
            )));
        }
        if !(self.noise_len_s > 0.0) {
            return Err(PvadError::Config("noise_len_s must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecording {
    pub name: String,
    pub kind: Option<NoiseKind>,
    pub audio: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub speakers: Vec<SpeakerSpec>,
    /// Grouped by speaker, in speaker order.
    pub utterances: Vec<Utterance>,
    pub noise: Vec<NoiseRecording>,
}

pub fn speaker_name(i: usize) -> String {
    format!("spk{i:03}")
}

impl Corpus {
    /// Every utterance draws its own stream from `(seed, index)`.
    pub fn synthesize(cfg: &CorpusConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let synth = Synthesizer {
            sample_rate: cfg.sample_rate,
            ..Synthesizer::default()
        };
        let speakers: Vec<SpeakerSpec> = (0..cfg.n_speakers)
            .map(|i| SpeakerSpec::sample_stratified(speaker_name(i), seed, i, cfg.n_speakers))
            .collect();
        let mut utterances = Vec::with_capacity(cfg.n_speakers * cfg.utts_per_speaker);
        for (si, spk) in speakers.iter().enumerate() {
            for j in 0..cfg.utts_per_speaker {
                let idx = (si * cfg.utts_per_speaker + j) as u64;
                let utt_seed = rng::derive_seed(seed, "utterance", idx);
                let mut r = rng::stream(utt_seed, "duration", 0);
                let dur = if cfg.max_duration_s > cfg.min_duration_s {
                    r.gen_range(cfg.min_duration_s..cfg.max_duration_s)
                } else {
                    cfg.min_duration_s
                };
                utterances.push(synth.utterance(spk, format!("{}_u{j:03}", spk.id), dur, utt_seed)?);
            }
        }
        Ok(Self {
            speakers,
            utterances,
            noise: noise_bank(cfg, seed),
        })
    }

    pub fn by_speaker(&self, speaker_id: &str) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.speaker_id.as_deref() == Some(speaker_id))
            .collect()
    }

    pub fn noise_of(&self, kinds: &[NoiseKind]) -> Vec<Waveform> {
        self.noise
            .iter()
            .filter(|n| n.kind.is_some_and(|k| kinds.contains(&k)))
            .map(|n| n.audio.clone())
            .collect()
    }
}

pub fn noise_bank(cfg: &CorpusConfig, seed: u64) -> Vec<NoiseRecording> {
    let len = (cfg.noise_len_s * f64::from(cfg.sample_rate)).round() as usize;
    NoiseKind::TRAIN
        .iter()
        .chain(NoiseKind::HELD_OUT.iter())
        .flat_map(|&kind| {
            (0..cfg.noise_per_kind).map(move |i| NoiseRecording {
                name: format!("{}_{i}", kind.name()),
                kind: Some(kind),
                audio: generate_noise(kind, len, cfg.sample_rate, rng::derive_seed(seed, kind.name(), i as u64)),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub speaker_id: Option<String>,
    pub wav_path: PathBuf,
    pub labels_path: PathBuf,
    pub duration_s: f64,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const NOISE_DIR: &str = "noise";

/// Writes `wav/`, `labels/`, `noise/` and `manifest.jsonl` under `dir`.
/// Paths in the manifest are relative to `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    for sub in ["wav", "labels", NOISE_DIR] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    for u in &corpus.utterances {
        let rec = ManifestRecord {
            utterance_id: u.utterance_id.clone(),
            speaker_id: u.speaker_id.clone(),
            wav_path: PathBuf::from("wav").join(format!("{}.wav", u.utterance_id)),
            labels_path: PathBuf::from("labels").join(format!("{}.json", u.utterance_id)),
            duration_s: u.audio.duration_s(),
        };
        write_wav(&dir.join(&rec.wav_path), &u.audio)?;
        fs::write(dir.join(&rec.labels_path), serde_json::to_vec(&u.vad_labels)?)?;
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    for n in &corpus.noise {
        write_wav(&dir.join(NOISE_DIR).join(format!("{}.wav", n.name)), &n.audio)?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PvadError::Malformed {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Loads utterances listed in `dir/manifest.jsonl`. Audio is re-quantized
/// to 16 bits, so it differs slightly from the synthesized originals.
pub fn read_corpus_utterances(dir: &Path, framing: Framing) -> Result<Vec<Utterance>> {
    read_manifest(&dir.join(MANIFEST_FILE))?
        .into_iter()
        .map(|rec| {
            let audio = read_wav(&dir.join(&rec.wav_path))?;
            let labels_path = dir.join(&rec.labels_path);
            let labels: Vec<u8> = serde_json::from_slice(&fs::read(&labels_path)?)?;
            if labels.len() != framing.num_frames(audio.len()) || labels.iter().any(|&l| l > 1) {
                return Err(PvadError::Malformed {
                    path: labels_path,
                    reason: format!(
                        "{} labels for {} frames of audio",
                        labels.len(),
                        framing.num_frames(audio.len())
                    ),
                });
            }
            Ok(Utterance::from_labels(rec.utterance_id, rec.speaker_id, audio, labels, framing))
        })
        .collect()
}

/// Every WAV in `dir/noise`, sorted by file name.
pub fn read_noise_bank(dir: &Path) -> Result<Vec<NoiseRecording>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.join(NOISE_DIR))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let kind = NoiseKind::TRAIN
                .iter()
                .chain(NoiseKind::HELD_OUT.iter())
                .copied()
                .find(|k| name.split('_').next() == Some(k.name()));
            Ok(NoiseRecording {
                audio: read_wav(&p)?,
                name,
                kind,
            })
        })
        .collect()
}
