//! Background noise generation and SNR-controlled mixing.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::synth::{SpeakerSpec, Synthesizer};
use super::utterance::Utterance;
use crate::error::{PvadError, Result};
use crate::features::{Framing, Waveform};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    Brown,
    Hum,
    /// Many distant talkers.
    Crowd,
    /// Low rumble with intermittent clatter bursts.
    Station,
}

impl NoiseKind {
    pub const TRAIN: [NoiseKind; 4] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Brown, NoiseKind::Hum];
    pub const HELD_OUT: [NoiseKind; 2] = [NoiseKind::Crowd, NoiseKind::Station];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Brown => "brown",
            NoiseKind::Hum => "hum",
            NoiseKind::Crowd => "crowd",
            NoiseKind::Station => "station",
        }
    }
}

fn normalize_rms(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.1 / rms);
    }
    x
}

/// Generates `len` samples of the given noise type at RMS 0.1.
pub fn generate_noise(kind: NoiseKind, len: usize, sample_rate: u32, seed: u64) -> Waveform {
    let mut r = rng::stream(seed, kind.name(), 0);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let sr = f64::from(sample_rate);
    let two_pi = 2.0 * std::f64::consts::PI;
    let samples = match kind {
        NoiseKind::White => (0..len).map(|_| gauss.sample(&mut r)).collect(),
        NoiseKind::Pink => {
            // Kellet's economy pink filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w = gauss.sample(&mut r);
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Brown => {
            let mut acc = 0.0;
            (0..len)
                .map(|_| {
                    acc = 0.998 * acc + 0.05 * gauss.sample(&mut r);
                    acc
                })
                .collect()
        }
        NoiseKind::Hum => {
            let base = if r.gen_bool(0.5) { 50.0 } else { 60.0 };
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    (1..=6)
                        .map(|k| (two_pi * base * k as f64 * t).sin() / k as f64)
                        .sum::<f64>()
                        + 0.2 * gauss.sample(&mut r)
                })
                .collect()
        }
        NoiseKind::Crowd => {
            let synth = Synthesizer {
                sample_rate,
                ..Synthesizer::default()
            };
            let mut mix = vec![0.0; len];
            for talker in 0..8u64 {
                let spk = SpeakerSpec::sample(format!("crowd{talker}"), rng::derive_seed(seed, "crowd-spk", talker));
                let mut pos = r.gen_range(0..(sr * 0.5) as usize);
                let mut k = 0;
                while pos < len {
                    let dur = r.gen_range(0.6..1.5);
                    let Ok(u) = synth.utterance(&spk, "crowd", dur, rng::derive_seed(seed, "crowd-utt", talker * 1000 + k)) else {
                        break;
                    };
                    for (d, s) in mix[pos..].iter_mut().zip(&u.audio.samples) {
                        *d += s;
                    }
                    pos += u.audio.len() / 2;
                    k += 1;
                }
            }
            mix.iter_mut().for_each(|v| *v += 0.02 * gauss.sample(&mut r));
            mix
        }
        NoiseKind::Station => {
            let mut low = 0.0;
            let mut burst = 0.0f64;
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    low = 0.995 * low + 0.1 * gauss.sample(&mut r);
                    if r.gen_bool(2.0 / sr) {
                        burst = 1.0;
                    }
                    burst *= 0.9995;
                    let rumble = low * (1.0 + 0.5 * (two_pi * 0.7 * t).sin());
                    rumble + burst * 3.0 * gauss.sample(&mut r) + 0.3 * (two_pi * 120.0 * t).sin()
                })
                .collect()
        }
    };
    Waveform {
        samples: normalize_rms(samples),
        sample_rate,
    }
}

/// Sample mask of frames labeled speech (union of their windows).
pub fn speech_sample_mask(n_samples: usize, labels: &[u8], framing: Framing) -> Vec<bool> {
    let mut mask = vec![false; n_samples];
    for (t, &s) in labels.iter().enumerate() {
        if s == 1 {
            let (lo, hi) = framing.frame_span(t);
            mask[lo..hi.min(n_samples)].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

/// Mean power over speech-frame samples.
pub fn speech_power(u: &Utterance, framing: Framing) -> Result<f64> {
    let mask = speech_sample_mask(u.audio.len(), &u.vad_labels, framing);
    let (sum, n) = u
        .audio
        .samples
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v * v, n + 1));
    if n == 0 {
        return Err(PvadError::SnrUndefined);
    }
    Ok(sum / n as f64)
}

/// Adds `noise` so that speech power over noise power equals `snr_db`.
/// `f64::INFINITY` returns the input unchanged. Noise shorter than the
/// utterance is tiled from a random offset.
pub fn mix_noise(
    u: &Utterance,
    noise: &Waveform,
    snr_db: f64,
    rng_seed: u64,
    framing: Framing,
) -> Result<Utterance> {
    if snr_db == f64::INFINITY {
        return Ok(u.clone());
    }
    if !snr_db.is_finite() {
        return Err(PvadError::invalid(format!("SNR {snr_db} dB")));
    }
    if noise.sample_rate != u.audio.sample_rate {
        return Err(PvadError::invalid("noise sample rate differs from utterance"));
    }
    if noise.is_empty() {
        return Err(PvadError::invalid("empty noise waveform"));
    }
    let p_speech = speech_power(u, framing)?;
    let n = u.audio.len();
    let mut r = rng::stream(rng_seed, "mix", 0);
    let offset = if noise.len() > n {
        r.gen_range(0..=noise.len() - n)
    } else {
        r.gen_range(0..noise.len())
    };
    let segment: Vec<f64> = (0..n)
        .map(|i| noise.samples[(offset + i) % noise.len()])
        .collect();
    let p_noise = segment.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if p_noise <= 0.0 {
        return Err(PvadError::invalid("noise segment has zero power"));
    }
    let gain = (p_speech / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut clipped = 0usize;
    let samples = u
        .audio
        .samples
        .iter()
        .zip(&segment)
        .map(|(s, v)| {
            let x = s + gain * v;
            if x.abs() > 1.0 {
                clipped += 1;
                x.clamp(-1.0, 1.0)
            } else {
                x
            }
        })
        .collect();
    if clipped > 0 {
        log::warn!(
            "clipped {clipped} samples mixing noise into {} at {snr_db} dB",
            u.utterance_id
        );
    }
    Ok(Utterance {
        audio: Waveform {
            samples,
            sample_rate: u.audio.sample_rate,
        },
        ..u.clone()
    })
}
