//! Synthetic speakers: a harmonic voice source shaped by speaker-specific
//! formant resonances. Speaker identity lives in F0, formant placement and
//! spectral tilt; each utterance draws its own vowel sequence, intonation
//! and loudness contour, so two utterances of one speaker are similar but
//! never identical.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::utterance::Utterance;
use crate::error::{PvadError, Result};
use crate::features::{Framing, Waveform, DEFAULT_SAMPLE_RATE};
use crate::rng;

pub const MIN_DURATION_S: f64 = 0.5;
const PEAK: f64 = 0.5;
const MAX_HARMONICS: usize = 64;
const BLOCK: usize = 64;
const VOICE_DIMS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub id: String,
    pub seed: u64,
    pub fundamental_freq_hz: f64,
    /// Relative amplitude of harmonic k+1.
    pub harmonic_profile: Vec<f64>,
    pub formant_centers_hz: Vec<f64>,
    pub formant_bandwidths_hz: Vec<f64>,
}

const BASE_FORMANTS: [f64; 4] = [550.0, 1500.0, 2500.0, 3500.0];
const BASE_BANDWIDTHS: [f64; 4] = [90.0, 120.0, 160.0, 220.0];
const FORMANT_GAINS: [f64; 4] = [1.0, 0.6, 0.35, 0.2];

/// F1/F2 multipliers for a small vowel inventory.
const VOWELS: [(f64, f64); 6] = [
    (1.35, 0.85),
    (0.55, 1.45),
    (0.6, 0.6),
    (0.85, 1.25),
    (0.95, 0.65),
    (1.1, 1.05),
];

impl SpeakerSpec {
    pub fn sample(id: impl Into<String>, seed: u64) -> Self {
        let mut r = rng::stream(seed, "speaker", 0);
        let u: [f64; VOICE_DIMS] = std::array::from_fn(|_| r.gen());
        Self::from_unit(id, seed, u, &mut r)
    }

    /// Speaker `index` of `count`, with the voice parameters drawn from a
    /// Latin hypercube so a corpus covers the voice space evenly.
    pub fn sample_stratified(id: impl Into<String>, seed: u64, index: usize, count: usize) -> Self {
        assert!(index < count, "speaker index {index} out of {count}");
        let mut r = rng::stream(seed, "speaker", index as u64);
        let u: [f64; VOICE_DIMS] = std::array::from_fn(|d| {
            let mut order: Vec<usize> = (0..count).collect();
            order.shuffle(&mut rng::stream(seed, "voice-strata", d as u64));
            (order[index] as f64 + r.gen::<f64>()) / count as f64
        });
        Self::from_unit(id, rng::derive_seed(seed, "speaker", index as u64), u, &mut r)
    }

    /// Maps unit coordinates to F0, three formant scales (F1, F2, upper),
    /// spectral tilt and bandwidth scale.
    fn from_unit(id: impl Into<String>, seed: u64, u: [f64; VOICE_DIMS], r: &mut rng::Rng) -> Self {
        let lerp = |lo: f64, hi: f64, t: f64| lo + (hi - lo) * t;
        let f0 = lerp(80f64.ln(), 280f64.ln(), u[0]).exp();
        let scales = [lerp(0.78, 1.28, u[1]), lerp(0.78, 1.28, u[2]), lerp(0.85, 1.2, u[3])];
        let tilt = lerp(0.4, 1.6, u[4]);
        let bw_scale = lerp(0.75, 1.4, u[5]);
        let formant_centers_hz: Vec<f64> = BASE_FORMANTS
            .iter()
            .enumerate()
            .map(|(i, f)| f * scales[i.min(2)] * r.gen_range(0.97..1.03))
            .collect();
        let formant_bandwidths_hz: Vec<f64> = BASE_BANDWIDTHS
            .iter()
            .map(|b| b * bw_scale * r.gen_range(0.9..1.1))
            .collect();
        let harmonic_profile = (1..=MAX_HARMONICS)
            .map(|k| {
                let ripple = if k <= 12 { r.gen_range(0.6..1.4) } else { 1.0 };
                ripple / (k as f64).powf(tilt)
            })
            .collect();
        Self {
            id: id.into(),
            seed,
            fundamental_freq_hz: f0,
            harmonic_profile,
            formant_centers_hz,
            formant_bandwidths_hz,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = f64::from(sample_rate) / 2.0;
        let in_range = |f: &f64| *f > 0.0 && *f < nyquist;
        if !in_range(&self.fundamental_freq_hz)
            || !self.formant_centers_hz.iter().all(in_range)
            || !self.formant_bandwidths_hz.iter().all(|b| *b > 0.0)
            || self.harmonic_profile.iter().any(|a| *a < 0.0)
            || self.formant_centers_hz.len() != self.formant_bandwidths_hz.len()
        {
            return Err(PvadError::invalid(format!(
                "speaker `{}` has out-of-range parameters",
                self.id
            )));
        }
        Ok(())
    }

    fn formant_gain(&self, f: f64, f1_mul: f64, f2_mul: f64, upper_mul: f64) -> f64 {
        let mut g = 0.01;
        for (i, (&c, &bw)) in self
            .formant_centers_hz
            .iter()
            .zip(&self.formant_bandwidths_hz)
            .enumerate()
        {
            let center = c * match i {
                0 => f1_mul,
                1 => f2_mul,
                _ => upper_mul,
            };
            let x = (f - center) / (bw / 2.0);
            g += FORMANT_GAINS.get(i).copied().unwrap_or(0.1) / (1.0 + x * x);
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Synthesizer {
    pub sample_rate: u32,
    pub framing: Framing,
}

impl Default for Synthesizer {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            framing: Framing { win: 320, hop: 160 },
        }
    }
}

/// Piecewise-linear interpolation over `(position, value)` knots.
fn interp(knots: &[(f64, f64)], x: f64) -> f64 {
    match knots.iter().position(|&(p, _)| p >= x) {
        None => knots.last().map_or(0.0, |k| k.1),
        Some(0) => knots[0].1,
        Some(i) => {
            let (x0, y0) = knots[i - 1];
            let (x1, y1) = knots[i];
            if x1 <= x0 {
                y1
            } else {
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }
}

impl Synthesizer {
    /// `duration_s` is the voiced length; 0.1–0.4 s of silence is added on
    /// each side.
    pub fn utterance(
        &self,
        spk: &SpeakerSpec,
        utterance_id: impl Into<String>,
        duration_s: f64,
        rng_seed: u64,
    ) -> Result<Utterance> {
        if !(duration_s >= MIN_DURATION_S) {
            return Err(PvadError::invalid(format!(
                "utterance duration {duration_s} s is below {MIN_DURATION_S} s"
            )));
        }
        spk.validate(self.sample_rate)?;
        let sr = f64::from(self.sample_rate);
        let mut r = rng::stream(rng_seed, "utterance", 0);
        let lead = (r.gen_range(0.1..0.4) * sr).round() as usize;
        let trail = (r.gen_range(0.1..0.4) * sr).round() as usize;
        let voiced = (duration_s * sr).round() as usize;
        let total = lead + voiced + trail;

        // syllable plan: vowel targets at syllable centres
        let mut f1_knots = Vec::new();
        let mut f2_knots = Vec::new();
        let mut up_knots = Vec::new();
        let mut amp_knots = vec![(0.0, 0.3)];
        let mut f0_knots = Vec::new();
        let mut pos = 0.0;
        let declination = r.gen_range(0.05..0.15);
        while pos < duration_s {
            let len = r.gen_range(0.12..0.26);
            let centre = (pos + len / 2.0).min(duration_s);
            let (v1, v2) = VOWELS[r.gen_range(0..VOWELS.len())];
            f1_knots.push((centre, v1 * r.gen_range(0.92..1.08)));
            f2_knots.push((centre, v2 * r.gen_range(0.92..1.08)));
            up_knots.push((centre, r.gen_range(0.96..1.04)));
            amp_knots.push((centre, r.gen_range(0.7..1.0)));
            amp_knots.push(((pos + len).min(duration_s), r.gen_range(0.3..0.55)));
            let accent = r.gen_range(-0.06..0.08);
            let drift = declination * (0.5 - centre / duration_s);
            f0_knots.push((centre, 1.0 + drift + accent));
            pos += len;
        }
        let vib_rate = r.gen_range(3.0..6.0);
        let vib_depth = r.gen_range(0.005..0.02);
        let breath = r.gen_range(0.01..0.03);
        let noise = Normal::new(0.0, 1.0).expect("unit normal");

        let mut samples = vec![0.0; total];
        let mut phase = 0.0f64;
        let nyquist = sr / 2.0;
        let ramp = (0.01 * sr) as usize;
        let mut amps = [0.0f64; MAX_HARMONICS];
        let mut n_harm = 0;
        for i in 0..voiced {
            let t = i as f64 / sr;
            let f0 = spk.fundamental_freq_hz
                * interp(&f0_knots, t)
                * (1.0 + vib_depth * (2.0 * std::f64::consts::PI * vib_rate * t).sin());
            if i % BLOCK == 0 {
                let (m1, m2, mu) = (interp(&f1_knots, t), interp(&f2_knots, t), interp(&up_knots, t));
                n_harm = ((0.9 * nyquist / f0) as usize).min(MAX_HARMONICS);
                for k in 0..n_harm {
                    let f = f0 * (k + 1) as f64;
                    amps[k] = spk.harmonic_profile[k] * spk.formant_gain(f, m1, m2, mu);
                }
            }
            phase = (phase + 2.0 * std::f64::consts::PI * f0 / sr) % (2.0 * std::f64::consts::PI);
            // sin(kφ) by the Chebyshev recurrence
            let (s1, c1) = phase.sin_cos();
            let (mut prev, mut cur) = (0.0, s1);
            let mut acc = 0.0;
            for amp in amps.iter().take(n_harm) {
                acc += amp * cur;
                let next = 2.0 * c1 * cur - prev;
                prev = cur;
                cur = next;
            }
            let env_edge = (i.min(voiced - 1 - i) as f64 / ramp as f64).min(1.0);
            let env = interp(&amp_knots, t) * env_edge;
            samples[lead + i] = env * (acc + breath * noise.sample(&mut r));
        }
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            samples.iter_mut().for_each(|v| *v *= PEAK / peak);
        }
        // recording noise floor, far below speech
        for v in samples.iter_mut() {
            *v += 3e-5 * noise.sample(&mut r);
        }
        let audio = Waveform::new(samples, self.sample_rate)?;
        Ok(Utterance::from_spans(
            utterance_id,
            Some(spk.id.clone()),
            audio,
            vec![(lead, lead + voiced)],
            self.framing,
        ))
    }
}

/// Default-rate synthesis (16 kHz, 20 ms / 10 ms framing).
pub fn synth_utterance(spk: &SpeakerSpec, duration_s: f64, rng_seed: u64) -> Result<Utterance> {
    Synthesizer::default().utterance(spk, format!("{}-{rng_seed:x}", spk.id), duration_s, rng_seed)
}
