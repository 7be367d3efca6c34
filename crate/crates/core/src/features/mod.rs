//! Acoustic front end: Hamming-windowed framing, log mel filterbank energies,
//! delta/acceleration coefficients and left-right context stacking.

mod export;
mod wav;

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{PvadError, Result};

pub use export::{read_feature_matrix, write_feature_matrix, FeatureSidecar};
pub use wav::{read_wav, write_wav};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(PvadError::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(PvadError::invalid("waveform contains non-finite samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Static,
    WithDeltas,
    Stacked { context: usize },
}

/// `T × D` feature matrix with its framing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub values: Array2<f64>,
    pub layout: Layout,
    pub n_mels: usize,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
}

impl FeatureSequence {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }
}

/// Framing in samples for a given sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Framing {
    pub win: usize,
    pub hop: usize,
}

impl Framing {
    pub fn from_ms(sample_rate: u32, win_ms: f64, hop_ms: f64) -> Result<Self> {
        if !(hop_ms > 0.0 && win_ms >= hop_ms) {
            return Err(PvadError::invalid(format!(
                "need win_ms >= hop_ms > 0, got win {win_ms} hop {hop_ms}"
            )));
        }
        let sr = f64::from(sample_rate);
        Ok(Self {
            win: (win_ms * sr / 1000.0).round() as usize,
            hop: (hop_ms * sr / 1000.0).round() as usize,
        })
    }

    /// `floor((n - win) / hop) + 1`, or 0 when the signal is shorter than a window.
    pub fn num_frames(&self, n: usize) -> usize {
        if n < self.win {
            0
        } else {
            (n - self.win) / self.hop + 1
        }
    }

    pub fn frame_span(&self, t: usize) -> (usize, usize) {
        (t * self.hop, t * self.hop + self.win)
    }
}

/// `0.54 - 0.46 cos(2πn / (L-1))`.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub frames: Array2<f64>,
    pub framing: Framing,
    pub sample_rate: u32,
}

pub fn frame_signal(w: &Waveform, win_ms: f64, hop_ms: f64) -> Result<Frames> {
    let framing = Framing::from_ms(w.sample_rate, win_ms, hop_ms)?;
    if w.len() < framing.win {
        return Err(PvadError::InputTooShort {
            got: w.len(),
            need: framing.win,
        });
    }
    let window = hamming(framing.win);
    let t_len = framing.num_frames(w.len());
    let mut frames = Array2::zeros((t_len, framing.win));
    for (t, mut row) in frames.rows_mut().into_iter().enumerate() {
        let start = t * framing.hop;
        for (n, v) in row.iter_mut().enumerate() {
            *v = w.samples[start + n] * window[n];
        }
    }
    Ok(Frames {
        frames,
        framing,
        sample_rate: w.sample_rate,
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale between 0 Hz and Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `n_mels × (n_fft/2 + 1)`.
    pub weights: Array2<f64>,
    pub n_fft: usize,
    /// `n_mels + 2` edge frequencies in Hz; band `m` peaks at `edges[m + 1]`.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Result<Self> {
        if n_mels == 0 {
            return Err(PvadError::invalid("n_mels must be at least 1"));
        }
        let nyquist = f64::from(sample_rate) / 2.0;
        let top = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = f64::from(sample_rate) / n_fft as f64;
        let mut weights = Array2::zeros((n_mels, n_bins));
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[[m, k]] = w;
            }
        }
        Ok(Self {
            weights,
            n_fft,
            edges_hz,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.edges_hz[band + 1]
    }
}

pub const LOG_FLOOR: f64 = 1e-10;

/// Power spectrum (zero-padded FFT), mel filterbank, `ln(max(E, floor))`.
pub struct LogMel {
    pub filterbank: MelFilterbank,
    pub floor: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel")
            .field("n_mels", &self.filterbank.n_mels())
            .field("n_fft", &self.filterbank.n_fft)
            .field("floor", &self.floor)
            .finish()
    }
}

impl LogMel {
    pub fn new(n_mels: usize, win: usize, sample_rate: u32, floor: f64) -> Result<Self> {
        let n_fft = win.next_power_of_two();
        let filterbank = MelFilterbank::new(n_mels, n_fft, sample_rate)?;
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            filterbank,
            floor,
            fft,
        })
    }

    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let n_fft = self.filterbank.n_fft;
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(n_fft)
            .collect();
        self.fft.process(&mut buf);
        buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn apply(&self, frames: &Frames, frame_length_ms: f64, frame_shift_ms: f64) -> FeatureSequence {
        let m = self.filterbank.n_mels();
        let mut values = Array2::zeros((frames.frames.nrows(), m));
        for (row, mut out) in frames.frames.rows().into_iter().zip(values.rows_mut()) {
            let frame = row.to_vec();
            let power = ndarray::Array1::from_vec(self.power_spectrum(&frame));
            let energies = self.filterbank.weights.dot(&power);
            for (o, e) in out.iter_mut().zip(energies.iter()) {
                *o = e.max(self.floor).ln();
            }
        }
        FeatureSequence {
            values,
            layout: Layout::Static,
            n_mels: m,
            frame_shift_ms,
            frame_length_ms,
        }
    }
}

pub const DELTA_WINDOW: usize = 2;

fn regression_deltas(x: ArrayView2<f64>, window: usize) -> Array2<f64> {
    let t_len = x.nrows();
    let denom = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Array2::zeros(x.raw_dim());
    let last = t_len as isize - 1;
    for t in 0..t_len {
        let mut row = out.row_mut(t);
        for n in 1..=window {
            let fwd = (t as isize + n as isize).min(last) as usize;
            let bwd = (t as isize - n as isize).max(0) as usize;
            row.scaled_add(n as f64 / denom, &(&x.row(fwd) - &x.row(bwd)));
        }
    }
    out
}

/// Appends Δ and ΔΔ (regression window 2, edge frames replicated):
/// `[static, Δ, ΔΔ]`.
pub fn add_deltas(f: &FeatureSequence) -> Result<FeatureSequence> {
    if f.layout != Layout::Static {
        return Err(PvadError::invalid(format!(
            "add_deltas expects static features, got {:?}",
            f.layout
        )));
    }
    let d1 = regression_deltas(f.values.view(), DELTA_WINDOW);
    let d2 = regression_deltas(d1.view(), DELTA_WINDOW);
    let values = ndarray::concatenate(Axis(1), &[f.values.view(), d1.view(), d2.view()])
        .expect("equal row counts");
    Ok(FeatureSequence {
        values,
        layout: Layout::WithDeltas,
        ..f.clone()
    })
}

/// Replaces frame `t` with frames `t-c ..= t+c` concatenated, edges replicated.
pub fn stack_context(f: &FeatureSequence, context: usize) -> Result<FeatureSequence> {
    if f.layout != Layout::WithDeltas {
        return Err(PvadError::invalid(format!(
            "stack_context expects delta features, got {:?}",
            f.layout
        )));
    }
    let t_len = f.frames();
    let d = f.dim();
    let width = 2 * context + 1;
    let mut values = Array2::zeros((t_len, width * d));
    let last = t_len as isize - 1;
    for t in 0..t_len {
        for (slot, off) in (-(context as isize)..=context as isize).enumerate() {
            let src = (t as isize + off).clamp(0, last) as usize;
            values
                .slice_mut(s![t, slot * d..(slot + 1) * d])
                .assign(&f.values.row(src));
        }
    }
    Ok(FeatureSequence {
        values,
        layout: Layout::Stacked { context },
        ..f.clone()
    })
}

/// Per-utterance mean/variance normalization (off by default).
pub fn normalize_utterance(f: &mut FeatureSequence) {
    let mean = f.values.mean_axis(Axis(0)).expect("T >= 1");
    let std = f.values.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-8));
    f.values -= &mean;
    f.values /= &std;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub context: usize,
    pub log_floor: f64,
    pub utterance_cmvn: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            win_ms: 20.0,
            hop_ms: 10.0,
            n_mels: 40,
            context: 3,
            log_floor: LOG_FLOOR,
            utterance_cmvn: false,
        }
    }
}

impl FeatureConfig {
    pub fn framing(&self) -> Framing {
        Framing::from_ms(self.sample_rate, self.win_ms, self.hop_ms).expect("validated config")
    }

    /// Width of the context-stacked model input, `(2c + 1) · 3M`.
    pub fn stacked_dim(&self) -> usize {
        (2 * self.context + 1) * 3 * self.n_mels
    }

    pub fn validate(&self) -> Result<()> {
        Framing::from_ms(self.sample_rate, self.win_ms, self.hop_ms)
            .map_err(|e| PvadError::Config(e.to_string()))?;
        if self.n_mels == 0 {
            return Err(PvadError::Config("n_mels must be at least 1".into()));
        }
        Ok(())
    }
}

/// The full front end with a cached FFT plan and filterbank.
#[derive(Debug)]
pub struct FeatureExtractor {
    pub config: FeatureConfig,
    log_mel: LogMel,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let framing = config.framing();
        let log_mel = LogMel::new(config.n_mels, framing.win, config.sample_rate, config.log_floor)?;
        Ok(Self { config, log_mel })
    }

    pub fn framing(&self) -> Framing {
        self.config.framing()
    }

    pub fn static_features(&self, w: &Waveform) -> Result<FeatureSequence> {
        if w.sample_rate != self.config.sample_rate {
            return Err(PvadError::invalid(format!(
                "sample rate {} does not match feature config {}",
                w.sample_rate, self.config.sample_rate
            )));
        }
        let frames = frame_signal(w, self.config.win_ms, self.config.hop_ms)?;
        let mut f = self.log_mel.apply(&frames, self.config.win_ms, self.config.hop_ms);
        if self.config.utterance_cmvn {
            normalize_utterance(&mut f);
        }
        Ok(f)
    }

    /// Static features → deltas → context stacking.
    pub fn finish(&self, static_feats: &FeatureSequence) -> Result<FeatureSequence> {
        stack_context(&add_deltas(static_feats)?, self.config.context)
    }

    pub fn extract(&self, w: &Waveform) -> Result<FeatureSequence> {
        self.finish(&self.static_features(w)?)
    }
}
