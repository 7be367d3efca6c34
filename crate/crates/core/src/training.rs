//! Trainers for the standard VAD and the four PVAD regimes (enroll-full or
//! enroll-less, with or without enrollment augmentation).

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_embedding, AugConfig};
use crate::corpus::{ExampleBuilder, NoisePlan, TrainingExample, Utterance, DEFAULT_GAP_RANGE_S};
use crate::error::{PvadError, Result};
use crate::features::{FeatureExtractor, Waveform};
use crate::nn::{Adam, AdamConfig, Gradients, Mode, ParamSet, DEFAULT_CLIP_NORM};
use crate::pvad::{ModelConfig, PvadModel};
use crate::rng::{self, Rng};
use crate::schedule::{EarlyStopping, EpochRecord, Verdict};
use crate::speaker::SpeakerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Vad,
    EnrollFull,
    EnrollLess,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Vad => "vad",
            Regime::EnrollFull => "enroll-full",
            Regime::EnrollLess => "enroll-less",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Regime {
    type Err = PvadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vad" => Ok(Regime::Vad),
            "enroll-full" => Ok(Regime::EnrollFull),
            "enroll-less" => Ok(Regime::EnrollLess),
            _ => Err(PvadError::Config(format!("unknown regime `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Probability that a training example is mixed with noise.
    pub prob: f64,
    pub snr_range_db: (f64, f64),
    /// Also corrupt the conditioning copy.
    pub noisy_conditioning: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            prob: 0.5,
            snr_range_db: (5.0, 30.0),
            noisy_conditioning: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub model: ModelConfig,
    pub aug: AugConfig,
    pub noise: NoiseConfig,
    pub gap_range_s: (f64, f64),
    /// Enroll-full inputs get 0..=max_distractors non-target utterances.
    pub max_distractors: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 0.001,
            max_epochs: 100,
            patience: 5,
            model: ModelConfig::default(),
            aug: AugConfig::default(),
            noise: NoiseConfig::default(),
            gap_range_s: DEFAULT_GAP_RANGE_S,
            max_distractors: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(PvadError::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(PvadError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.model.hidden == 0 || self.model.layers == 0 || !(0.0..1.0).contains(&self.model.dropout) {
            return Err(PvadError::Config("bad model config".into()));
        }
        if !(0.0..=1.0).contains(&self.noise.prob) || self.noise.snr_range_db.0 > self.noise.snr_range_db.1 {
            return Err(PvadError::Config("bad noise config".into()));
        }
        if self.max_distractors > 2 {
            return Err(PvadError::Config("at most 2 distractors (inputs hold 1 to 3 utterances)".into()));
        }
        self.aug.validate()
    }
}

/// Utterance pools for one training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [&'a Utterance],
    pub val: &'a [&'a Utterance],
    /// Noise bank for training-time mixing.
    pub noise: &'a [Waveform],
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub regime: Regime,
    pub aug: bool,
    pub model: PvadModel,
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ParamSet,
    pub history: Vec<EpochRecord>,
    pub initial_val_loss: f64,
    pub best_epoch: usize,
}

/// Shuffled example indices in full batches; the remainder is dropped.
pub fn epoch_loop(n_examples: usize, batch_size: usize, r: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n_examples {
        return Err(PvadError::invalid(format!(
            "batch size {batch_size} does not fit a dataset of {n_examples} examples"
        )));
    }
    let mut order: Vec<usize> = (0..n_examples).collect();
    order.shuffle(r);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// One example recipe: pool indices in input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Plan {
    Single(usize),
    /// Conditioned on `utts[target]` itself.
    EnrollLess { utts: Vec<usize>, target: usize },
    /// `targets[0]` is the anchor; the builder reserves one target as enrollment.
    EnrollFull { targets: [usize; 2], distractors: Vec<usize> },
}

/// One enroll-less plan per pool entry: the entry plus 0–2 random partners,
/// at a random position.
pub fn compose_enroll_less(pool: usize, r: &mut Rng) -> Vec<Plan> {
    (0..pool)
        .map(|anchor| {
            let k = r.gen_range(1..=3usize).min(pool);
            let mut utts: Vec<usize> = sample(r, pool - 1, k - 1)
                .into_iter()
                .map(|i| if i >= anchor { i + 1 } else { i })
                .collect();
            let target = r.gen_range(0..k);
            utts.insert(target, anchor);
            Plan::EnrollLess { utts, target }
        })
        .collect()
}

/// One enroll-full plan per pool entry: the entry, another utterance of its
/// speaker, and 0..=max_distractors utterances of other speakers.
fn compose_enroll_full(speakers: &[usize], max_distractors: usize, r: &mut Rng) -> Vec<Plan> {
    let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in speakers.iter().enumerate() {
        by_speaker.entry(s).or_default().push(i);
    }
    (0..speakers.len())
        .map(|anchor| {
            let own = &by_speaker[&speakers[anchor]];
            let mate = loop {
                let c = own[r.gen_range(0..own.len())];
                if c != anchor {
                    break c;
                }
            };
            let others: Vec<usize> = (0..speakers.len()).filter(|&i| speakers[i] != speakers[anchor]).collect();
            let n = r.gen_range(0..=max_distractors).min(others.len());
            let distractors = sample(r, others.len(), n).into_iter().map(|i| others[i]).collect();
            Plan::EnrollFull {
                targets: [anchor, mate],
                distractors,
            }
        })
        .collect()
}

/// Dense speaker indices; errors unless every utterance is labeled and
/// every speaker has at least two utterances.
fn speaker_indices(utts: &[&Utterance], need_others: bool) -> Result<Vec<usize>> {
    let mut names: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(utts.len());
    for u in utts {
        let s = u.speaker_id.as_deref().ok_or_else(|| {
            PvadError::invalid(format!("enroll-full training needs speaker labels ({} has none)", u.utterance_id))
        })?;
        let n = names.len();
        out.push(*names.entry(s).or_insert(n));
    }
    let mut counts = vec![0usize; names.len()];
    for &s in &out {
        counts[s] += 1;
    }
    if counts.iter().any(|&c| c < 2) {
        return Err(PvadError::invalid("enroll-full training needs at least 2 utterances per speaker"));
    }
    if need_others && names.len() < 2 {
        return Err(PvadError::invalid("enroll-full distractors need at least 2 speakers"));
    }
    Ok(out)
}

struct Trainer<'a> {
    regime: Regime,
    aug: bool,
    cfg: &'a TrainConfig,
    speaker: Option<&'a SpeakerModel>,
    builder: ExampleBuilder<'a>,
    extractor: &'a FeatureExtractor,
    /// Unaugmented embeddings by utterance id (clean conditioning only).
    cache: HashMap<String, Array1<f64>>,
}

impl Trainer<'_> {
    fn compose(&self, pool: &[&Utterance], speakers: &[usize], r: &mut Rng) -> Vec<Plan> {
        match self.regime {
            Regime::Vad => (0..pool.len()).map(Plan::Single).collect(),
            Regime::EnrollLess => compose_enroll_less(pool.len(), r),
            Regime::EnrollFull => compose_enroll_full(speakers, self.cfg.max_distractors, r),
        }
    }

    fn build(&self, pool: &[&Utterance], plan: &Plan, seed: u64) -> Result<TrainingExample> {
        match plan {
            Plan::Single(i) => self.builder.build_enroll_less_example(&[pool[*i]], 0, seed),
            Plan::EnrollLess { utts, target } => {
                let us: Vec<&Utterance> = utts.iter().map(|&i| pool[i]).collect();
                self.builder.build_enroll_less_example(&us, *target, seed)
            }
            Plan::EnrollFull { targets, distractors } => {
                let t: Vec<&Utterance> = targets.iter().map(|&i| pool[i]).collect();
                let d: Vec<&Utterance> = distractors.iter().map(|&i| pool[i]).collect();
                self.builder.build_enroll_full_example(&t, &d, seed)
            }
        }
    }

    /// Conditioning embedding; `None` for the standard VAD.
    fn embedding(&mut self, ex: &TrainingExample, r: &mut Rng) -> Result<Option<Array1<f64>>> {
        let Some(speaker) = self.speaker else {
            return Ok(None);
        };
        let feats = &ex.conditioning.features;
        if self.aug {
            return augment_embedding(feats, speaker, self.extractor, &self.cfg.aug, Mode::Train, r).map(Some);
        }
        if self.cfg.noise.noisy_conditioning {
            return speaker.encode(&self.extractor.finish(feats)?).map(Some);
        }
        if let Some(e) = self.cache.get(&ex.conditioning.utterance_id) {
            return Ok(Some(e.clone()));
        }
        let e = speaker.encode(&self.extractor.finish(feats)?)?;
        self.cache.insert(ex.conditioning.utterance_id.clone(), e.clone());
        Ok(Some(e))
    }

    fn labels<'e>(&self, ex: &'e TrainingExample) -> &'e [u8] {
        if self.regime == Regime::Vad {
            &ex.vad_labels
        } else {
            &ex.pvad_labels
        }
    }
}

/// Example prepared for a loss evaluation.
struct Prepared {
    example: TrainingExample,
    embedding: Option<Array1<f64>>,
}

/// Frame-mean cross-entropy over all frames of `items`, accumulating
/// gradients of that mean when `grads` is given.
pub fn batch_loss<'a>(
    model: &PvadModel,
    params: &ParamSet,
    items: &[(ArrayView2<'a, f64>, Option<ArrayView1<'a, f64>>, &'a [u8])],
    mode: Mode,
    r: &mut Rng,
    mut grads: Option<&mut Gradients>,
) -> Result<f64> {
    let frames: usize = items.iter().map(|it| it.2.len()).sum();
    if frames == 0 {
        return Err(PvadError::EmptyDataset("batch has no frames".into()));
    }
    let w = 1.0 / frames as f64;
    let mut loss = 0.0;
    for (x, e, labels) in items {
        loss += model.accumulate_loss(params, *x, *e, labels, w, mode, r, grads.as_deref_mut())?;
    }
    if !loss.is_finite() {
        return Err(PvadError::Numeric("non-finite training loss".into()));
    }
    Ok(loss)
}

fn prepared_loss(
    trainer: &Trainer,
    model: &PvadModel,
    params: &ParamSet,
    items: &[Prepared],
    mode: Mode,
    r: &mut Rng,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let views: Vec<_> = items
        .iter()
        .map(|p| (p.example.input.view(), p.embedding.as_ref().map(|e| e.view()), trainer.labels(&p.example)))
        .collect();
    batch_loss(model, params, &views, mode, r, grads)
}

/// Trains one detector. `speaker` is required for the PVAD regimes and
/// ignored by the VAD. Enroll-less regimes never read speaker labels.
pub fn train(
    regime: Regime,
    aug: bool,
    data: TrainData,
    speaker: Option<&SpeakerModel>,
    extractor: &FeatureExtractor,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Trained> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(PvadError::EmptyDataset("training and validation pools must be non-empty".into()));
    }
    if regime == Regime::Vad && aug {
        return Err(PvadError::invalid("the standard VAD has no enrollment to augment"));
    }
    let speaker = match (regime, speaker) {
        (Regime::Vad, _) => None,
        (_, Some(s)) => Some(s),
        (_, None) => return Err(PvadError::invalid(format!("{regime} training needs a speaker model"))),
    };
    let (train_spk, val_spk) = if regime == Regime::EnrollFull {
        let need_others = cfg.max_distractors > 0;
        (speaker_indices(data.train, need_others)?, speaker_indices(data.val, need_others)?)
    } else {
        (vec![], vec![])
    };
    let noise = if data.noise.is_empty() || cfg.noise.prob == 0.0 {
        NoisePlan::Clean
    } else {
        NoisePlan::Random {
            bank: data.noise,
            prob: cfg.noise.prob,
            snr_range_db: cfg.noise.snr_range_db,
            noisy_conditioning: cfg.noise.noisy_conditioning,
        }
    };
    let builder = ExampleBuilder {
        gap_range_s: cfg.gap_range_s,
        ..ExampleBuilder::new(extractor).with_noise(noise)
    };
    let mut trainer = Trainer {
        regime,
        aug,
        cfg,
        speaker,
        builder,
        extractor,
        cache: HashMap::new(),
    };

    let embed_dim = speaker.map_or(0, SpeakerModel::embed_dim);
    let model = PvadModel::new(extractor.config.stacked_dim(), embed_dim, cfg.model);
    let mut params = ParamSet::new();
    model.init(&mut params, &mut rng::stream(seed, "model-init", 0));
    let norm_feats = data
        .train
        .iter()
        .map(|u| extractor.extract(&u.audio).map(|f| f.values))
        .collect::<Result<Vec<_>>>()?;
    model.fit_normalization(&mut params, norm_feats.iter().map(|f| f.view()))?;
    drop(norm_feats);

    // Fixed validation set, augmentation included.
    let mut vr = rng::stream(seed, "val-compose", 0);
    let val_plans = trainer.compose(data.val, &val_spk, &mut vr);
    let mut val = Vec::with_capacity(val_plans.len());
    for (i, plan) in val_plans.iter().enumerate() {
        let example = trainer.build(data.val, plan, rng::derive_seed(seed, "val-example", i as u64))?;
        let embedding = trainer.embedding(&example, &mut rng::stream(seed, "val-aug", i as u64))?;
        val.push(Prepared { example, embedding });
    }
    let mut eval_rng = rng::stream(0, "eval", 0);
    let initial_val_loss = prepared_loss(&trainer, &model, &params, &val, Mode::Eval, &mut eval_rng, None)?;

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let mut er = rng::stream(seed, "train-epoch", epoch as u64);
        let plans = trainer.compose(data.train, &train_spk, &mut er);
        let batches = epoch_loop(plans.len(), cfg.batch_size, &mut er)?;
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let mut br = rng::stream(seed, &format!("train-batch-{epoch}"), b as u64);
            let mut items = Vec::with_capacity(batch.len());
            for &i in batch {
                let example = trainer.build(data.train, &plans[i], br.gen())?;
                let embedding = trainer.embedding(&example, &mut br)?;
                items.push(Prepared { example, embedding });
            }
            let mut grads = Gradients::zeros_like(&params);
            total += prepared_loss(&trainer, &model, &params, &items, Mode::Train, &mut br, Some(&mut grads))?;
            if !grads.all_finite() {
                return Err(PvadError::Numeric(format!("non-finite gradient in epoch {epoch}")));
            }
            grads.clip_global_norm(DEFAULT_CLIP_NORM);
            adam.step(&mut params, &grads)?;
        }
        let train_loss = total / batches.len() as f64;
        let val_loss = prepared_loss(&trainer, &model, &params, &val, Mode::Eval, &mut eval_rng, None)?;
        log::info!("{regime} aug={aug} epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        match stopper.observe(epoch, val_loss) {
            Verdict::Improved => best = params.clone(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    let (best_epoch, _) = stopper
        .best()
        .ok_or_else(|| PvadError::Numeric("validation loss never finite".into()))?;
    Ok(Trained {
        regime,
        aug,
        model,
        params: best,
        history,
        initial_val_loss,
        best_epoch,
    })
}
