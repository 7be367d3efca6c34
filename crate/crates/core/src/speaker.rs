//! Speaker encoder: stacked BLSTMs with attentive pooling, pretrained as a
//! speaker classifier and then frozen.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::freq_mask;
use crate::corpus::Utterance;
use crate::error::{PvadError, Result};
use crate::features::{FeatureExtractor, FeatureSequence, Layout};
use crate::nn::{
    softmax_ce_weighted, Adam, AdamConfig, AttentivePooling, Blstm, BlstmCache, Checkpoint, Gradients, Linear,
    ParamSet, PoolingCache, Standardize, DEFAULT_CLIP_NORM,
};
use crate::rng;
use crate::schedule::{EarlyStopping, Verdict};

pub const ENCODER_PREFIX: &str = "spk";
const HEAD_PREFIX: &str = "head";

#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    pub input_dim: usize,
    pub hidden: usize,
    norm: Standardize,
    layers: Vec<Blstm>,
    pool: AttentivePooling,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    layers: Vec<BlstmCache>,
    pool: PoolingCache,
}

impl EncoderCache {
    pub fn embedding(&self) -> ArrayView1<'_, f64> {
        self.pool.pooled.view()
    }

    pub fn attention(&self) -> ArrayView1<'_, f64> {
        self.pool.weights.view()
    }
}

impl SpeakerEncoder {
    pub fn new(input_dim: usize, hidden: usize, n_layers: usize) -> Self {
        let p = ENCODER_PREFIX;
        let layers = (0..n_layers)
            .map(|l| Blstm::new(&format!("{p}.blstm{l}"), if l == 0 { input_dim } else { 2 * hidden }, hidden))
            .collect();
        Self {
            input_dim,
            hidden,
            norm: Standardize::new(&format!("{p}.norm"), input_dim),
            layers,
            pool: AttentivePooling::new(&format!("{p}.attn"), 2 * hidden, hidden),
        }
    }

    /// Embedding width `K = 2H`.
    pub fn embed_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn init(&self, params: &mut ParamSet, r: &mut rng::Rng) {
        self.norm.init(params);
        for l in &self.layers {
            l.init(params, r);
        }
        self.pool.init(params, r);
    }

    pub fn fit_normalization<'a>(
        &self,
        params: &mut ParamSet,
        seqs: impl IntoIterator<Item = ArrayView2<'a, f64>>,
    ) -> Result<()> {
        self.norm.fit(params, seqs)
    }

    pub fn forward(&self, params: &ParamSet, x: ArrayView2<f64>) -> Result<EncoderCache> {
        if x.nrows() == 0 {
            return Err(PvadError::invalid("cannot encode an empty feature sequence"));
        }
        let mut h = self.norm.forward(params, x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let c = l.forward(params, h.view())?;
            h = c.output().to_owned();
            caches.push(c);
        }
        let pool = self.pool.forward(params, h.view())?;
        Ok(EncoderCache { layers: caches, pool })
    }

    pub fn encode(&self, params: &ParamSet, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(params, x)?.pool.pooled)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &EncoderCache,
        d_embedding: ArrayView1<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let mut dh = self.pool.backward(params, &cache.pool, d_embedding, grads)?;
        for (l, c) in self.layers.iter().zip(&cache.layers).rev() {
            dh = l.backward(params, c, dh.view(), grads)?;
        }
        self.norm.backward(params, dh.view())
    }
}

/// A frozen encoder together with its parameters.
#[derive(Debug, Clone)]
pub struct SpeakerModel {
    pub encoder: SpeakerEncoder,
    pub params: ParamSet,
}

impl SpeakerModel {
    pub fn new(encoder: SpeakerEncoder, mut params: ParamSet) -> Self {
        params.set_trainable(false);
        Self { encoder, params }
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.embed_dim()
    }

    /// Embeds context-stacked features.
    pub fn encode(&self, feats: &FeatureSequence) -> Result<Array1<f64>> {
        if !matches!(feats.layout, Layout::Stacked { .. }) {
            return Err(PvadError::invalid(format!(
                "speaker encoder expects context-stacked features, got {:?}",
                feats.layout
            )));
        }
        self.encoder.encode(&self.params, feats.view())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.params.clone(),
            0,
            json!({
                "K": self.encoder.embed_dim(),
                "frozen": true,
                "input_dim": self.encoder.input_dim,
                "hidden": self.encoder.hidden,
                "layers": self.encoder.n_layers(),
            }),
        )
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ckpt.metadata
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| PvadError::invalid(format!("speaker checkpoint metadata lacks `{k}`")))
        };
        let encoder = SpeakerEncoder::new(field("input_dim")?, field("hidden")?, field("layers")?);
        if field("K")? != encoder.embed_dim() {
            return Err(PvadError::invalid("speaker checkpoint K disagrees with hidden size"));
        }
        let mut probe = ParamSet::new();
        encoder.init(&mut probe, &mut rng::stream(0, "probe", 0));
        for (name, p) in probe.iter() {
            let got = ckpt.params.get(name)?;
            if got.value.shape() != p.value.shape() {
                return Err(PvadError::Shape {
                    path: name.clone(),
                    expected: p.value.shape().to_vec(),
                    got: got.value.shape().to_vec(),
                });
            }
        }
        Ok(Self::new(encoder, ckpt.params))
    }
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PvadError::Shape {
            path: "cosine_similarity".into(),
            expected: vec![a.len()],
            got: vec![b.len()],
        });
    }
    let na = a.dot(&a);
    let nb = b.dot(&b);
    if na == 0.0 || nb == 0.0 {
        return Err(PvadError::invalid("cosine similarity of a zero vector"));
    }
    // sqrt(n·n) == n exactly, so identical inputs give exactly 1
    Ok((a.dot(&b) / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Training crop length in frames; 0 trains on whole utterances.
    pub crop_frames: usize,
    /// Random crops drawn from every training utterance per epoch.
    pub crops_per_utterance: usize,
    pub val_fraction: f64,
    /// Probability that a training crop gets a frequency mask.
    pub mask_prob: f64,
    pub mask_fraction: f64,
    /// Without a bias, logits depend only on the embedding itself.
    pub head_bias: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 3,
            lr: 0.001,
            batch_size: 8,
            max_epochs: 30,
            patience: 5,
            crop_frames: 48,
            crops_per_utterance: 4,
            val_fraction: 0.1,
            mask_prob: 0.5,
            mask_fraction: 0.3333,
            head_bias: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: SpeakerModel,
    /// Classification head over the training speakers; not used downstream.
    pub head: ParamSet,
    pub speakers: Vec<String>,
    pub initial_val_loss: f64,
    pub history: Vec<PretrainRecord>,
}

struct Item {
    static_feats: FeatureSequence,
    feats: Array2<f64>,
    class: usize,
    /// Frames `[lo, hi)` around the voiced region, where crops are drawn.
    crop_range: (usize, usize),
}

fn crop_range(u: &Utterance, frames: usize) -> (usize, usize) {
    let first = u.vad_labels.iter().position(|&s| s == 1).unwrap_or(0);
    let last = u.vad_labels.iter().rposition(|&s| s == 1).unwrap_or(frames.saturating_sub(1));
    (first.saturating_sub(5), (last + 6).min(frames))
}

struct Classifier<'a> {
    encoder: &'a SpeakerEncoder,
    head: Linear,
}

impl Classifier<'_> {
    /// Loss contribution `weight · CE` and whether the argmax is correct.
    fn step(
        &self,
        params: &ParamSet,
        x: ArrayView2<f64>,
        class: usize,
        weight: f64,
        grads: Option<&mut Gradients>,
    ) -> Result<(f64, bool)> {
        let cache = self.encoder.forward(params, x)?;
        let e = cache.embedding().insert_axis(ndarray::Axis(0)).to_owned();
        let logits = self.head.forward(params, e.view())?;
        let ce = softmax_ce_weighted(logits.view(), &[class], weight)?;
        let row = ce.posteriors.row(0);
        let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        if let Some(g) = grads {
            let de = self.head.backward(params, e.view(), ce.grad.view(), g)?;
            self.encoder.backward(params, &cache, de.row(0), g)?;
        }
        Ok((ce.loss, best == class))
    }

    fn evaluate(&self, params: &ParamSet, items: &[Item]) -> Result<(f64, f64)> {
        let w = 1.0 / items.len() as f64;
        let mut loss = 0.0;
        let mut correct = 0;
        for it in items {
            let (l, ok) = self.step(params, it.feats.view(), it.class, w, None)?;
            loss += l;
            correct += usize::from(ok);
        }
        Ok((loss, correct as f64 / items.len() as f64))
    }
}

/// Trains encoder + linear head as a speaker classifier with Adam and
/// validation-loss early stopping. Per speaker, the last `val_fraction` of
/// its utterances (at least one) are held out for validation.
pub fn pretrain_classifier(
    utts: &[&Utterance],
    extractor: &FeatureExtractor,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Pretrained> {
    if !(0.0..=1.0).contains(&cfg.mask_prob) {
        return Err(PvadError::Config(format!("mask_prob {} outside [0, 1]", cfg.mask_prob)));
    }
    if cfg.batch_size == 0 || cfg.hidden == 0 || cfg.layers == 0 {
        return Err(PvadError::Config("pretraining needs nonzero batch size, hidden size and layers".into()));
    }
    let mut groups: BTreeMap<String, Vec<&Utterance>> = BTreeMap::new();
    for u in utts {
        let spk = u
            .speaker_id
            .clone()
            .ok_or_else(|| PvadError::invalid(format!("utterance {} has no speaker label", u.utterance_id)))?;
        groups.entry(spk).or_default().push(u);
    }
    if groups.len() < 2 {
        return Err(PvadError::invalid(format!(
            "speaker classification needs at least 2 speakers, got {}",
            groups.len()
        )));
    }
    if let Some((spk, g)) = groups.iter().find(|(_, g)| g.len() < 2) {
        return Err(PvadError::invalid(format!("speaker {spk} has {} utterance(s), need 2", g.len())));
    }
    let speakers: Vec<String> = groups.keys().cloned().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, g) in groups.values().enumerate() {
        let n_val = ((g.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, g.len() - 1);
        for (i, u) in g.iter().enumerate() {
            let static_feats = extractor.static_features(&u.audio)?;
            let feats = extractor.finish(&static_feats)?.values;
            let item = Item {
                crop_range: crop_range(u, feats.nrows()),
                static_feats,
                feats,
                class,
            };
            if i >= g.len() - n_val {
                val.push(item);
            } else {
                train.push(item);
            }
        }
    }

    let input_dim = extractor.config.stacked_dim();
    let encoder = SpeakerEncoder::new(input_dim, cfg.hidden, cfg.layers);
    let classifier = Classifier {
        encoder: &encoder,
        head: Linear::new(HEAD_PREFIX, encoder.embed_dim(), speakers.len()),
    };
    let mut params = ParamSet::new();
    let mut r = rng::stream(seed, "pretrain-init", 0);
    encoder.init(&mut params, &mut r);
    classifier.head.init(&mut params, &mut r);
    if !cfg.head_bias {
        params.get_mut(&format!("{HEAD_PREFIX}.b"))?.trainable = false;
    }
    encoder.fit_normalization(&mut params, train.iter().map(|it| it.feats.view()))?;

    let (initial_val_loss, _) = classifier.evaluate(&params, &val)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len() * cfg.crops_per_utterance.max(1))
        .map(|k| k % train.len())
        .collect();
    let batch = cfg.batch_size.min(order.len());
    for epoch in 0..cfg.max_epochs {
        let mut er = rng::stream(seed, "pretrain-epoch", epoch as u64);
        order.shuffle(&mut er);
        let mut total = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks_exact(batch) {
            let mut grads = Gradients::zeros_like(&params);
            let mut loss = 0.0;
            for &i in chunk {
                let it = &train[i];
                let masked;
                let feats = if cfg.mask_fraction > 0.0 && er.gen_bool(cfg.mask_prob) {
                    masked = extractor.finish(&freq_mask(&it.static_feats, cfg.mask_fraction, &mut er)?)?.values;
                    &masked
                } else {
                    &it.feats
                };
                let (lo, hi) = it.crop_range;
                let x = if cfg.crop_frames > 0 && hi - lo > cfg.crop_frames {
                    let start = er.gen_range(lo..=hi - cfg.crop_frames);
                    feats.slice(s![start..start + cfg.crop_frames, ..])
                } else {
                    feats.view()
                };
                loss += classifier.step(&params, x, it.class, 1.0 / chunk.len() as f64, Some(&mut grads))?.0;
            }
            if !loss.is_finite() || !grads.all_finite() {
                return Err(PvadError::Numeric(format!("non-finite loss in pretraining epoch {epoch}")));
            }
            grads.clip_global_norm(DEFAULT_CLIP_NORM);
            adam.step(&mut params, &grads)?;
            total += loss;
            n_batches += 1;
        }
        let (val_loss, val_accuracy) = classifier.evaluate(&params, &val)?;
        let train_loss = total / n_batches.max(1) as f64;
        log::info!("pretrain epoch {epoch}: train {train_loss:.4} val {val_loss:.4} acc {val_accuracy:.3}");
        history.push(PretrainRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        match stopper.observe(epoch, val_loss) {
            Verdict::Improved => best = params.clone(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    let head = best.split_off_prefix(&format!("{HEAD_PREFIX}."));
    Ok(Pretrained {
        model: SpeakerModel::new(encoder, best),
        head,
        speakers,
        initial_val_loss,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckConfig};
    use ndarray::Array2;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, "m", 0);
        Array2::from_shape_simple_fn((rows, cols), || r.gen_range(-1.0..1.0))
    }

    #[test]
    fn cosine_basics() {
        let x = Array1::from_vec(vec![1.0, 2.0, -0.5]);
        assert_eq!(cosine_similarity(x.view(), x.view()).unwrap(), 1.0);
        assert!((cosine_similarity(x.view(), (-&x).view()).unwrap() + 1.0).abs() < 1e-15);
        let a = Array1::from_vec(vec![1.0, 0.0]);
        let b = Array1::from_vec(vec![0.0, 3.0]);
        assert_eq!(cosine_similarity(a.view(), b.view()).unwrap(), 0.0);
        assert!(cosine_similarity(a.view(), Array1::zeros(2).view()).is_err());
    }

    #[test]
    fn encoder_gradients() {
        let enc = SpeakerEncoder::new(3, 2, 2);
        let mut params = ParamSet::new();
        enc.init(&mut params, &mut rng::stream(1, "init", 0));
        let x = rand_matrix(5, 3, 2);
        enc.fit_normalization(&mut params, [x.view()]).unwrap();
        let target = Array1::from_vec(vec![0.3, -0.2, 0.1, 0.5]);
        let report = grad_check(
            &params,
            |p| {
                let cache = enc.forward(p, x.view())?;
                let diff = &cache.embedding() - &target;
                let mut g = Gradients::zeros_like(p);
                enc.backward(p, &cache, (&diff * 1.0).view(), &mut g)?;
                Ok((0.5 * diff.dot(&diff), g))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst());
    }

    #[test]
    fn duplicated_constant_frames_leave_embedding_unchanged() {
        let enc = SpeakerEncoder::new(2, 3, 1);
        let mut params = ParamSet::new();
        enc.init(&mut params, &mut rng::stream(3, "init", 0));
        // no recurrence and a closed forget gate: each frame's output
        // depends on that frame alone
        for (name, p) in params.iter_mut() {
            if name.ends_with("w_hh") {
                p.value.fill(0.0);
            }
            if name.ends_with(".b") && name.contains("blstm") {
                p.value.slice_mut(s![3..6]).fill(-1e3);
            }
        }
        let x = Array2::from_shape_fn((4, 2), |(_, j)| j as f64 * 0.5 - 0.2);
        let xx = Array2::from_shape_fn((8, 2), |(_, j)| j as f64 * 0.5 - 0.2);
        let a = enc.encode(&params, x.view()).unwrap();
        let b = enc.encode(&params, xx.view()).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
        assert!(enc.encode(&params, Array2::zeros((0, 2)).view()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_freezes() {
        let enc = SpeakerEncoder::new(4, 2, 3);
        let mut params = ParamSet::new();
        enc.init(&mut params, &mut rng::stream(5, "init", 0));
        let model = SpeakerModel::new(enc, params);
        let ckpt = model.checkpoint();
        assert_eq!(ckpt.metadata["K"], 4);
        assert_eq!(ckpt.metadata["frozen"], true);
        let back = SpeakerModel::from_checkpoint(ckpt).unwrap();
        assert!(back.params.iter().all(|(_, p)| !p.trainable));
        let x = rand_matrix(6, 4, 9);
        assert_eq!(
            back.encoder.encode(&back.params, x.view()).unwrap(),
            model.encoder.encode(&model.params, x.view()).unwrap()
        );
    }
}
