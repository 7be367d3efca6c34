//! Frame-level detector: stacked unidirectional LSTMs over acoustic frames
//! (optionally conditioned on a speaker embedding appended to every frame),
//! dropout, a linear layer and a two-way softmax.
//!
//! Class 0 is non-speech or non-target speech, class 1 is target speech (or
//! plain speech for the unconditioned VAD).

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{PvadError, Result};
use crate::nn::{
    dropout_mask, softmax_ce_weighted, softmax_rows, Checkpoint, Gradients, Linear, Lstm, LstmCache, Mode,
    ParamSet, Standardize,
};
use crate::rng::Rng;

pub const CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 4,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PvadModel {
    pub input_dim: usize,
    /// 0 for the unconditioned VAD.
    pub embed_dim: usize,
    pub config: ModelConfig,
    norm: Standardize,
    lstms: Vec<Lstm>,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct PvadCache {
    lstms: Vec<LstmCache>,
    /// Input to the linear head (after dropout).
    dropped: Array2<f64>,
    mask: Option<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl PvadModel {
    pub fn new(input_dim: usize, embed_dim: usize, config: ModelConfig) -> Self {
        let prefix = if embed_dim > 0 { "pvad" } else { "vad" };
        let h = config.hidden;
        let lstms = (0..config.layers)
            .map(|l| {
                let name = format!("{prefix}.lstm{l}");
                if l == 0 {
                    Lstm::with_static_input(&name, input_dim, embed_dim, h)
                } else {
                    Lstm::new(&name, h, h)
                }
            })
            .collect();
        Self {
            input_dim,
            embed_dim,
            config,
            norm: Standardize::new(&format!("{prefix}.norm"), input_dim),
            lstms,
            head: Linear::new(&format!("{prefix}.out"), h, CLASSES),
        }
    }

    pub fn standard_vad(input_dim: usize, config: ModelConfig) -> Self {
        Self::new(input_dim, 0, config)
    }

    pub fn is_personalized(&self) -> bool {
        self.embed_dim > 0
    }

    pub fn init(&self, params: &mut ParamSet, r: &mut Rng) {
        self.norm.init(params);
        for l in &self.lstms {
            l.init(params, r);
        }
        self.head.init(params, r);
    }

    pub fn fit_normalization<'a>(
        &self,
        params: &mut ParamSet,
        seqs: impl IntoIterator<Item = ArrayView2<'a, f64>>,
    ) -> Result<()> {
        self.norm.fit(params, seqs)
    }

    fn check_embedding(&self, e: Option<ArrayView1<f64>>) -> Result<()> {
        match (self.embed_dim, e) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(PvadError::invalid("standard VAD takes no speaker embedding")),
            (_, None) => Err(PvadError::invalid("personalized VAD needs a speaker embedding")),
            (k, Some(e)) if e.len() != k => Err(PvadError::Shape {
                path: "speaker embedding".into(),
                expected: vec![k],
                got: vec![e.len()],
            }),
            _ => Ok(()),
        }
    }

    /// Train mode draws the dropout mask from `rng`; eval mode ignores it.
    pub fn forward(
        &self,
        params: &ParamSet,
        x: ArrayView2<f64>,
        e: Option<ArrayView1<f64>>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<PvadCache> {
        self.check_embedding(e)?;
        let mut h = self.norm.forward(params, x)?;
        let mut caches = Vec::with_capacity(self.lstms.len());
        for (l, lstm) in self.lstms.iter().enumerate() {
            let c = lstm.forward(params, h.view(), if l == 0 { e } else { None })?;
            h = c.output().to_owned();
            caches.push(c);
        }
        let mask = match mode {
            Mode::Train if self.config.dropout > 0.0 => Some(dropout_mask(h.raw_dim(), self.config.dropout, rng)?),
            _ => None,
        };
        if let Some(m) = &mask {
            h *= m;
        }
        let logits = self.head.forward(params, h.view())?;
        Ok(PvadCache {
            lstms: caches,
            dropped: h,
            mask,
            logits,
        })
    }

    /// Eval-mode posteriors, `T × 2`.
    pub fn posteriors(&self, params: &ParamSet, x: ArrayView2<f64>, e: Option<ArrayView1<f64>>) -> Result<Array2<f64>> {
        // eval mode never touches the rng
        let mut unused = crate::rng::stream(0, "eval", 0);
        let cache = self.forward(params, x, e, Mode::Eval, &mut unused)?;
        Ok(softmax_rows(cache.logits.view()))
    }

    /// Accumulates parameter gradients from `dL/dlogits`; returns `dL/dx`.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &PvadCache,
        d_logits: ArrayView2<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let mut dh = self.head.backward(params, cache.dropped.view(), d_logits, grads)?;
        if let Some(m) = &cache.mask {
            dh *= m;
        }
        for (lstm, c) in self.lstms.iter().zip(&cache.lstms).rev() {
            dh = lstm.backward(params, c, dh.view(), grads)?;
        }
        self.norm.backward(params, dh.view())
    }

    /// Weighted cross-entropy against frame labels; gradients accumulate
    /// into `grads`. Returns the weighted loss.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_loss(
        &self,
        params: &ParamSet,
        x: ArrayView2<f64>,
        e: Option<ArrayView1<f64>>,
        labels: &[u8],
        weight: f64,
        mode: Mode,
        rng: &mut Rng,
        grads: Option<&mut Gradients>,
    ) -> Result<f64> {
        let cache = self.forward(params, x, e, mode, rng)?;
        let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
        let ce = softmax_ce_weighted(cache.logits.view(), &labels, weight)?;
        if let Some(g) = grads {
            // the frozen input normalization needs no gradient
            let mut dh = self.head.backward(params, cache.dropped.view(), ce.grad.view(), g)?;
            if let Some(m) = &cache.mask {
                dh *= m;
            }
            for (l, (lstm, c)) in self.lstms.iter().zip(&cache.lstms).enumerate().rev() {
                if l == 0 {
                    lstm.backward_params(params, c, dh.view(), g)?;
                } else {
                    dh = lstm.backward(params, c, dh.view(), g)?;
                }
            }
        }
        Ok(ce.loss)
    }

    pub fn checkpoint(&self, params: &ParamSet, step: u64) -> Checkpoint {
        Checkpoint::new(
            params.clone(),
            step,
            json!({
                "input_dim": self.input_dim,
                "embed_dim": self.embed_dim,
                "hidden": self.config.hidden,
                "layers": self.config.layers,
                "dropout": self.config.dropout,
                "classes": CLASSES,
            }),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ParamSet)> {
        let m = &ckpt.metadata;
        let field = |k: &str| {
            m.get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| PvadError::invalid(format!("model checkpoint metadata lacks `{k}`")))
        };
        if field("classes")? != CLASSES {
            return Err(PvadError::invalid("model checkpoint is not a two-class detector"));
        }
        let config = ModelConfig {
            hidden: field("hidden")?,
            layers: field("layers")?,
            dropout: m.get("dropout").and_then(|v| v.as_f64()).unwrap_or(0.5),
        };
        let model = Self::new(field("input_dim")?, field("embed_dim")?, config);
        let mut probe = ParamSet::new();
        model.init(&mut probe, &mut crate::rng::stream(0, "probe", 0));
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
        Ok((model, ckpt.params.clone()))
    }
}
