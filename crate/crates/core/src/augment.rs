//! Enrollment augmentation: frequency masking of the conditioning features
//! followed by dropout on the resulting embedding.

use ndarray::Array1;
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{PvadError, Result};
use crate::features::{FeatureExtractor, FeatureSequence, Layout};
use crate::nn::{dropout, Mode};
use crate::rng::Rng;
use crate::speaker::SpeakerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStage {
    /// Mask static mel bins, then compute deltas and context.
    PreDelta,
    /// Mask columns of the finished context-stacked vector.
    PostStack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskShape {
    Contiguous,
    Scattered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub fraction: f64,
    pub dropout_p: f64,
    pub mask_stage: MaskStage,
    pub mask_shape: MaskShape,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            fraction: 0.3333,
            dropout_p: 0.5,
            mask_stage: MaskStage::PreDelta,
            mask_shape: MaskShape::Contiguous,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(PvadError::Config(format!("aug.fraction {} outside [0, 1)", self.fraction)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(PvadError::Config(format!("aug.dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// Column indices to zero: `round(fraction · dim)` of them.
pub fn mask_columns(dim: usize, fraction: f64, shape: MaskShape, rng: &mut Rng) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(PvadError::invalid(format!("mask fraction {fraction} outside [0, 1)")));
    }
    let width = (fraction * dim as f64).round() as usize;
    if width == 0 {
        return Ok(Vec::new());
    }
    Ok(match shape {
        MaskShape::Contiguous => {
            let start = rng.gen_range(0..=dim - width);
            (start..start + width).collect()
        }
        MaskShape::Scattered => {
            let mut idx = sample(rng, dim, width).into_vec();
            idx.sort_unstable();
            idx
        }
    })
}

/// Zeroes a random band of `round(fraction · M)` mel bins across all frames
/// of static features. Other entries are untouched.
pub fn freq_mask(x: &FeatureSequence, fraction: f64, rng: &mut Rng) -> Result<FeatureSequence> {
    freq_mask_with(x, fraction, MaskShape::Contiguous, rng)
}

pub fn freq_mask_with(x: &FeatureSequence, fraction: f64, shape: MaskShape, rng: &mut Rng) -> Result<FeatureSequence> {
    let cols = mask_columns(x.dim(), fraction, shape, rng)?;
    let mut out = x.clone();
    for c in cols {
        out.values.column_mut(c).fill(0.0);
    }
    Ok(out)
}

/// Conditioning embedding from static features `x`.
///
/// Train mode: mask, finish features, encode, then dropout with rate
/// `cfg.dropout_p`. Eval mode: plain encoding.
pub fn augment_embedding(
    x: &FeatureSequence,
    speaker: &SpeakerModel,
    extractor: &FeatureExtractor,
    cfg: &AugConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Array1<f64>> {
    if x.layout != Layout::Static {
        return Err(PvadError::invalid(format!(
            "augmentation expects static features, got {:?}",
            x.layout
        )));
    }
    if mode == Mode::Eval {
        return speaker.encode(&extractor.finish(x)?);
    }
    let stacked = match cfg.mask_stage {
        MaskStage::PreDelta => extractor.finish(&freq_mask_with(x, cfg.fraction, cfg.mask_shape, rng)?)?,
        MaskStage::PostStack => freq_mask_with(&extractor.finish(x)?, cfg.fraction, cfg.mask_shape, rng)?,
    };
    dropout(&speaker.encode(&stacked)?, cfg.dropout_p, Mode::Train, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureConfig;
    use crate::nn::ParamSet;
    use crate::rng;
    use crate::speaker::SpeakerEncoder;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn static_seq(t: usize, m: usize, seed: u64) -> FeatureSequence {
        let mut r = rng::stream(seed, "x", 0);
        FeatureSequence {
            values: Array2::from_shape_simple_fn((t, m), || r.gen_range(-5.0..5.0)),
            layout: Layout::Static,
            n_mels: m,
            frame_shift_ms: 10.0,
            frame_length_ms: 20.0,
        }
    }

    #[test]
    fn zero_fraction_is_identity() {
        let x = static_seq(7, 10, 1);
        let mut r = rng::stream(0, "m", 0);
        assert_eq!(freq_mask(&x, 0.0, &mut r).unwrap(), x);
        assert!(freq_mask(&x, 1.0, &mut r).is_err());
    }

    #[test]
    fn forty_bins_one_third_masks_thirteen() {
        let x = static_seq(20, 40, 2);
        for seed in 0..20 {
            let mut r = rng::stream(seed, "m", 0);
            let y = freq_mask(&x, 1.0 / 3.0, &mut r).unwrap();
            let zeroed: Vec<usize> = (0..40)
                .filter(|&c| y.values.column(c).iter().all(|&v| v == 0.0))
                .collect();
            assert_eq!(zeroed.len(), 13);
            assert!(zeroed.windows(2).all(|w| w[1] == w[0] + 1));
        }
    }

    proptest! {
        #[test]
        fn unmasked_entries_are_bitwise_unchanged(
            seed in any::<u64>(),
            m in 2usize..50,
            fraction in 0.0f64..0.99,
            scattered in any::<bool>(),
        ) {
            let x = static_seq(6, m, seed);
            let shape = if scattered { MaskShape::Scattered } else { MaskShape::Contiguous };
            let mut r = rng::stream(seed, "m", 1);
            let y = freq_mask_with(&x, fraction, shape, &mut r).unwrap();
            let expected = (fraction * m as f64).round() as usize;
            let mut masked = 0;
            for c in 0..m {
                if y.values.column(c).iter().all(|&v| v == 0.0) {
                    masked += 1;
                } else {
                    prop_assert_eq!(y.values.column(c), x.values.column(c));
                }
            }
            prop_assert_eq!(masked, expected);
        }
    }

    fn tiny_model(fx: &FeatureExtractor) -> SpeakerModel {
        let enc = SpeakerEncoder::new(fx.config.stacked_dim(), 3, 1);
        let mut p = ParamSet::new();
        enc.init(&mut p, &mut rng::stream(4, "init", 0));
        SpeakerModel::new(enc, p)
    }

    #[test]
    fn eval_mode_and_null_augmentation_equal_plain_encoding() {
        let fx = FeatureExtractor::new(FeatureConfig { n_mels: 6, context: 1, ..FeatureConfig::default() }).unwrap();
        let model = tiny_model(&fx);
        let x = static_seq(12, 6, 3);
        let plain = model.encode(&fx.finish(&x).unwrap()).unwrap();
        let mut r = rng::stream(1, "a", 0);
        let cfg = AugConfig::default();
        assert_eq!(augment_embedding(&x, &model, &fx, &cfg, Mode::Eval, &mut r).unwrap(), plain);
        let null = AugConfig { fraction: 0.0, dropout_p: 0.0, ..cfg };
        assert_eq!(augment_embedding(&x, &model, &fx, &null, Mode::Train, &mut r).unwrap(), plain);
        let a = augment_embedding(&x, &model, &fx, &cfg, Mode::Train, &mut r).unwrap();
        let b = augment_embedding(&x, &model, &fx, &cfg, Mode::Train, &mut r).unwrap();
        assert_ne!(a, b);
        let mut r1 = rng::stream(9, "a", 0);
        let mut r2 = rng::stream(9, "a", 0);
        assert_eq!(
            augment_embedding(&x, &model, &fx, &cfg, Mode::Train, &mut r1).unwrap(),
            augment_embedding(&x, &model, &fx, &cfg, Mode::Train, &mut r2).unwrap()
        );
    }

    #[test]
    fn post_stack_masks_stacked_columns() {
        let fx = FeatureExtractor::new(FeatureConfig { n_mels: 6, context: 1, ..FeatureConfig::default() }).unwrap();
        let model = tiny_model(&fx);
        let x = static_seq(12, 6, 3);
        let cfg = AugConfig { mask_stage: MaskStage::PostStack, dropout_p: 0.0, ..AugConfig::default() };
        let mut r = rng::stream(2, "a", 0);
        let e = augment_embedding(&x, &model, &fx, &cfg, Mode::Train, &mut r).unwrap();
        assert_eq!(e.len(), model.embed_dim());
        let stacked = fx.finish(&x).unwrap();
        assert!(augment_embedding(&stacked, &model, &fx, &cfg, Mode::Train, &mut r).is_err());
    }
}
