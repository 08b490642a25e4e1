//! The full two-path model: featurizer, frozen quantizer and masked encoder.

use ndarray::{Array2, Axis};
use serde::Serialize;

use crate::audio::AudioBatch;
use crate::config::RunConfig;
use crate::encoder::{Encoder, EncoderOutput, EncoderParamCount};
use crate::error::Result;
use crate::features::{ConvFeaturizer, ConvItemCache, FeatureFrames, FeatureSource, LogMel};
use crate::masking::{apply_mask, make_masks_with, MaskSpec};
use crate::params::{Grads, ParamStore};
use crate::quantizer::{label_histogram, LabelFrames, RandomQuantizer};
use crate::rng::{stream_rng, Stream};
use crate::train::{item_ce, masked_positions, LossStats};
use crate::Error;

#[derive(Debug)]
pub enum Featurizer {
    Conv(ConvFeaturizer),
    Logmel(LogMel),
}

impl Featurizer {
    pub fn source(&self) -> FeatureSource {
        match self {
            Featurizer::Conv(_) => FeatureSource::Conv,
            Featurizer::Logmel(_) => FeatureSource::Logmel,
        }
    }
}

/// Seeds for the random parts of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSeeds {
    pub mask: u64,
    pub noise: u64,
    /// `None` disables dropout.
    pub dropout: Option<u64>,
}

/// Everything one loss evaluation produced besides gradients.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub stats: LossStats,
    pub labels: LabelFrames,
    pub mask: MaskSpec,
    /// Label counts at valid frames.
    pub histogram: Vec<u64>,
}

#[derive(Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub params: ParamStore,
    pub featurizer: Featurizer,
    pub encoder: Encoder,
    pub quantizer: RandomQuantizer,
}

impl Model {
    /// Fresh parameters drawn from the `train.seed` init stream.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = stream_rng(cfg.train.seed, Stream::Init, 0);
        let featurizer = match cfg.featurizer.kind {
            FeatureSource::Conv => Featurizer::Conv(ConvFeaturizer::new(&mut params, &cfg.featurizer.conv, &mut rng)?),
            FeatureSource::Logmel => Featurizer::Logmel(LogMel::new(&cfg.featurizer.logmel)?),
        };
        let encoder = Encoder::new(&mut params, &cfg.encoder, cfg.masking.learned_embedding, &mut rng)?;
        let quantizer = RandomQuantizer::from_config(&cfg.quantizer, cfg.featurizer.out_dim())?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            featurizer,
            encoder,
            quantizer,
        })
    }

    pub fn featurize(&self, batch: &AudioBatch) -> Result<FeatureFrames> {
        Ok(self.featurize_with_cache(batch)?.0)
    }

    fn featurize_with_cache(&self, batch: &AudioBatch) -> Result<(FeatureFrames, Option<Vec<ConvItemCache>>)> {
        match &self.featurizer {
            Featurizer::Conv(c) => {
                let (f, caches) = c.featurize_with_cache(&self.params, batch)?;
                Ok((f, Some(caches)))
            }
            Featurizer::Logmel(l) => Ok((l.featurize(batch)?, None)),
        }
    }

    /// Path 1: labels for `batch` under the current featurizer.
    pub fn labels(&self, batch: &AudioBatch) -> Result<LabelFrames> {
        self.quantizer.quantize(&self.featurize(batch)?)
    }

    /// Unmasked, dropout-free encoder pass.
    pub fn encode(&self, batch: &AudioBatch) -> Result<EncoderOutput> {
        self.encoder.encode(&self.params, &self.featurize(batch)?, None)
    }

    /// Masked-prediction loss on an already mixed batch.
    pub fn loss(&self, batch: &AudioBatch, seeds: StepSeeds) -> Result<StepOutcome> {
        Ok(self.evaluate(batch, seeds, false)?.0)
    }

    /// Loss plus gradients for every trainable parameter. Labels are treated
    /// as constants and masked frames pass no gradient to the featurizer.
    pub fn loss_and_grads(&self, batch: &AudioBatch, seeds: StepSeeds) -> Result<(StepOutcome, Grads)> {
        let (out, grads) = self.evaluate(batch, seeds, true)?;
        Ok((out, grads.expect("gradients requested")))
    }

    fn evaluate(&self, batch: &AudioBatch, seeds: StepSeeds, want_grads: bool) -> Result<(StepOutcome, Option<Grads>)> {
        let (feats, conv_caches) = self.featurize_with_cache(batch)?;
        let labels = self.quantizer.quantize(&feats)?;
        let mut mask_rng = stream_rng(seeds.mask, Stream::Mask, 0);
        let mask = make_masks_with(&feats.valid_frames, feats.num_frames(), &self.cfg.masking, &mut mask_rng)?;
        let masked = apply_mask(&feats, &mask, self.cfg.masking.noise_std, seeds.noise)?;

        let n = masked_positions(&mask, &feats.valid_frames);
        if n == 0 {
            return Err(Error::NoMaskedPositions);
        }
        let norm = n as f64;
        let mut grads = want_grads.then(|| self.params.zero_grads());
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for i in 0..feats.batch_size() {
            let mut rng = seeds.dropout.map(|s| stream_rng(s, Stream::Dropout, i as u64));
            let mask_row = mask.mask.row(i);
            let (out, cache) = self.encoder.forward_item(
                &self.params,
                masked.values.index_axis(Axis(0), i),
                feats.valid_frames[i],
                Some(mask_row),
                rng.as_mut(),
            )?;
            let mut d_logits = grads.as_ref().map(|_| Array2::zeros(out.logits.raw_dim()));
            let (l, c) = item_ce(
                out.logits.view(),
                labels.labels.row(i),
                mask_row,
                feats.valid_frames[i],
                norm,
                d_logits.as_mut(),
            );
            loss_sum += l;
            correct += c;
            if let (Some(g), Some(dl)) = (grads.as_mut(), d_logits) {
                let mut dx = self.encoder.backward_item(&self.params, g, &cache, dl.view());
                if let (Featurizer::Conv(conv), Some(caches)) = (&self.featurizer, &conv_caches) {
                    for (mut row, &m) in dx.rows_mut().into_iter().zip(mask_row) {
                        if m {
                            row.fill(0.0);
                        }
                    }
                    conv.backward_item(&self.params, g, &caches[i], dx.view());
                }
            }
        }
        let histogram = label_histogram(&labels, self.quantizer.vocab());
        let stats = LossStats {
            loss: loss_sum / norm,
            accuracy: correct as f64 / norm,
            positions: n,
        };
        Ok((
            StepOutcome {
                stats,
                labels,
                mask,
                histogram,
            },
            grads,
        ))
    }
}

/// Scalar counts for a run config, by module.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub featurizer: usize,
    pub encoder: EncoderParamCount,
    pub trainable: usize,
    /// Frozen quantizer scalars with `code_dim` as configured.
    pub non_trainable: usize,
    /// Frozen scalars if the codebook instead had `encoder.hidden` columns.
    pub non_trainable_hidden_dim: usize,
    /// The non-trainable total quoted alongside the architecture.
    pub claimed_non_trainable: usize,
    pub claimed_trainable: usize,
    /// Serialized size at 4 bytes per scalar.
    pub size_mb: f64,
}

pub const CLAIMED_TRAINABLE: usize = 94_400_000;
pub const CLAIMED_NON_TRAINABLE: usize = 6_400_000;

pub fn count_params(cfg: &RunConfig) -> ParamReport {
    let featurizer = match cfg.featurizer.kind {
        FeatureSource::Conv => cfg.featurizer.conv.num_params(),
        FeatureSource::Logmel => 0,
    };
    let encoder = cfg.encoder.num_params(cfg.masking.learned_embedding);
    let trainable = featurizer + encoder.total();
    let in_dim = cfg.featurizer.out_dim();
    let q = &cfg.quantizer;
    let non_trainable = in_dim * q.code_dim + q.vocab * q.code_dim;
    let non_trainable_hidden_dim = in_dim * cfg.encoder.hidden + q.vocab * cfg.encoder.hidden;
    ParamReport {
        featurizer,
        encoder,
        trainable,
        non_trainable,
        non_trainable_hidden_dim,
        claimed_non_trainable: CLAIMED_NON_TRAINABLE,
        claimed_trainable: CLAIMED_TRAINABLE,
        size_mb: (trainable + non_trainable) as f64 * 4.0 / 1e6,
    }
}

impl ParamReport {
    pub fn trainable_deviation(&self) -> f64 {
        self.trainable as f64 / self.claimed_trainable as f64 - 1.0
    }

    /// True when the configured frozen count is not within 10% of the claim.
    pub fn non_trainable_discrepancy(&self) -> bool {
        !near(self.non_trainable, self.claimed_non_trainable)
    }

    pub fn render(&self) -> String {
        let e = &self.encoder;
        let mut s = String::new();
        s += &format!("featurizer            {:>12}\n", self.featurizer);
        s += &format!("encoder.input         {:>12}\n", e.input);
        s += &format!("encoder.rel_pos       {:>12}\n", e.rel_pos);
        s += &format!("encoder.blocks        {:>12}\n", e.blocks);
        s += &format!("encoder.output        {:>12}\n", e.output);
        s += &format!(
            "trainable             {:>12}  ({:+.2}% vs claimed {})\n",
            self.trainable,
            100.0 * self.trainable_deviation(),
            self.claimed_trainable
        );
        s += &format!("non_trainable         {:>12}  (codebook dim as configured)\n", self.non_trainable);
        s += &format!("non_trainable@hidden  {:>12}  (codebook dim = encoder.hidden)\n", self.non_trainable_hidden_dim);
        s += &format!("claimed_non_trainable {:>12}\n", self.claimed_non_trainable);
        if self.non_trainable_discrepancy() {
            let alt = if near(self.non_trainable_hidden_dim, self.claimed_non_trainable) {
                "the hidden-dim reading is within 10%"
            } else {
                "neither reading is within 10%"
            };
            s += &format!("DISCREPANCY: configured frozen count differs from the claim; {alt}\n");
        }
        s += &format!("size_mb               {:>12.1}\n", self.size_mb);
        s
    }
}

fn near(n: usize, claim: usize) -> bool {
    (n as f64 / claim as f64 - 1.0).abs() <= 0.1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_counts() {
        let r = count_params(&RunConfig::default());
        assert_eq!(r.trainable, 95_963_072);
        assert!(r.trainable_deviation().abs() < 0.03);
        assert_eq!(r.non_trainable, 139_264);
        assert_eq!(r.non_trainable_hidden_dim, (512 + 8192) * 768);
        assert!(r.non_trainable_discrepancy());
        assert!(r.render().contains("DISCREPANCY"));
    }

    #[test]
    fn store_matches_closed_form() {
        let cfg = RunConfig::desk();
        let m = Model::new(&cfg).unwrap();
        assert_eq!(m.params.numel(), count_params(&cfg).trainable);
        assert_eq!(m.quantizer.num_params(), count_params(&cfg).non_trainable);
    }
}
