//! Fixtures shared by the criterion benches.

use ndarray::Array3;
use rqwav_core::audio::{trim_pad, AudioBatch};
use rqwav_core::features::{FeatureFrames, FeatureSource};
use rqwav_core::rng::{stream_rng, Stream};
use rqwav_core::synth::synthetic_corpus;
use rqwav_core::{Model, Result, RunConfig};

/// Desk-scale config with the given batch size.
pub fn desk_config(batch_size: usize) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.train.batch_size = batch_size;
    cfg
}

/// A padded batch of synthetic audio at `cfg.data.target_len`.
pub fn audio_batch(cfg: &RunConfig, items: usize) -> Result<AudioBatch> {
    let corpus = synthetic_corpus(items, [0.8, 1.2], 7)?;
    let mut rng = stream_rng(0, Stream::Trim, 0);
    let padded = corpus
        .iter()
        .map(|w| trim_pad(w, cfg.data.target_len, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    AudioBatch::from_padded(padded)
}

/// Deterministic pseudo-random frames, all valid.
pub fn feature_frames(batch: usize, frames: usize, dim: usize) -> FeatureFrames {
    let values = Array3::from_shape_fn((batch, frames, dim), |(b, t, d)| {
        ((b * 131 + t * 17 + d * 7) as f64 * 0.61803).sin()
    });
    FeatureFrames {
        values,
        frame_period: 0.02,
        valid_frames: vec![frames; batch],
        source: FeatureSource::Conv,
    }
}

pub fn model(cfg: &RunConfig) -> Result<Model> {
    Model::new(cfg)
}
