//! Span masking over feature frames.

use ndarray::{Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureFrames;
use crate::rng::{stream_rng, Rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskParams {
    /// Probability that a valid frame starts a span.
    pub mask_prob: f64,
    /// Span duration in seconds.
    pub mask_time: f64,
    /// Seconds per frame step used to convert `mask_time` into frames.
    pub stride_time: f64,
    /// Std of the Gaussian noise written into masked frames.
    pub noise_std: f64,
    /// Replace masked frames with a trained vector instead of noise.
    pub learned_embedding: bool,
    pub seed: u64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            mask_prob: 0.01,
            mask_time: 0.4,
            stride_time: 0.01,
            noise_std: 0.1,
            learned_embedding: false,
            seed: 0,
        }
    }
}

impl MaskParams {
    pub fn span_frames(&self) -> Result<usize> {
        let ratio = self.mask_time / self.stride_time;
        let span = ratio.round();
        if !(span >= 1.0) {
            return Err(Error::MaskSpanTooShort(ratio));
        }
        Ok(span as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config("masking.mask_prob", format!("{} is not a probability", self.mask_prob)));
        }
        if !(self.mask_time > 0.0) {
            return Err(Error::config("masking.mask_time", format!("{} must be > 0", self.mask_time)));
        }
        if !(self.stride_time > 0.0) {
            return Err(Error::config("masking.stride_time", format!("{} must be > 0", self.stride_time)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("masking.noise_std", "must be >= 0"));
        }
        self.span_frames()
            .map_err(|e| Error::config("masking.mask_time", e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// `B x T'`
    pub mask: Array2<bool>,
    pub starts: Vec<Vec<usize>>,
    pub span_frames: usize,
}

impl MaskSpec {
    pub fn empty(batch: usize, frames: usize, span_frames: usize) -> Self {
        Self {
            mask: Array2::from_elem((batch, frames), false),
            starts: vec![Vec::new(); batch],
            span_frames,
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Samples span masks for a batch with `valid_frames[b]` valid frames out of
/// `total_frames`, using the stream derived from `p.seed`.
pub fn make_masks(valid_frames: &[usize], total_frames: usize, p: &MaskParams) -> Result<MaskSpec> {
    make_masks_with(valid_frames, total_frames, p, &mut stream_rng(p.seed, Stream::Mask, 0))
}

pub fn make_masks_with(valid_frames: &[usize], total_frames: usize, p: &MaskParams, rng: &mut Rng) -> Result<MaskSpec> {
    let span = p.span_frames()?;
    if let Some(&v) = valid_frames.iter().find(|&&v| v == 0 || v > total_frames) {
        return Err(Error::InvalidArgument(format!(
            "valid frame count {v} outside 1..={total_frames}"
        )));
    }
    let mut spec = MaskSpec::empty(valid_frames.len(), total_frames, span);
    for (b, &valid) in valid_frames.iter().enumerate() {
        let mut starts: Vec<usize> = (0..valid).filter(|_| rng.gen::<f64>() < p.mask_prob).collect();
        if starts.is_empty() {
            starts.push(rng.gen_range(0..valid));
        }
        let mut row = spec.mask.row_mut(b);
        for &s in &starts {
            for t in s..(s + span).min(valid) {
                row[t] = true;
            }
        }
        spec.starts[b] = starts;
    }
    Ok(spec)
}

/// Replaces masked frames with i.i.d. `N(0, noise_std^2)` values. The noise
/// drawn for a position depends only on `seed` and the position.
pub fn apply_mask(f: &FeatureFrames, m: &MaskSpec, noise_std: f64, seed: u64) -> Result<FeatureFrames> {
    let (b, t, _) = f.values.dim();
    if m.mask.dim() != (b, t) {
        return Err(Error::Shape(format!(
            "mask is {:?}, features are {b}x{t}",
            m.mask.dim()
        )));
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = f.clone();
    for (i, mut frames) in out.values.axis_iter_mut(Axis(0)).enumerate() {
        let mut rng = stream_rng(seed, Stream::MaskNoise, i as u64);
        for (j, mut row) in frames.rows_mut().into_iter().enumerate() {
            if m.mask[[i, j]] {
                row.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        }
    }
    Ok(out)
}

/// Probability that an interior frame is covered by at least one span.
pub fn interior_coverage(mask_prob: f64, span_frames: usize) -> f64 {
    1.0 - (1.0 - mask_prob).powi(span_frames as i32)
}
