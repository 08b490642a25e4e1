//! Codebook health and target-quality measurements.

use ndarray::Array3;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::audio::AudioBatch;
use crate::error::{Error, Result};
use crate::features::{logmel_featurize, ConvFeaturizer, FeatureFrames, LogMelConfig};
use crate::params::ParamStore;
use crate::quantizer::{label_histogram, QuantizerConfig, RandomQuantizer};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CodebookStats {
    /// Share of codes with a nonzero count.
    pub utilization: f64,
    pub entropy_bits: f64,
    /// `2^entropy_bits`
    pub perplexity: f64,
}

pub fn codebook_stats(hist: &[u64]) -> Result<CodebookStats> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let used = hist.iter().filter(|&&c| c > 0).count();
    let entropy_bits: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum();
    let entropy_bits = entropy_bits.max(0.0);
    Ok(CodebookStats {
        utilization: used as f64 / hist.len() as f64,
        entropy_bits,
        perplexity: entropy_bits.exp2(),
    })
}

/// Mean fraction of valid-frame labels unchanged after adding `N(0, eps^2)`
/// noise to the features, over `trials` draws from the perturbation stream
/// of `seed`.
pub fn label_stability(f: &FeatureFrames, q: &RandomQuantizer, eps: f64, trials: usize, seed: u64) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps {eps} must be >= 0")));
    }
    let base = q.quantize(f)?;
    let total = f.total_valid();
    if trials == 0 || total == 0 {
        return Ok(1.0);
    }
    let normal = Normal::new(0.0, eps).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut agree = 0.0;
    for trial in 0..trials {
        let mut rng = stream_rng(seed, Stream::Perturb, trial as u64);
        let mut g = f.clone();
        g.values.mapv_inplace(|v| v + normal.sample(&mut rng));
        let l = q.quantize(&g)?;
        let same = base.valid_labels().zip(l.valid_labels()).filter(|(a, b)| a == b).count();
        agree += same as f64 / total as f64;
    }
    Ok(agree / trials as f64)
}

/// Target statistics for one featurizer path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetReport {
    pub featurizer: String,
    pub standardize: bool,
    pub input_dim: usize,
    pub frames: usize,
    pub stats: CodebookStats,
    pub stability: f64,
}

/// Side-by-side reports for one quantizer seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeaturizerComparison {
    pub quantizer_seed: u64,
    pub conv: TargetReport,
    /// Conv path with per-batch standardization switched off.
    pub conv_unstandardized: TargetReport,
    pub logmel: TargetReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    /// Headline numbers from the first seed's conv path.
    pub utilization: f64,
    pub entropy_bits: f64,
    pub perplexity: f64,
    pub stability: f64,
    pub eps: f64,
    pub comparisons: Vec<FeaturizerComparison>,
    pub config_echo: String,
}

/// What the target comparison runs on.
pub struct TargetInputs<'a> {
    pub batch: &'a AudioBatch,
    pub conv: &'a ConvFeaturizer,
    pub conv_params: &'a ParamStore,
    pub logmel: &'a LogMelConfig,
    pub quantizer: &'a QuantizerConfig,
    pub eps: f64,
    pub trials: usize,
}

fn target_report(f: &FeatureFrames, q: &RandomQuantizer, name: &str, eps: f64, trials: usize, seed: u64) -> Result<TargetReport> {
    if f.dim() != q.input_dim() {
        return Err(Error::Shape(format!(
            "{name} features have dimension {}, quantizer expects {}",
            f.dim(),
            q.input_dim()
        )));
    }
    let labels = q.quantize(f)?;
    Ok(TargetReport {
        featurizer: name.to_string(),
        standardize: q.standardize(),
        input_dim: q.input_dim(),
        frames: f.total_valid(),
        stats: codebook_stats(&label_histogram(&labels, q.vocab()))?,
        stability: label_stability(f, q, eps, trials, seed)?,
    })
}

/// Runs the same audio through both featurizers and quantizers built from
/// each seed in `seeds`, dimensioned per featurizer.
pub fn featurizer_target_report(inputs: &TargetInputs<'_>, seeds: &[u64]) -> Result<Vec<FeaturizerComparison>> {
    if inputs.batch.batch_size() == 0 {
        return Err(Error::EmptyAudio);
    }
    let conv = inputs.conv.featurize(inputs.conv_params, inputs.batch)?;
    let logmel = logmel_featurize(inputs.batch, inputs.logmel)?;
    seeds
        .iter()
        .map(|&seed| {
            let qc = QuantizerConfig {
                seed,
                ..inputs.quantizer.clone()
            };
            let q_conv = RandomQuantizer::from_config(&qc, conv.dim())?;
            let q_mel = RandomQuantizer::from_config(&qc, logmel.dim())?;
            let (e, n) = (inputs.eps, inputs.trials);
            Ok(FeaturizerComparison {
                quantizer_seed: seed,
                conv: target_report(&conv, &q_conv, "conv", e, n, seed)?,
                conv_unstandardized: target_report(&conv, &q_conv.clone().with_standardize(false), "conv", e, n, seed)?,
                logmel: target_report(&logmel, &q_mel, "logmel", e, n, seed)?,
            })
        })
        .collect()
}

pub fn diagnostics_report(comparisons: Vec<FeaturizerComparison>, eps: f64, config_echo: String) -> Result<DiagnosticsReport> {
    let head = comparisons
        .first()
        .ok_or_else(|| Error::InvalidArgument("no quantizer seeds".into()))?;
    Ok(DiagnosticsReport {
        utilization: head.conv.stats.utilization,
        entropy_bits: head.conv.stats.entropy_bits,
        perplexity: head.conv.stats.perplexity,
        stability: head.conv.stability,
        eps,
        comparisons,
        config_echo,
    })
}

impl DiagnosticsReport {
    /// Human-readable summary table.
    pub fn render(&self) -> String {
        let mut s = format!("diagnostics (eps = {})\n", self.eps);
        s += "seed      path               util    H(bits)  perplexity  stability\n";
        for c in &self.comparisons {
            for (label, r) in [
                ("conv", &c.conv),
                ("conv (raw)", &c.conv_unstandardized),
                ("logmel", &c.logmel),
            ] {
                s += &format!(
                    "{:<9} {:<16} {:>7.4} {:>9.4} {:>11.2} {:>10.4}\n",
                    c.quantizer_seed, label, r.stats.utilization, r.stats.entropy_bits, r.stats.perplexity, r.stability
                );
            }
        }
        s
    }
}

/// Zero-valued frames, handy for building fixtures.
pub fn constant_frames(batch: usize, frames: usize, dim: usize, value: f64) -> FeatureFrames {
    FeatureFrames {
        values: Array3::from_elem((batch, frames, dim), value),
        frame_period: 0.02,
        valid_frames: vec![frames; batch],
        source: crate::features::FeatureSource::Conv,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_histograms() {
        let mut one = vec![0u64; 8192];
        one[17] = 500;
        let s = codebook_stats(&one).unwrap();
        assert_eq!(s.utilization, 1.0 / 8192.0);
        assert_eq!(s.entropy_bits, 0.0);
        assert_eq!(s.perplexity, 1.0);

        let s = codebook_stats(&[3u64; 16]).unwrap();
        assert_eq!(s.utilization, 1.0);
        assert_eq!(s.entropy_bits, 4.0);
        assert_eq!(s.perplexity, 16.0);

        let s = codebook_stats(&[2, 1, 1, 0]).unwrap();
        assert_eq!(s.utilization, 0.75);
        assert_eq!(s.entropy_bits, 1.5);
        assert!((s.perplexity - 2.0f64.powf(1.5)).abs() < 1e-15);

        assert!(matches!(codebook_stats(&[0, 0]), Err(Error::EmptyHistogram)));
    }

    #[test]
    fn zero_eps_is_fully_stable() {
        let q = RandomQuantizer::new(1, 4, 3, 8, true).unwrap();
        let mut f = constant_frames(2, 30, 4, 0.0);
        f.values.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        assert_eq!(label_stability(&f, &q, 0.0, 3, 0).unwrap(), 1.0);
        assert!(label_stability(&f, &q, -1.0, 3, 0).is_err());
    }
}
