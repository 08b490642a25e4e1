//! Waveform loading, fixed-length trimming, utterance mixing and batching.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng, Stream};

pub const SAMPLE_RATE: u32 = 16_000;

/// 14 s at 16 kHz.
pub const DEFAULT_TARGET_LEN: usize = 14 * SAMPLE_RATE as usize;

/// Mono 16 kHz audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// A fixed-length batch. Samples past `valid_len[i]` are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBatch {
    /// `B x target_len`
    pub items: Array2<f64>,
    pub valid_len: Vec<usize>,
    pub mixed_flags: Vec<bool>,
}

impl AudioBatch {
    pub fn new(items: Array2<f64>, valid_len: Vec<usize>) -> Result<Self> {
        let (b, len) = items.dim();
        if valid_len.len() != b {
            return Err(Error::Shape(format!(
                "{} valid lengths for {} items",
                valid_len.len(),
                b
            )));
        }
        if let Some(&v) = valid_len.iter().find(|&&v| v > len || v == 0) {
            return Err(Error::InvalidArgument(format!(
                "valid_len {v} outside 1..={len}"
            )));
        }
        Ok(Self {
            items,
            mixed_flags: vec![false; b],
            valid_len,
        })
    }

    /// Stacks already padded waveforms.
    pub fn from_padded(padded: Vec<(Waveform, usize)>) -> Result<Self> {
        let b = padded.len();
        let len = padded.first().map(|(w, _)| w.len()).unwrap_or(0);
        let mut items = Array2::zeros((b, len));
        let mut valid = Vec::with_capacity(b);
        for (i, (w, v)) in padded.into_iter().enumerate() {
            if w.len() != len {
                return Err(Error::Shape("batch items differ in length".into()));
            }
            items
                .row_mut(i)
                .iter_mut()
                .zip(w.samples())
                .for_each(|(d, s)| *d = *s);
            valid.push(v);
        }
        Self::new(items, valid)
    }

    pub fn batch_size(&self) -> usize {
        self.items.nrows()
    }

    pub fn target_len(&self) -> usize {
        self.items.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    pub utterance_mix_prob: f64,
    /// Upper bound on the mixed region as a fraction of the primary's valid length.
    pub max_region_fraction: f64,
    /// Primary-to-secondary energy ratio range in dB.
    pub energy_ratio_db: [f64; 2],
    pub noise_mix_prob: f64,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            utterance_mix_prob: 0.2,
            max_region_fraction: 0.5,
            energy_ratio_db: [-5.0, 5.0],
            noise_mix_prob: 0.0,
            seed: 0,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, p) in [
            ("mix.utterance_mix_prob", self.utterance_mix_prob),
            ("mix.noise_mix_prob", self.noise_mix_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, format!("{p} is not a probability")));
            }
        }
        if !(self.max_region_fraction > 0.0 && self.max_region_fraction <= 1.0) {
            return Err(Error::config(
                "mix.max_region_fraction",
                format!("{} not in (0, 1]", self.max_region_fraction),
            ));
        }
        let [lo, hi] = self.energy_ratio_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::config(
                "mix.energy_ratio_db",
                format!("[{lo}, {hi}] is not an interval"),
            ));
        }
        Ok(())
    }
}

/// Cuts or zero-pads `w` to exactly `target_len` samples.
///
/// Returns the new waveform and its count of non-padding samples. Longer
/// inputs are cropped at a start offset drawn uniformly from all valid starts.
pub fn trim_pad(w: &Waveform, target_len: usize, rng: &mut Rng) -> Result<(Waveform, usize)> {
    if w.is_empty() {
        return Err(Error::EmptyAudio);
    }
    if target_len == 0 {
        return Err(Error::InvalidArgument("target_len must be positive".into()));
    }
    let n = w.len();
    let out = match n.cmp(&target_len) {
        std::cmp::Ordering::Equal => (w.clone(), n),
        std::cmp::Ordering::Greater => {
            let start = rng.gen_range(0..=n - target_len);
            let cut = w.samples[start..start + target_len].to_vec();
            (Waveform { samples: cut }, target_len)
        }
        std::cmp::Ordering::Less => {
            let mut padded = Vec::with_capacity(target_len);
            padded.extend_from_slice(&w.samples);
            padded.resize(target_len, 0.0);
            (Waveform { samples: padded }, n)
        }
    };
    Ok(out)
}

fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

fn sample_region_len(valid: usize, max_fraction: f64, rng: &mut Rng) -> usize {
    let max_len = ((valid as f64 * max_fraction).floor() as usize).clamp(1, valid);
    rng.gen_range(1..=max_len)
}

fn scale_for_ratio(primary_energy: f64, secondary_energy: f64, ratio_db: f64) -> f64 {
    if secondary_energy <= 0.0 {
        return 0.0;
    }
    (primary_energy / (secondary_energy * 10f64.powf(ratio_db / 10.0))).sqrt()
}

/// Overlays regions of other batch items onto randomly selected items.
///
/// Uses the random stream derived from `cfg.seed`; see [`mix_utterances_with`]
/// for an explicit generator.
pub fn mix_utterances(batch: &AudioBatch, cfg: &MixConfig) -> Result<AudioBatch> {
    let mut rng = stream_rng(cfg.seed, Stream::Mix, 0);
    mix_utterances_with(batch, cfg, &mut rng)
}

pub fn mix_utterances_with(batch: &AudioBatch, cfg: &MixConfig, rng: &mut Rng) -> Result<AudioBatch> {
    cfg.validate()?;
    let b = batch.batch_size();
    if b < 2 && cfg.utterance_mix_prob > 0.0 {
        return Err(Error::InsufficientBatch(b));
    }
    let [db_lo, db_hi] = cfg.energy_ratio_db;
    let mut out = batch.clone();

    for i in 0..b {
        let valid = batch.valid_len[i];
        let select_utt = rng.gen::<f64>() < cfg.utterance_mix_prob;
        let select_noise = rng.gen::<f64>() < cfg.noise_mix_prob;
        if !(select_utt || select_noise) {
            continue;
        }
        let primary_energy = mean_square(&batch.items.row(i).as_slice().unwrap()[..valid]);

        if select_utt {
            // uniform over the other b - 1 items
            let mut j = rng.gen_range(0..b - 1);
            if j >= i {
                j += 1;
            }
            let other_valid = batch.valid_len[j];
            let len = sample_region_len(valid, cfg.max_region_fraction, rng).min(other_valid);
            let dst = rng.gen_range(0..=valid - len);
            let src = rng.gen_range(0..=other_valid - len);
            let ratio_db = if db_hi > db_lo { rng.gen_range(db_lo..=db_hi) } else { db_lo };

            let secondary = batch.items.row(j);
            let secondary = &secondary.as_slice().unwrap()[src..src + len];
            let scale = scale_for_ratio(primary_energy, mean_square(secondary), ratio_db);
            let mut row = out.items.row_mut(i);
            for (k, s) in secondary.iter().enumerate() {
                row[dst + k] += scale * s;
            }
        }
        if select_noise {
            let len = sample_region_len(valid, cfg.max_region_fraction, rng);
            let dst = rng.gen_range(0..=valid - len);
            let ratio_db = if db_hi > db_lo { rng.gen_range(db_lo..=db_hi) } else { db_lo };
            let noise: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
            let scale = scale_for_ratio(primary_energy, mean_square(&noise), ratio_db);
            let mut row = out.items.row_mut(i);
            for (k, s) in noise.iter().enumerate() {
                row[dst + k] += scale * s;
            }
        }
        out.mixed_flags[i] = true;
    }
    Ok(out)
}

/// Shuffles `corpus` and groups it into full batches of `batch_size`
/// trimmed/padded items; the trailing partial batch is dropped.
pub fn make_batches(
    corpus: &[Waveform],
    batch_size: usize,
    target_len: usize,
    seed: u64,
) -> Result<Vec<AudioBatch>> {
    if corpus.is_empty() {
        return Err(Error::EmptyAudio);
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, 0));

    order
        .chunks_exact(batch_size)
        .enumerate()
        .map(|(bi, idx)| {
            let mut rng = stream_rng(seed, Stream::Trim, bi as u64);
            let padded = idx
                .iter()
                .map(|&k| trim_pad(&corpus[k], target_len, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            AudioBatch::from_padded(padded)
        })
        .collect()
}

/// Reads a 16-bit PCM mono 16 kHz WAV file.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let unsupported = |reason: String| Error::UnsupportedAudio {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| unsupported(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(unsupported(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(unsupported(format!(
            "sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            spec.sample_rate
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "{:?} {}-bit samples, expected 16-bit PCM",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| unsupported(e.to_string()))?;
    Waveform::new(samples).map_err(|_| unsupported("no samples".into()))
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| Error::UnsupportedAudio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in w.samples() {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(v).map_err(io)?;
    }
    writer.finalize().map_err(io)
}

/// One audio path per line; blank lines and `#` comments are skipped.
/// Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let p = PathBuf::from(line);
        out.push(if p.is_absolute() { p } else { base.join(p) });
    }
    Ok(out)
}

pub fn load_corpus(manifest: &Path) -> Result<Vec<Waveform>> {
    read_manifest(manifest)?.iter().map(|p| load_wav(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| (i as f64 * 1e-3).sin()).collect()).unwrap()
    }

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    #[test]
    fn empty_audio_rejected() {
        assert!(matches!(Waveform::new(vec![]), Err(Error::EmptyAudio)));
    }

    #[test]
    fn trim_pad_identity_when_lengths_match() {
        let w = ramp(224_000);
        let (out, valid) = trim_pad(&w, 224_000, &mut rng(0)).unwrap();
        assert_eq!(out, w);
        assert_eq!(valid, 224_000);
    }

    #[test]
    fn trim_pad_appends_exact_zeros() {
        let w = ramp(160_000);
        let (out, valid) = trim_pad(&w, DEFAULT_TARGET_LEN, &mut rng(0)).unwrap();
        assert_eq!(out.len(), 224_000);
        assert_eq!(valid, 160_000);
        assert_eq!(&out.samples()[..160_000], w.samples());
        assert!(out.samples()[160_000..].iter().all(|s| s.to_bits() == 0));
        assert_eq!(out.samples().len() - valid, 64_000);
    }

    #[test]
    fn trim_window_is_contiguous_and_seeded() {
        let w = ramp(300_000);
        let (a, _) = trim_pad(&w, 224_000, &mut rng(5)).unwrap();
        let (b, _) = trim_pad(&w, 224_000, &mut rng(5)).unwrap();
        assert_eq!(a, b);
        let start = (0..=76_000)
            .find(|&s| w.samples()[s..s + 224_000] == *a.samples())
            .expect("window must be a contiguous slice");
        assert!(start <= 76_000);
    }

    #[test]
    fn trim_start_covers_both_ends() {
        // all starts in [0, 4] should appear for a 5-sample slack
        let w = ramp(12);
        let mut seen = [false; 5];
        let mut r = rng(1);
        for _ in 0..500 {
            let (out, _) = trim_pad(&w, 8, &mut r).unwrap();
            let s = (0..5).find(|&s| w.samples()[s..s + 8] == *out.samples()).unwrap();
            seen[s] = true;
        }
        assert!(seen.iter().all(|&x| x));
    }

    fn toy_batch(b: usize, len: usize) -> AudioBatch {
        let padded = (0..b)
            .map(|i| {
                let w = Waveform::new(
                    (0..len - i).map(|t| ((t + 3 * i) as f64 * 0.01).sin()).collect(),
                )
                .unwrap();
                trim_pad(&w, len, &mut rng(0)).unwrap()
            })
            .collect();
        AudioBatch::from_padded(padded).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let batch = toy_batch(4, 256);
        let cfg = MixConfig {
            utterance_mix_prob: 0.0,
            ..Default::default()
        };
        let out = mix_utterances(&batch, &cfg).unwrap();
        assert_eq!(out, batch);
        assert!(out.mixed_flags.iter().all(|f| !f));
    }

    #[test]
    fn single_item_batch_cannot_mix() {
        let batch = toy_batch(1, 64);
        let err = mix_utterances(&batch, &MixConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientBatch(1)));
        assert!(err.to_string().starts_with("insufficient batch for mixing"));
    }

    #[test]
    fn silent_secondary_leaves_primary_unchanged() {
        let mut batch = toy_batch(2, 128);
        batch.items.row_mut(1).fill(0.0);
        let cfg = MixConfig {
            utterance_mix_prob: 1.0,
            ..Default::default()
        };
        let out = mix_utterances(&batch, &cfg).unwrap();
        assert!(out.mixed_flags[0]);
        assert_eq!(out.items.row(0), batch.items.row(0));
    }

    #[test]
    fn mixing_respects_padding_and_unselected_items() {
        let batch = toy_batch(6, 300);
        let cfg = MixConfig {
            utterance_mix_prob: 0.5,
            seed: 11,
            ..Default::default()
        };
        let out = mix_utterances(&batch, &cfg).unwrap();
        for i in 0..6 {
            let v = batch.valid_len[i];
            assert!(out.items.row(i).iter().skip(v).all(|s| s.to_bits() == 0));
            if !out.mixed_flags[i] {
                assert_eq!(out.items.row(i), batch.items.row(i));
            }
        }
        assert_eq!(out, mix_utterances(&batch, &cfg).unwrap());
    }

    #[test]
    fn noise_path_adds_noise_when_enabled() {
        let batch = toy_batch(2, 400);
        let cfg = MixConfig {
            utterance_mix_prob: 0.0,
            noise_mix_prob: 1.0,
            ..Default::default()
        };
        let out = mix_utterances(&batch, &cfg).unwrap();
        assert!(out.mixed_flags.iter().all(|&f| f));
        assert_ne!(out.items, batch.items);
    }

    #[test]
    fn batching_counts() {
        let corpus: Vec<_> = (0..60).map(|i| ramp(100 + i)).collect();
        assert_eq!(make_batches(&corpus[..50], 25, 128, 0).unwrap().len(), 2);
        let batches = make_batches(&corpus, 25, 128, 0).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.batch_size() == 25 && b.target_len() == 128));
        assert_eq!(batches, make_batches(&corpus, 25, 128, 0).unwrap());
        assert_ne!(batches, make_batches(&corpus, 25, 128, 1).unwrap());
        assert!(make_batches(&corpus, 0, 128, 0).is_err());
    }

    #[test]
    fn wav_round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 0.25]).unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &w).unwrap();
        assert_eq!(load_wav(&p).unwrap(), w);

        let stereo = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let q = dir.path().join("b.wav");
        let mut wr = hound::WavWriter::create(&q, stereo).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        let err = load_wav(&q).unwrap_err().to_string();
        assert!(err.contains("mono"), "{err}");

        let m = dir.path().join("manifest.txt");
        std::fs::write(&m, "# corpus\na.wav\n\n").unwrap();
        assert_eq!(load_corpus(&m).unwrap(), vec![w]);
    }
}
