//! Waveform featurizers: a strided convolution stack over raw samples and a
//! log-Mel filterbank front end.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBatch, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, conv_out_len, ChannelNorm, Conv1d, ConvCache, LayerNorm, NormCache};
use crate::params::{Grads, ParamStore};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Conv,
    Logmel,
}

/// `B x T' x D` frames. Frames at or past `valid_frames[b]` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrames {
    pub values: Array3<f64>,
    /// Seconds per frame.
    pub frame_period: f64,
    pub valid_frames: Vec<usize>,
    pub source: FeatureSource,
}

impl FeatureFrames {
    pub fn batch_size(&self) -> usize {
        self.values.dim().0
    }

    pub fn num_frames(&self) -> usize {
        self.values.dim().1
    }

    pub fn dim(&self) -> usize {
        self.values.dim().2
    }

    pub fn total_valid(&self) -> usize {
        self.valid_frames.iter().sum()
    }
}

/// Frame-count arithmetic shared by both featurizers.
pub trait FrameArithmetic {
    /// Output frames for an input of `len` samples, `None` if too short.
    fn out_frames(&self, len: usize) -> Option<usize>;

    /// Number of frames computed from non-padding audio: the full frame
    /// arithmetic applied to `valid_len`, with at least one frame.
    fn frame_validity(&self, valid_len: usize, target_len: usize) -> usize {
        let total = self.out_frames(target_len).unwrap_or(0);
        self.out_frames(valid_len).unwrap_or(0).clamp(1, total.max(1))
    }
}

/// Featurizer selection plus the geometry of both front ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturizerConfig {
    pub kind: FeatureSource,
    pub conv: ConvFeaturizerConfig,
    pub logmel: LogMelConfig,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            kind: FeatureSource::Conv,
            conv: ConvFeaturizerConfig::default(),
            logmel: LogMelConfig::default(),
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        self.logmel.validate()
    }

    pub fn out_dim(&self) -> usize {
        match self.kind {
            FeatureSource::Conv => self.conv.out_dim(),
            FeatureSource::Logmel => self.logmel.n_mels,
        }
    }

    pub fn frame_period(&self) -> f64 {
        match self.kind {
            FeatureSource::Conv => self.conv.frame_period(),
            FeatureSource::Logmel => self.logmel.hop,
        }
    }

    /// Shortest input producing one frame.
    pub fn min_samples(&self) -> usize {
        match self.kind {
            FeatureSource::Conv => self.conv.receptive_field(),
            FeatureSource::Logmel => self.logmel.win_samples(),
        }
    }
}

impl FrameArithmetic for FeaturizerConfig {
    fn out_frames(&self, len: usize) -> Option<usize> {
        match self.kind {
            FeatureSource::Conv => self.conv.out_frames(len),
            FeatureSource::Logmel => self.logmel.out_frames(len),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvNorm {
    /// Per-channel group norm after the first layer only.
    Group,
    /// Layer norm over channels after every layer.
    Layer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvFeaturizerConfig {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub norm: ConvNorm,
}

impl Default for ConvFeaturizerConfig {
    fn default() -> Self {
        Self {
            channels: vec![512; 7],
            kernels: vec![10, 3, 3, 3, 3, 2, 2],
            strides: vec![5, 2, 2, 2, 2, 2, 2],
            norm: ConvNorm::Group,
        }
    }
}

impl ConvFeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 {
            return Err(Error::config("featurizer.conv.channels", "at least one layer required"));
        }
        if self.kernels.len() != n || self.strides.len() != n {
            return Err(Error::config(
                "featurizer.conv",
                format!(
                    "channels/kernels/strides lengths differ ({n}/{}/{})",
                    self.kernels.len(),
                    self.strides.len()
                ),
            ));
        }
        for (key, v) in [
            ("featurizer.conv.channels", &self.channels),
            ("featurizer.conv.kernels", &self.kernels),
            ("featurizer.conv.strides", &self.strides),
        ] {
            if v.contains(&0) {
                return Err(Error::config(key, "entries must be positive"));
            }
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Samples per frame.
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for (&k, &s) in self.kernels.iter().zip(&self.strides) {
            rf += (k - 1) * jump;
            jump *= s;
        }
        rf
    }

    pub fn frame_period(&self) -> f64 {
        self.total_stride() as f64 / SAMPLE_RATE as f64
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        let mut in_ch = 1;
        for (i, (&c, &k)) in self.channels.iter().zip(&self.kernels).enumerate() {
            n += c * in_ch * k;
            if i == 0 || self.norm == ConvNorm::Layer {
                n += 2 * c;
            }
            in_ch = c;
        }
        n
    }
}

impl FrameArithmetic for ConvFeaturizerConfig {
    fn out_frames(&self, len: usize) -> Option<usize> {
        self.kernels
            .iter()
            .zip(&self.strides)
            .try_fold(len, |l, (&k, &s)| conv_out_len(l, k, s))
    }
}

#[derive(Debug, Clone)]
enum ConvLayerNorm {
    Channel(ChannelNorm),
    Frame(LayerNorm),
}

/// The trainable convolutional featurizer. Parameters live in a shared
/// [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ConvFeaturizer {
    pub cfg: ConvFeaturizerConfig,
    convs: Vec<Conv1d>,
    norms: Vec<Option<ConvLayerNorm>>,
}

struct LayerCache {
    conv: ConvCache,
    norm: Option<NormCache>,
    pre_act: Array2<f64>,
}

/// Activations from one item's forward pass.
pub struct ConvItemCache {
    layers: Vec<LayerCache>,
    frames: usize,
}

impl ConvFeaturizer {
    pub fn new(store: &mut ParamStore, cfg: &ConvFeaturizerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_ch = 1;
        for (i, ((&c, &k), &s)) in cfg.channels.iter().zip(&cfg.kernels).zip(&cfg.strides).enumerate() {
            convs.push(Conv1d::new(store, &format!("featurizer.conv{i}"), in_ch, c, k, s, rng));
            let norm = match cfg.norm {
                ConvNorm::Group if i == 0 => Some(ConvLayerNorm::Channel(ChannelNorm::new(
                    store,
                    &format!("featurizer.norm{i}"),
                    c,
                ))),
                ConvNorm::Layer => Some(ConvLayerNorm::Frame(LayerNorm::new(
                    store,
                    &format!("featurizer.norm{i}"),
                    c,
                ))),
                ConvNorm::Group => None,
            };
            norms.push(norm);
            in_ch = c;
        }
        Ok(Self {
            cfg: cfg.clone(),
            convs,
            norms,
        })
    }

    fn check_len(&self, len: usize) -> Result<usize> {
        self.cfg.out_frames(len).ok_or(Error::ShorterThanReceptiveField {
            len,
            receptive_field: self.cfg.receptive_field(),
        })
    }

    /// First-layer convolution output before normalization, `(channels, time)`.
    pub fn first_layer_linear(&self, p: &ParamStore, samples: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_len(samples.len())?;
        let x = samples.insert_axis(Axis(0));
        Ok(self.convs[0].forward(p, x).0)
    }

    /// One waveform to `(frames, channels)`.
    pub fn forward_item(&self, p: &ParamStore, samples: ArrayView1<f64>) -> Result<(Array2<f64>, ConvItemCache)> {
        self.check_len(samples.len())?;
        let mut h = samples.insert_axis(Axis(0)).to_owned();
        let mut layers = Vec::with_capacity(self.convs.len());
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let (y, conv_cache) = conv.forward(p, h.view());
            let (pre_act, norm_cache) = match norm {
                None => (y, None),
                Some(ConvLayerNorm::Channel(n)) => {
                    let (z, c) = n.forward(p, y.view());
                    (z, Some(c))
                }
                Some(ConvLayerNorm::Frame(n)) => {
                    let (z, c) = n.forward(p, y.t());
                    (z.reversed_axes(), Some(c))
                }
            };
            h = pre_act.mapv(gelu);
            layers.push(LayerCache {
                conv: conv_cache,
                norm: norm_cache,
                pre_act,
            });
        }
        let frames = h.ncols();
        Ok((h.reversed_axes().as_standard_layout().into_owned(), ConvItemCache { layers, frames }))
    }

    /// Backpropagates `d_frames` (`frames x channels`) into the conv weights.
    /// Rows past the frames the item produced are ignored.
    pub fn backward_item(&self, p: &ParamStore, g: &mut Grads, cache: &ConvItemCache, d_frames: ArrayView2<f64>) {
        let mut dh = d_frames.slice(s![..cache.frames, ..]).t().to_owned();
        for ((conv, norm), lc) in self.convs.iter().zip(&self.norms).zip(&cache.layers).rev() {
            let dpre = &dh * &lc.pre_act.mapv(gelu_grad);
            let dy = match (norm, &lc.norm) {
                (None, _) => dpre,
                (Some(ConvLayerNorm::Channel(n)), Some(c)) => n.backward(p, g, c, dpre.view()),
                (Some(ConvLayerNorm::Frame(n)), Some(c)) => {
                    n.backward(p, g, c, dpre.t()).reversed_axes()
                }
                _ => unreachable!("norm cache recorded for every normalized layer"),
            };
            dh = conv.backward(p, g, &lc.conv, dy.view());
        }
    }

    pub fn featurize(&self, p: &ParamStore, batch: &AudioBatch) -> Result<FeatureFrames> {
        Ok(self.featurize_with_cache(p, batch)?.0)
    }

    pub fn featurize_with_cache(&self, p: &ParamStore, batch: &AudioBatch) -> Result<(FeatureFrames, Vec<ConvItemCache>)> {
        let t = self.check_len(batch.target_len())?;
        let b = batch.batch_size();
        let mut values = Array3::zeros((b, t, self.cfg.out_dim()));
        let mut caches = Vec::with_capacity(b);
        // Each item sees only its own samples (at least one receptive field),
        // so normalization statistics never include padding.
        let rf = self.cfg.receptive_field();
        for (i, row) in batch.items.rows().into_iter().enumerate() {
            let used = batch.valid_len[i].max(rf).min(batch.target_len());
            let (f, c) = self.forward_item(p, row.slice(s![..used]))?;
            values.slice_mut(s![i, ..f.nrows(), ..]).assign(&f);
            caches.push(c);
        }
        let valid_frames = batch
            .valid_len
            .iter()
            .map(|&v| self.cfg.frame_validity(v, batch.target_len()))
            .collect();
        Ok((
            FeatureFrames {
                values,
                frame_period: self.cfg.frame_period(),
                valid_frames,
                source: FeatureSource::Conv,
            },
            caches,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogMelConfig {
    pub n_mels: usize,
    /// Window length in seconds.
    pub win: f64,
    /// Hop in seconds.
    pub hop: f64,
    pub n_fft: usize,
    pub log_floor: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            win: 0.025,
            hop: 0.010,
            n_fft: 512,
            log_floor: 1e-10,
        }
    }
}

impl LogMelConfig {
    pub fn win_samples(&self) -> usize {
        (self.win * SAMPLE_RATE as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop * SAMPLE_RATE as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::config("featurizer.logmel.n_mels", "must be positive"));
        }
        if self.win_samples() == 0 || self.hop_samples() == 0 {
            return Err(Error::config("featurizer.logmel.win", "window and hop must cover a sample"));
        }
        if self.n_fft < self.win_samples() {
            return Err(Error::config(
                "featurizer.logmel.n_fft",
                format!("{} shorter than the {}-sample window", self.n_fft, self.win_samples()),
            ));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("featurizer.logmel.log_floor", "must be positive"));
        }
        Ok(())
    }
}

impl FrameArithmetic for LogMelConfig {
    fn out_frames(&self, len: usize) -> Option<usize> {
        conv_out_len(len, self.win_samples(), self.hop_samples())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// HTK-scale triangular filters, `n_mels x (n_fft/2 + 1)`, spanning 0 Hz to Nyquist.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    Array2::from_shape_fn((n_mels, n_bins), |(m, k)| {
        let f = k as f64 * sample_rate as f64 / n_fft as f64;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let up = (f - lo) / (mid - lo);
        let down = (hi - f) / (hi - mid);
        up.min(down).max(0.0)
    })
}

/// Center frequency in Hz of each Mel band.
pub fn mel_centers(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Log-Mel front end with precomputed window, filterbank and FFT plan.
pub struct LogMel {
    pub cfg: LogMelConfig,
    window: Vec<f64>,
    filterbank: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel").field("cfg", &self.cfg).finish()
    }
}

impl LogMel {
    pub fn new(cfg: &LogMelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.win_samples();
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            window,
            filterbank: mel_filterbank(cfg.n_mels, cfg.n_fft, SAMPLE_RATE),
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
        })
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    /// Power spectrum of every frame, `frames x (n_fft/2 + 1)`.
    pub fn power_spectrogram(&self, samples: ArrayView1<f64>) -> Result<Array2<f64>> {
        let frames = self.cfg.out_frames(samples.len()).ok_or(Error::ShorterThanReceptiveField {
            len: samples.len(),
            receptive_field: self.cfg.win_samples(),
        })?;
        let hop = self.cfg.hop_samples();
        let n_bins = self.cfg.n_fft / 2 + 1;
        let mut out = Array2::zeros((frames, n_bins));
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        for (t, mut row) in out.rows_mut().into_iter().enumerate() {
            buf.fill(Complex::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                buf[i].re = samples[t * hop + i] * w;
            }
            self.fft.process(&mut buf);
            for (dst, c) in row.iter_mut().zip(&buf[..n_bins]) {
                *dst = c.norm_sqr();
            }
        }
        Ok(out)
    }

    /// One waveform to `(frames, n_mels)` natural-log Mel energies.
    pub fn forward_item(&self, samples: ArrayView1<f64>) -> Result<Array2<f64>> {
        let power = self.power_spectrogram(samples)?;
        let floor = self.cfg.log_floor;
        Ok(power.dot(&self.filterbank.t()).mapv(|e| e.max(floor).ln()))
    }

    pub fn featurize(&self, batch: &AudioBatch) -> Result<FeatureFrames> {
        let t = self.cfg.out_frames(batch.target_len()).ok_or(Error::ShorterThanReceptiveField {
            len: batch.target_len(),
            receptive_field: self.cfg.win_samples(),
        })?;
        let mut values = Array3::zeros((batch.batch_size(), t, self.cfg.n_mels));
        for (i, row) in batch.items.rows().into_iter().enumerate() {
            values.index_axis_mut(Axis(0), i).assign(&self.forward_item(row)?);
        }
        Ok(FeatureFrames {
            values,
            frame_period: self.cfg.hop,
            valid_frames: batch
                .valid_len
                .iter()
                .map(|&v| self.cfg.frame_validity(v, batch.target_len()))
                .collect(),
            source: FeatureSource::Logmel,
        })
    }
}

/// Convenience wrapper over [`LogMel::featurize`].
pub fn logmel_featurize(batch: &AudioBatch, cfg: &LogMelConfig) -> Result<FeatureFrames> {
    LogMel::new(cfg)?.featurize(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::DEFAULT_TARGET_LEN;
    use ndarray::Array1;
    use rand::SeedableRng;

    /// Layer-by-layer `floor((L - k) / s) + 1`.
    fn oracle_frames(mut len: i64, kernels: &[i64], strides: &[i64]) -> i64 {
        for (k, s) in kernels.iter().zip(strides) {
            len = (len - k).div_euclid(*s) + 1;
        }
        len
    }

    #[test]
    fn default_geometry() {
        let cfg = ConvFeaturizerConfig::default();
        assert_eq!(cfg.total_stride(), 320);
        assert_eq!(cfg.receptive_field(), 400);
        assert!((cfg.frame_period() - 0.02).abs() < 1e-15);
        let k = [10, 3, 3, 3, 3, 2, 2];
        let s = [5, 2, 2, 2, 2, 2, 2];
        assert_eq!(oracle_frames(224_000, &k, &s), 699);
        assert_eq!(cfg.out_frames(DEFAULT_TARGET_LEN), Some(699));
        assert_eq!(oracle_frames(160_000, &k, &s), 499);
        assert_eq!(cfg.frame_validity(160_000, DEFAULT_TARGET_LEN), 499);
        assert_eq!(cfg.frame_validity(DEFAULT_TARGET_LEN, DEFAULT_TARGET_LEN), 699);
        assert_eq!(cfg.frame_validity(1, DEFAULT_TARGET_LEN), 1);
        assert_eq!(cfg.out_frames(399), None);
    }

    fn tiny_cfg(norm: ConvNorm) -> ConvFeaturizerConfig {
        ConvFeaturizerConfig {
            channels: vec![4, 6, 5],
            kernels: vec![4, 3, 2],
            strides: vec![2, 2, 2],
            norm,
        }
    }

    #[test]
    fn too_short_input_rejected() {
        let mut store = ParamStore::new();
        let f = ConvFeaturizer::new(&mut store, &tiny_cfg(ConvNorm::Group), &mut Rng::seed_from_u64(0)).unwrap();
        let x = Array1::zeros(5);
        let err = f.forward_item(&store, x.view()).err().unwrap();
        assert!(err.to_string().starts_with("input shorter than receptive field"));
    }

    #[test]
    fn first_layer_is_linear_in_amplitude() {
        let mut store = ParamStore::new();
        let f = ConvFeaturizer::new(&mut store, &tiny_cfg(ConvNorm::Group), &mut Rng::seed_from_u64(0)).unwrap();
        let zero = f.first_layer_linear(&store, Array1::zeros(64).view()).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let x = Array1::from_shape_fn(64, |i| (i as f64 * 0.37).sin());
        let y1 = f.first_layer_linear(&store, x.view()).unwrap();
        let y2 = f.first_layer_linear(&store, (&x * 2.0).view()).unwrap();
        for (a, b) in y1.iter().zip(y2.iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_by_total_stride_shifts_one_frame() {
        let cfg = tiny_cfg(ConvNorm::Layer);
        let mut store = ParamStore::new();
        let f = ConvFeaturizer::new(&mut store, &cfg, &mut Rng::seed_from_u64(3)).unwrap();
        let n = 200;
        let stride = cfg.total_stride();
        let x = Array1::from_shape_fn(n, |i| (i as f64 * 0.21).sin() + 0.3 * (i as f64 * 0.05).cos());
        let mut shifted = Array1::zeros(n);
        shifted.slice_mut(ndarray::s![stride..]).assign(&x.slice(ndarray::s![..n - stride]));
        let (a, _) = f.forward_item(&store, x.view()).unwrap();
        let (b, _) = f.forward_item(&store, shifted.view()).unwrap();
        let t = a.nrows();
        for j in 0..t - 1 {
            for c in 0..a.ncols() {
                assert!((a[[j, c]] - b[[j + 1, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn filterbank_peaks_at_centers() {
        let fb = mel_filterbank(80, 512, 16_000);
        assert_eq!(fb.dim(), (80, 257));
        assert!(fb.iter().all(|&w| (0.0..=1.0).contains(&w)));
        // every band sees at least one FFT bin
        assert!(fb.rows().into_iter().all(|r| r.sum() > 0.0));
        let centers = mel_centers(80, 16_000);
        assert!((hz_to_mel(centers[79]) - hz_to_mel(8000.0) * 80.0 / 81.0).abs() < 1e-9);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn silence_gives_log_floor() {
        let lm = LogMel::new(&LogMelConfig::default()).unwrap();
        let out = lm.forward_item(Array1::zeros(1600).view()).unwrap();
        assert_eq!(out.dim(), (1 + (1600 - 400) / 160, 80));
        let floor = 1e-10f64.ln();
        assert!(out.iter().all(|&v| v == floor));
    }

    #[test]
    fn sign_flip_invariance() {
        let lm = LogMel::new(&LogMelConfig::default()).unwrap();
        let mut rng = Rng::seed_from_u64(9);
        let x = Array1::from_shape_fn(3200, |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let a = lm.forward_item(x.view()).unwrap();
        let b = lm.forward_item((-&x).view()).unwrap();
        assert_eq!(a, b);
    }
}
