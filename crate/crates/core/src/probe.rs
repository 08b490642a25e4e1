//! Linear probing over a learned softmax-weighted sum of frozen encoder layers.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBatch, Waveform};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::log_softmax;
use crate::params::ParamStore;
use crate::rng::{stream_rng, Stream};
use crate::train::AdamW;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// One example per utterance: the mean over valid frames.
    Mean,
    /// One example per valid frame, labeled with its utterance's class.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub num_classes: usize,
    pub pooling: Pooling,
    pub lr: f64,
    pub steps: usize,
    /// Share of utterances held out for testing.
    pub test_fraction: f64,
    /// Utterances per class in the generated toy dataset.
    pub per_class: usize,
    pub seconds: [f64; 2],
    /// Permute training and test labels (no-signal control).
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            pooling: Pooling::Mean,
            lr: 0.01,
            steps: 300,
            test_fraction: 0.5,
            per_class: 40,
            seconds: [0.5, 0.8],
            shuffle_labels: false,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("probe.num_classes", "need at least two classes"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("probe.lr", "must be > 0"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("probe.test_fraction", "must lie in (0, 1)"));
        }
        if !(self.seconds[0] > 0.0 && self.seconds[0] <= self.seconds[1]) {
            return Err(Error::config("probe.seconds", "need 0 < min <= max"));
        }
        Ok(())
    }
}

fn softmax(w: &[f64]) -> Vec<f64> {
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `sum_l softmax(weights)_l * layer_states[l]`.
pub fn weighted_layer_sum(out: &EncoderOutput, weights: &[f64]) -> Result<Array3<f64>> {
    if weights.len() != out.layer_states.len() {
        return Err(Error::Shape(format!(
            "{} layer weights for {} layer states",
            weights.len(),
            out.layer_states.len()
        )));
    }
    let s = softmax(weights);
    let mut acc = Array3::zeros(out.layer_states[0].raw_dim());
    for (state, &si) in out.layer_states.iter().zip(&s) {
        acc.scaled_add(si, state);
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub chance: f64,
    pub train_examples: usize,
    pub test_examples: usize,
    /// Softmax-normalized learned layer weights.
    pub layer_weights: Vec<f64>,
    pub encoder_fingerprint_before: String,
    pub encoder_fingerprint_after: String,
    pub shuffled_labels: bool,
}

impl ProbeReport {
    pub fn frozen(&self) -> bool {
        self.encoder_fingerprint_before == self.encoder_fingerprint_after
    }
}

/// Per-example stacked layer features, `(layers + 1) x hidden`.
fn extract(model: &Model, wav: &Waveform, pooling: Pooling) -> Result<Vec<Array2<f64>>> {
    let len = wav.len();
    let items = Array2::from_shape_vec((1, len), wav.samples().to_vec()).expect("one row");
    let batch = AudioBatch::new(items, vec![len])?;
    let f = model.featurize(&batch)?;
    let valid = f.valid_frames[0];
    let out = model.encoder.encode(&model.params, &f, None)?;
    let layers: Vec<_> = out.layer_states.iter().map(|s| s.index_axis(Axis(0), 0)).collect();
    let stack = |rows: &[usize]| {
        let mut x = Array2::zeros((layers.len(), model.encoder.cfg.hidden));
        for (l, s) in layers.iter().enumerate() {
            for &t in rows {
                x.row_mut(l).scaled_add(1.0 / rows.len() as f64, &s.row(t));
            }
        }
        x
    };
    Ok(match pooling {
        Pooling::Mean => vec![stack(&(0..valid).collect::<Vec<_>>())],
        Pooling::None => (0..valid).map(|t| stack(&[t])).collect(),
    })
}

struct Example {
    x: Array2<f64>,
    y: usize,
}

/// Trains layer weights and a linear classifier on frozen features of
/// `data`; the model is only read.
pub fn probe_train(model: &Model, data: &[(Waveform, usize)], cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    if let Some((_, y)) = data.iter().find(|(_, y)| *y >= cfg.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "class count mismatch: label {y} with num_classes {}",
            cfg.num_classes
        )));
    }
    if data.len() < 2 {
        return Err(Error::InvalidArgument("probe needs at least two utterances".into()));
    }
    let before = model.params.fingerprint();

    let mut rng = stream_rng(cfg.seed, Stream::Probe, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut labels: Vec<usize> = data.iter().map(|(_, y)| *y).collect();
    if cfg.shuffle_labels {
        labels.shuffle(&mut stream_rng(cfg.seed, Stream::Probe, 1));
    }
    let n_test = ((data.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, data.len() - 1);
    let (test_idx, train_idx) = order.split_at(n_test);

    let collect = |idx: &[usize]| -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for &i in idx {
            for x in extract(model, &data[i].0, cfg.pooling)? {
                out.push(Example { x, y: labels[i] });
            }
        }
        Ok(out)
    };
    let mut train = collect(train_idx)?;
    let mut test = collect(test_idx)?;

    // per-layer standardization with training statistics
    let n = train.len() as f64;
    let mean: Array2<f64> = train.iter().fold(Array2::zeros(train[0].x.raw_dim()), |a, e| a + &e.x) / n;
    let var = train
        .iter()
        .fold(Array2::zeros(mean.raw_dim()), |a, e| a + (&e.x - &mean).mapv(|v| v * v))
        / n;
    let inv_std = var.mapv(|v: f64| 1.0 / (v + 1e-8).sqrt());
    for e in train.iter_mut().chain(test.iter_mut()) {
        e.x = (&e.x - &mean) * &inv_std;
    }

    let (layers, hidden) = mean.dim();
    let c = cfg.num_classes;
    let mut p = ParamStore::new();
    let w_id = p.zeros("probe.layer_weights", &[layers]);
    let cls_id = p.zeros("probe.classifier.weight", &[c, hidden]);
    let b_id = p.zeros("probe.classifier.bias", &[c]);
    let mut opt = AdamW::new(&p, [0.9, 0.999], 1e-8, 0.0);

    let forward = |p: &ParamStore, e: &Example| {
        let s = softmax(p.v1(w_id).as_slice().expect("contiguous"));
        let z: Array1<f64> = s.iter().enumerate().fold(Array1::zeros(hidden), |a, (l, &sl)| a + &(sl * &e.x.row(l)));
        let logits = p.v2(cls_id).dot(&z) + &p.v1(b_id);
        (s, z, logits)
    };
    let accuracy = |p: &ParamStore, set: &[Example]| {
        let hits = set
            .iter()
            .filter(|e| {
                let (_, _, l) = forward(p, e);
                let best = (0..c).fold(0, |b, k| if l[k] > l[b] { k } else { b });
                best == e.y
            })
            .count();
        hits as f64 / set.len().max(1) as f64
    };

    for _ in 0..cfg.steps {
        let mut g = p.zero_grads();
        for e in &train {
            let (s, z, logits) = forward(&p, e);
            let mut d = log_softmax(logits.view()).mapv(f64::exp);
            d[e.y] -= 1.0;
            d /= n;
            let dz = p.v2(cls_id).t().dot(&d);
            {
                let mut gw = g.m2(cls_id);
                for k in 0..c {
                    gw.row_mut(k).scaled_add(d[k], &z);
                }
            }
            g.m1(b_id).scaled_add(1.0, &d);
            let ds: Vec<f64> = (0..layers).map(|l| e.x.row(l).dot(&dz)).collect();
            let sds: f64 = s.iter().zip(&ds).map(|(a, b)| a * b).sum();
            let mut gl = g.m1(w_id);
            for l in 0..layers {
                gl[l] += s[l] * (ds[l] - sds);
            }
        }
        opt.step(&mut p, &g, cfg.lr);
    }

    let after = model.params.fingerprint();
    Ok(ProbeReport {
        train_accuracy: accuracy(&p, &train),
        test_accuracy: accuracy(&p, &test),
        chance: 1.0 / c as f64,
        train_examples: train.len(),
        test_examples: test.len(),
        layer_weights: softmax(p.v1(w_id).as_slice().expect("contiguous")),
        encoder_fingerprint_before: before,
        encoder_fingerprint_after: after,
        shuffled_labels: cfg.shuffle_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_layer_output() -> EncoderOutput {
        let s0 = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s1 = Array3::from_shape_vec((1, 2, 2), vec![-1.0, 0.0, 5.0, 8.0]).unwrap();
        EncoderOutput {
            layer_states: vec![s0, s1],
            logits: Array3::zeros((1, 2, 3)),
        }
    }

    #[test]
    fn quarter_three_quarters() {
        let out = two_layer_output();
        // softmax(0, ln 3) = (0.25, 0.75)
        let y = weighted_layer_sum(&out, &[0.0, 3f64.ln()]).unwrap();
        let expect = &out.layer_states[0] * 0.25 + &out.layer_states[1] * 0.75;
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_weights_average_and_saturation_selects() {
        let out = two_layer_output();
        let y = weighted_layer_sum(&out, &[2.0, 2.0]).unwrap();
        assert_eq!(y.index_axis(Axis(0), 0), array![[0.0, 1.0], [4.0, 6.0]]);
        let y = weighted_layer_sum(&out, &[0.0, 1e3]).unwrap();
        assert_eq!(y, out.layer_states[1]);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(weighted_layer_sum(&two_layer_output(), &[0.0]).is_err());
    }
}
