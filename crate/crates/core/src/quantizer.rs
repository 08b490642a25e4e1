//! Frozen random-projection quantizer producing integer training targets.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureFrames;
use crate::params::hex;
use crate::rng::{stream_rng, Stream};

/// Label carried by padding frames.
pub const INVALID_LABEL: u32 = u32::MAX;

const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    /// Dimension of each code vector.
    pub code_dim: usize,
    /// Number of codes.
    pub vocab: usize,
    pub normalize: bool,
    /// Standardize each feature dimension over the batch's valid frames
    /// before projecting.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            code_dim: 16,
            vocab: 8192,
            normalize: true,
            standardize: true,
            seed: 0,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.code_dim == 0 {
            return Err(Error::config("quantizer.code_dim", "must be positive"));
        }
        if self.vocab == 0 || self.vocab >= INVALID_LABEL as usize {
            return Err(Error::config("quantizer.vocab", format!("{} out of range", self.vocab)));
        }
        Ok(())
    }
}

/// Projection `D_in x d` and codebook `V x d`, both fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomQuantizer {
    projection: Array2<f64>,
    codebook: Array2<f64>,
    seed: u64,
    normalize: bool,
    standardize: bool,
}

/// `B x T'` labels; padding frames hold [`INVALID_LABEL`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFrames {
    pub labels: Array2<u32>,
    pub valid_frames: Vec<usize>,
}

impl LabelFrames {
    pub fn valid_labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.labels
            .rows()
            .into_iter()
            .zip(&self.valid_frames)
            .flat_map(|(row, &v)| row.into_iter().take(v).copied().collect::<Vec<_>>())
    }
}

impl RandomQuantizer {
    /// Xavier-uniform projection; standard-normal codebook rows, unit-normalized
    /// when `normalize`.
    pub fn new(seed: u64, input_dim: usize, code_dim: usize, vocab: usize, normalize: bool) -> Result<Self> {
        if input_dim == 0 || code_dim == 0 || vocab == 0 {
            return Err(Error::InvalidArgument("quantizer dimensions must be positive".into()));
        }
        let mut rng = stream_rng(seed, Stream::Quantizer, 0);
        let bound = (6.0 / (input_dim + code_dim) as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((input_dim, code_dim), || rng.gen_range(-bound..=bound));
        let mut codebook: Array2<f64> = Array2::from_shape_simple_fn((vocab, code_dim), || StandardNormal.sample(&mut rng));
        if normalize {
            for mut row in codebook.rows_mut() {
                let n = row.dot(&row).sqrt();
                row.mapv_inplace(|v| v / n);
            }
        }
        Ok(Self {
            projection,
            codebook,
            seed,
            normalize,
            standardize: true,
        })
    }

    pub fn from_config(cfg: &QuantizerConfig, input_dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::new(cfg.seed, input_dim, cfg.code_dim, cfg.vocab, cfg.normalize)?.with_standardize(cfg.standardize))
    }

    /// Rebuilds from stored matrices.
    pub fn from_parts(
        projection: Array2<f64>,
        codebook: Array2<f64>,
        seed: u64,
        normalize: bool,
        standardize: bool,
    ) -> Result<Self> {
        if projection.ncols() != codebook.ncols() {
            return Err(Error::Shape(format!(
                "projection has {} columns, codebook rows have {}",
                projection.ncols(),
                codebook.ncols()
            )));
        }
        Ok(Self {
            projection,
            codebook,
            seed,
            normalize,
            standardize,
        })
    }

    pub fn with_standardize(mut self, on: bool) -> Self {
        self.standardize = on;
        self
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    pub fn codebook(&self) -> &Array2<f64> {
        &self.codebook
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn standardize(&self) -> bool {
        self.standardize
    }

    pub fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn code_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn vocab(&self) -> usize {
        self.codebook.nrows()
    }

    /// Non-trainable scalar count.
    pub fn num_params(&self) -> usize {
        self.projection.len() + self.codebook.len()
    }

    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.projection.iter().chain(self.codebook.iter()) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Projects one (already standardized) frame into code space.
    pub fn project(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut y = x.dot(&self.projection);
        if self.normalize {
            let n = y.dot(&y).sqrt();
            if n > 0.0 {
                y.mapv_inplace(|v| v / n);
            }
        }
        y
    }

    /// Index of the nearest code by squared Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, y: ArrayView1<f64>) -> u32 {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (v, code) in self.codebook.rows().into_iter().enumerate() {
            let d: f64 = code.iter().zip(y.iter()).map(|(c, x)| (x - c) * (x - c)).sum();
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        best as u32
    }

    pub fn quantize(&self, f: &FeatureFrames) -> Result<LabelFrames> {
        if f.dim() != self.input_dim() {
            return Err(Error::Shape(format!(
                "features have dimension {}, quantizer expects {}",
                f.dim(),
                self.input_dim()
            )));
        }
        let stats = self.standardize.then(|| feature_stats(f));
        let (b, t, _) = f.values.dim();
        let mut labels = Array2::from_elem((b, t), INVALID_LABEL);
        for i in 0..b {
            let frames = f.values.index_axis(Axis(0), i);
            for j in 0..f.valid_frames[i].min(t) {
                let x = frames.row(j);
                let y = match &stats {
                    Some((mean, inv_std)) => self.project(((&x - mean) * inv_std).view()),
                    None => self.project(x),
                };
                labels[[i, j]] = self.nearest(y.view());
            }
        }
        Ok(LabelFrames {
            labels,
            valid_frames: f.valid_frames.clone(),
        })
    }
}

pub fn init_quantizer(seed: u64, input_dim: usize, code_dim: usize, vocab: usize, normalize: bool) -> Result<RandomQuantizer> {
    RandomQuantizer::new(seed, input_dim, code_dim, vocab, normalize)
}

pub fn quantize(f: &FeatureFrames, q: &RandomQuantizer) -> Result<LabelFrames> {
    q.quantize(f)
}

/// Per-dimension mean and inverse standard deviation over all valid frames.
pub fn feature_stats(f: &FeatureFrames) -> (Array1<f64>, Array1<f64>) {
    let d = f.dim();
    let mut sum = Array1::<f64>::zeros(d);
    let mut n = 0usize;
    for (frames, &v) in f.values.outer_iter().zip(&f.valid_frames) {
        for row in frames.rows().into_iter().take(v) {
            sum += &row;
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean = sum / n;
    let mut var = Array1::<f64>::zeros(d);
    for (frames, &v) in f.values.outer_iter().zip(&f.valid_frames) {
        for row in frames.rows().into_iter().take(v) {
            let c = &row - &mean;
            var += &(&c * &c);
        }
    }
    let inv_std = (var / n).mapv(|v| 1.0 / (v + STANDARDIZE_EPS).sqrt());
    (mean, inv_std)
}

/// Counts of valid-frame labels over `[0, vocab)`.
pub fn label_histogram(l: &LabelFrames, vocab: usize) -> Vec<u64> {
    let mut hist = vec![0u64; vocab];
    for label in l.valid_labels() {
        hist[label as usize] += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureSource;
    use ndarray::{array, Array3};

    fn frames(values: Array3<f64>) -> FeatureFrames {
        let (b, t, _) = values.dim();
        FeatureFrames {
            values,
            frame_period: 0.02,
            valid_frames: vec![t; b],
            source: FeatureSource::Conv,
        }
    }

    #[test]
    fn deterministic_and_normalized() {
        let a = init_quantizer(7, 12, 4, 32, true).unwrap();
        let b = init_quantizer(7, 12, 4, 32, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a, init_quantizer(8, 12, 4, 32, true).unwrap());
        for row in a.codebook().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(a.projection().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn default_dims_scalar_count() {
        let q = init_quantizer(0, 512, 16, 8192, true).unwrap();
        assert_eq!(q.num_params(), 8192 * 16 + 512 * 16);
        assert_eq!(q.num_params(), 139_264);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        // codes 2 and 5 are e0 and e1; the query sits on their bisector
        let mut codebook = Array2::from_elem((8, 2), 0.0);
        for (v, row) in codebook.rows_mut().into_iter().enumerate() {
            let angle = 2.0 + v as f64;
            let mut row = row;
            row[0] = -angle.cos().abs() - 1.0;
            row[1] = -angle.sin().abs() - 1.0;
        }
        codebook.row_mut(2).assign(&array![1.0, 0.0]);
        codebook.row_mut(5).assign(&array![0.0, 1.0]);
        let q = RandomQuantizer::from_parts(Array2::eye(2), codebook, 0, true, false).unwrap();
        let y = array![1.0, 1.0];
        assert_eq!(q.nearest(q.project(y.view()).view()), 2);
    }

    #[test]
    fn exact_code_wins() {
        let q = init_quantizer(1, 3, 3, 16, true).unwrap().with_standardize(false);
        // with an invertible square projection, choose x so that normalize(xP) = c_k
        let p = q.projection().clone();
        let k = 11;
        let target = q.codebook().row(k).to_owned();
        let x = solve3(&p, &target);
        let f = frames(x.into_shape_with_order((1, 1, 3)).unwrap());
        assert_eq!(q.quantize(&f).unwrap().labels[[0, 0]], k as u32);
    }

    /// Solves `x P = c` for a 3x3 `P` by Cramer's rule.
    fn solve3(p: &Array2<f64>, c: &Array1<f64>) -> Array1<f64> {
        let m = p.t().to_owned();
        let det = |a: &Array2<f64>| {
            a[[0, 0]] * (a[[1, 1]] * a[[2, 2]] - a[[1, 2]] * a[[2, 1]])
                - a[[0, 1]] * (a[[1, 0]] * a[[2, 2]] - a[[1, 2]] * a[[2, 0]])
                + a[[0, 2]] * (a[[1, 0]] * a[[2, 1]] - a[[1, 1]] * a[[2, 0]])
        };
        let d = det(&m);
        Array1::from_shape_fn(3, |i| {
            let mut mi = m.clone();
            mi.column_mut(i).assign(c);
            det(&mi) / d
        })
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let q = init_quantizer(0, 4, 2, 8, true).unwrap();
        let f = frames(Array3::zeros((1, 3, 5)));
        assert!(matches!(q.quantize(&f), Err(Error::Shape(_))));
    }

    #[test]
    fn padding_frames_get_sentinel_and_histogram_counts_valid_only() {
        let q = init_quantizer(0, 4, 2, 8, true).unwrap();
        let mut f = frames(Array3::from_shape_fn((2, 5, 4), |(b, t, d)| (b * 7 + t * 3 + d) as f64 * 0.1));
        f.valid_frames = vec![5, 2];
        let l = q.quantize(&f).unwrap();
        assert!(l.labels.row(1).iter().skip(2).all(|&v| v == INVALID_LABEL));
        let h = label_histogram(&l, 8);
        assert_eq!(h.iter().sum::<u64>(), 7);
    }

    #[test]
    fn histogram_edge_cases() {
        let l = LabelFrames {
            labels: Array2::from_elem((2, 3), 3),
            valid_frames: vec![3, 3],
        };
        assert_eq!(label_histogram(&l, 5), vec![0, 0, 0, 6, 0]);
        let empty = LabelFrames {
            labels: Array2::from_elem((1, 0), 0),
            valid_frames: vec![0],
        };
        assert_eq!(label_histogram(&empty, 4), vec![0; 4]);
    }

    #[test]
    fn constant_features_collapse_to_one_code() {
        let q = init_quantizer(3, 4, 3, 16, true).unwrap();
        let f = frames(Array3::from_elem((2, 6, 4), 0.25));
        let l = q.quantize(&f).unwrap();
        let first = l.labels[[0, 0]];
        assert!(l.labels.iter().all(|&v| v == first));
    }
}
