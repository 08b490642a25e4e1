//! Layers with hand-written backward passes. Each `forward` returns the
//! activations its `backward` needs; gradients accumulate into [`Grads`].

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::params::{Grads, ParamId, ParamStore};
use crate::rng::Rng;

pub const NORM_EPS: f64 = 1e-5;

/// `y = x W^T + b` on row-major `(rows, in)` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.normal(format!("{name}.weight"), &[out_dim, in_dim], std, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&p.v2(self.weight).t());
        if let Some(b) = self.bias {
            y += &p.v1(b);
        }
        y
    }

    /// Returns `dL/dx`.
    pub fn backward(&self, p: &ParamStore, g: &mut Grads, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        g.m2(self.weight).scaled_add(1.0, &dy.t().dot(&x));
        if let Some(b) = self.bias {
            g.m1(b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        }
        dy.dot(&p.v2(self.weight))
    }
}

/// Normalizes each row over its last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), &[dim]),
            beta: store.zeros(format!("{name}.beta"), &[dim]),
            dim,
        }
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<f64>) -> (Array2<f64>, NormCache) {
        let (xhat, inv_std) = standardize_rows(x);
        let y = &xhat * &p.v1(self.gamma) + &p.v1(self.beta);
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &NormCache, dy: ArrayView2<f64>) -> Array2<f64> {
        g.m1(self.gamma).scaled_add(1.0, &(&dy * &cache.xhat).sum_axis(Axis(0)));
        g.m1(self.beta).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let dxhat = &dy * &p.v1(self.gamma);
        standardize_rows_backward(&cache.xhat, &cache.inv_std, dxhat.view())
    }
}

/// Per-channel normalization over time for `(channels, time)` inputs, i.e.
/// group norm with one group per channel.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), &[channels]),
            beta: store.zeros(format!("{name}.beta"), &[channels]),
            channels,
        }
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<f64>) -> (Array2<f64>, NormCache) {
        let (xhat, inv_std) = standardize_rows(x);
        let gamma = p.v1(self.gamma).insert_axis(Axis(1));
        let beta = p.v1(self.beta).insert_axis(Axis(1));
        let y = &xhat * &gamma + &beta;
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &NormCache, dy: ArrayView2<f64>) -> Array2<f64> {
        g.m1(self.gamma).scaled_add(1.0, &(&dy * &cache.xhat).sum_axis(Axis(1)));
        g.m1(self.beta).scaled_add(1.0, &dy.sum_axis(Axis(1)));
        let gamma = p.v1(self.gamma).insert_axis(Axis(1));
        let dxhat = &dy * &gamma;
        standardize_rows_backward(&cache.xhat, &cache.inv_std, dxhat.view())
    }
}

fn standardize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *inv = 1.0 / (var + NORM_EPS).sqrt();
        row.mapv_inplace(|v| v * *inv);
    }
    (xhat, inv_std)
}

fn standardize_rows_backward(xhat: &Array2<f64>, inv_std: &Array1<f64>, dxhat: ArrayView2<f64>) -> Array2<f64> {
    let n = xhat.ncols() as f64;
    let mut dx = Array2::zeros(xhat.raw_dim());
    for ((mut out, (xh, dxh)), inv) in dx
        .rows_mut()
        .into_iter()
        .zip(xhat.rows().into_iter().zip(dxhat.rows()))
        .zip(inv_std.iter())
    {
        let mean_d = dxh.sum() / n;
        let mean_dx = xh.dot(&dxh) / n;
        for ((o, &a), &d) in out.iter_mut().zip(xh.iter()).zip(dxh.iter()) {
            *o = inv * (d - mean_d - a * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn log_softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

/// Bias-free strided 1-D convolution over `(channels, time)`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_len: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        // He-normal, matching GELU stacks
        let std = (2.0 / (in_ch * kernel) as f64).sqrt();
        let weight = store.normal(format!("{name}.weight"), &[out_ch, in_ch, kernel], std, rng);
        Self {
            weight,
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn out_len(&self, in_len: usize) -> Option<usize> {
        conv_out_len(in_len, self.kernel, self.stride)
    }

    fn im2col(&self, x: ArrayView2<f64>, out_len: usize) -> Array2<f64> {
        let k = self.kernel;
        let mut cols = Array2::zeros((self.in_ch * k, out_len));
        for c in 0..self.in_ch {
            let xr = x.row(c);
            for j in 0..k {
                let mut dst = cols.row_mut(c * k + j);
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = xr[t * self.stride + j];
                }
            }
        }
        cols
    }

    fn flat_weight<'a>(&self, p: &'a ParamStore) -> ArrayView2<'a, f64> {
        p.v3(self.weight)
            .into_shape_with_order((self.out_ch, self.in_ch * self.kernel))
            .expect("contiguous conv weight")
    }

    /// `x` is `(in_ch, time)`; returns `(out_ch, out_time)`.
    pub fn forward(&self, p: &ParamStore, x: ArrayView2<f64>) -> (Array2<f64>, ConvCache) {
        let out_len = self.out_len(x.ncols()).expect("caller checks receptive field");
        let cols = self.im2col(x, out_len);
        let y = self.flat_weight(p).dot(&cols);
        (
            y,
            ConvCache {
                cols,
                in_len: x.ncols(),
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &ConvCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let dw = dy.dot(&cache.cols.t()).as_standard_layout().into_owned();
        let dw = dw
            .into_shape_with_order((self.out_ch, self.in_ch, self.kernel))
            .expect("contiguous");
        g.m3(self.weight).scaled_add(1.0, &dw);

        let dcols = self.flat_weight(p).t().dot(&dy);
        let k = self.kernel;
        let mut dx = Array2::zeros((self.in_ch, cache.in_len));
        for c in 0..self.in_ch {
            let mut dxr = dx.row_mut(c);
            for j in 0..k {
                let src = dcols.row(c * k + j);
                for (t, &v) in src.iter().enumerate() {
                    dxr[t * self.stride + j] += v;
                }
            }
        }
        dx
    }
}

/// `floor((len - kernel) / stride) + 1`, or `None` when the input is shorter
/// than the kernel.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (len >= kernel).then(|| (len - kernel) / stride + 1)
}

/// Inverted dropout mask; `None` when `p == 0`.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Option<Array2<f64>> {
    use rand::Rng as _;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_simple_fn((rows, cols), || {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

/// Copies `src` rows into the leading rows of a zero matrix with `rows` rows.
pub fn pad_rows(src: ArrayView2<f64>, rows: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, src.ncols()));
    out.slice_mut(s![..src.nrows(), ..]).assign(&src);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn conv_lengths() {
        assert_eq!(conv_out_len(400, 400, 320), Some(1));
        assert_eq!(conv_out_len(399, 400, 320), None);
        assert_eq!(conv_out_len(224_000, 10, 5), Some(44_799));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 2, 3, 3, 2, &mut rng);
        let x = Array2::from_shape_fn((2, 9), |(c, t)| (c as f64 + 1.0) * (t as f64 * 0.3).cos());
        let (y, _) = conv.forward(&store, x.view());
        let w = store.v3(conv.weight);
        assert_eq!(y.dim(), (3, 4));
        for o in 0..3 {
            for t in 0..4 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for j in 0..3 {
                        acc += w[[o, c, j]] * x[[c, 2 * t + j]];
                    }
                }
                assert!((acc - y[[o, t]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_handles_fully_masked_rows() {
        let mut m = Array2::from_elem((1, 3), f64::NEG_INFINITY);
        softmax_rows(&mut m);
        assert!(m.iter().all(|&v| v == 0.0));
    }
}
