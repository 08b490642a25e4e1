//! Pre-norm Transformer encoder with gated relative position bias.
//!
//! The bias for query `t` and key `s` in head `h` is
//! `gate(t, h) * E[bucket(s - t), h]`, where `E` is a bucket embedding shared
//! by all layers and the gate is computed per layer from the query frame's
//! normalized input:
//!
//! ```text
//! z      = W_g u_h(t) + b_g                 (8 outputs)
//! a, b   = sigmoid(sum z[0..4]), sigmoid(sum z[4..8])
//! gate   = a * (b * c_h - 1) + 2
//! ```

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureFrames;
use crate::masking::MaskSpec;
use crate::nn::{dropout_mask, gelu, gelu_grad, sigmoid, softmax_rows, LayerNorm, Linear, NormCache};
use crate::params::{Grads, ParamId, ParamStore};
use crate::rng::{stream_rng, Rng, Stream};

const INIT_STD: f64 = 0.02;
/// Logit scale of the freshly initialized output head, independent of width.
const HEAD_LOGIT_STD: f64 = 0.1;
const GATE_OUTPUTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub input_dim: usize,
    pub vocab: usize,
    pub rel_pos_buckets: usize,
    pub max_rel_distance: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 8,
            ffn_dim: 3072,
            input_dim: 512,
            vocab: 8192,
            rel_pos_buckets: 320,
            max_rel_distance: 800,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("encoder.layers", self.layers),
            ("encoder.hidden", self.hidden),
            ("encoder.heads", self.heads),
            ("encoder.ffn_dim", self.ffn_dim),
            ("encoder.input_dim", self.input_dim),
            ("encoder.vocab", self.vocab),
            ("encoder.max_rel_distance", self.max_rel_distance),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(
                "encoder.heads",
                format!("hidden {} not divisible by {} heads", self.hidden, self.heads),
            ));
        }
        if self.rel_pos_buckets < 4 {
            return Err(Error::config("encoder.rel_pos_buckets", "need at least 4 buckets"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("encoder.dropout", format!("{} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Closed-form trainable scalar count.
    pub fn num_params(&self, mask_embedding: bool) -> EncoderParamCount {
        let h = self.hidden;
        let block = 2 * LayerNorm::num_params(h)
            + 4 * Linear::num_params(h, h, true)
            + Linear::num_params(self.head_dim(), GATE_OUTPUTS, true)
            + self.heads
            + Linear::num_params(h, self.ffn_dim, true)
            + Linear::num_params(self.ffn_dim, h, true);
        EncoderParamCount {
            input: LayerNorm::num_params(self.input_dim)
                + Linear::num_params(self.input_dim, h, true)
                + if mask_embedding { self.input_dim } else { 0 },
            rel_pos: self.rel_pos_buckets * self.heads,
            blocks: self.layers * block,
            output: LayerNorm::num_params(h) + Linear::num_params(h, self.vocab, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EncoderParamCount {
    pub input: usize,
    pub rel_pos: usize,
    pub blocks: usize,
    pub output: usize,
}

impl EncoderParamCount {
    pub fn total(&self) -> usize {
        self.input + self.rel_pos + self.blocks + self.output
    }
}

/// Bidirectional log-spaced bucket for `rel = key - query`. Half the buckets
/// hold positive offsets; within each half, offsets below a quarter of the
/// bucket count map one-to-one and larger ones are log-spaced up to
/// `max_distance`, beyond which they share the last bucket.
pub fn relative_bucket(rel: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let base = if rel > 0 { half } else { 0 };
    let n = rel.unsigned_abs() as usize;
    let max_exact = half / 2;
    if n < max_exact {
        return base + n;
    }
    let ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (ratio * (half - max_exact) as f64) as usize;
    base + large.min(half - 1)
}

pub fn bucket_matrix(frames: usize, num_buckets: usize, max_distance: usize) -> Array2<usize> {
    Array2::from_shape_fn((frames, frames), |(t, s)| {
        relative_bucket(s as i64 - t as i64, num_buckets, max_distance)
    })
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    gate: Linear,
    gate_const: ParamId,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    feat_ln: LayerNorm,
    in_proj: Linear,
    rel_embed: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Linear,
    mask_emb: Option<ParamId>,
}

/// Per-layer states (embedding output first) and vocabulary logits.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `layers + 1` tensors of `B x T' x hidden`.
    pub layer_states: Vec<Array3<f64>>,
    /// `B x T' x vocab`
    pub logits: Array3<f64>,
}

/// One item's forward result.
pub struct ItemOutput {
    pub layer_states: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

struct BlockCache {
    u: Array2<f64>,
    ln1: NormCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    gate_a: Array2<f64>,
    gate_b: Array2<f64>,
    gate: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    drop1: Option<Array2<f64>>,
    w: Array2<f64>,
    ln2: NormCache,
    f1: Array2<f64>,
    act: Array2<f64>,
    drop2: Option<Array2<f64>>,
}

pub struct ItemCache {
    masked_rows: Vec<usize>,
    feat_ln_in: NormCache,
    feat_ln_out: Array2<f64>,
    buckets: Array2<usize>,
    valid: usize,
    blocks: Vec<BlockCache>,
    final_in: NormCache,
    final_out: Array2<f64>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, mask_embedding: bool, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let feat_ln = LayerNorm::new(store, "encoder.feature_norm", cfg.input_dim);
        let in_proj = Linear::new(store, "encoder.input_proj", cfg.input_dim, h, true, INIT_STD, rng);
        let rel_embed = store.normal("encoder.rel_pos_embed", &[cfg.rel_pos_buckets, cfg.heads], INIT_STD, rng);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let n = |part: &str| format!("encoder.layer{l}.{part}");
                Block {
                    ln1: LayerNorm::new(store, &n("attn_norm"), h),
                    q: Linear::new(store, &n("q_proj"), h, h, true, INIT_STD, rng),
                    k: Linear::new(store, &n("k_proj"), h, h, true, INIT_STD, rng),
                    v: Linear::new(store, &n("v_proj"), h, h, true, INIT_STD, rng),
                    o: Linear::new(store, &n("out_proj"), h, h, true, INIT_STD, rng),
                    gate: Linear::new(store, &n("rel_gate"), cfg.head_dim(), GATE_OUTPUTS, true, INIT_STD, rng),
                    gate_const: store.ones(n("rel_gate_const"), &[cfg.heads]),
                    ln2: LayerNorm::new(store, &n("ffn_norm"), h),
                    fc1: Linear::new(store, &n("fc1"), h, cfg.ffn_dim, true, INIT_STD, rng),
                    fc2: Linear::new(store, &n("fc2"), cfg.ffn_dim, h, true, INIT_STD, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, "encoder.final_norm", h);
        let head_std = HEAD_LOGIT_STD / (h as f64).sqrt();
        let head = Linear::new(store, "encoder.label_head", h, cfg.vocab, true, head_std, rng);
        let mask_emb = mask_embedding.then(|| store.normal("encoder.mask_embed", &[cfg.input_dim], INIT_STD, rng));
        Ok(Self {
            cfg: cfg.clone(),
            feat_ln,
            in_proj,
            rel_embed,
            blocks,
            final_ln,
            head,
            mask_emb,
        })
    }

    pub fn has_mask_embedding(&self) -> bool {
        self.mask_emb.is_some()
    }

    pub fn head_bias(&self) -> ParamId {
        self.head.bias.expect("label head has a bias")
    }

    /// Gate values `(T, heads)` for layer `layer` given that layer's
    /// normalized input `u`.
    pub fn rel_gate(&self, p: &ParamStore, layer: usize, u: ArrayView2<f64>) -> Array2<f64> {
        self.gate_parts(p, &self.blocks[layer], u).2
    }

    /// Additive attention bias `(T, T)` for one head of one layer.
    pub fn gated_rel_pos_bias(&self, p: &ParamStore, layer: usize, head: usize, u: ArrayView2<f64>) -> Array2<f64> {
        let gate = self.rel_gate(p, layer, u);
        let t = u.nrows();
        let buckets = bucket_matrix(t, self.cfg.rel_pos_buckets, self.cfg.max_rel_distance);
        let emb = p.v2(self.rel_embed);
        Array2::from_shape_fn((t, t), |(i, j)| gate[[i, head]] * emb[[buckets[[i, j]], head]])
    }

    fn gate_parts(&self, p: &ParamStore, blk: &Block, u: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let t = u.nrows();
        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let c = p.v1(blk.gate_const);
        let mut a = Array2::zeros((t, heads));
        let mut b = Array2::zeros((t, heads));
        let mut g = Array2::zeros((t, heads));
        for hh in 0..heads {
            let z = blk.gate.forward(p, u.slice(s![.., hh * dh..(hh + 1) * dh]));
            for i in 0..t {
                let za: f64 = z.slice(s![i, ..GATE_OUTPUTS / 2]).sum();
                let zb: f64 = z.slice(s![i, GATE_OUTPUTS / 2..]).sum();
                let (sa, sb) = (sigmoid(za), sigmoid(zb));
                a[[i, hh]] = sa;
                b[[i, hh]] = sb;
                g[[i, hh]] = sa * (sb * c[hh] - 1.0) + 2.0;
            }
        }
        (a, b, g)
    }

    /// Forward pass for one item of `T` frames of which the first `valid` are
    /// real. `mask_rows` marks frames to overwrite with the mask embedding
    /// when one is configured.
    pub fn forward_item(
        &self,
        p: &ParamStore,
        x: ArrayView2<f64>,
        valid: usize,
        mask_rows: Option<ArrayView1<bool>>,
        mut dropout: Option<&mut Rng>,
    ) -> Result<(ItemOutput, ItemCache)> {
        let (t, d) = x.dim();
        if d != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "encoder input dimension {d}, expected {}",
                self.cfg.input_dim
            )));
        }
        if valid == 0 || valid > t {
            return Err(Error::Shape(format!("valid frames {valid} outside 1..={t}")));
        }
        let mut x = x.to_owned();
        let mut masked_rows = Vec::new();
        if let (Some(emb), Some(m)) = (self.mask_emb, mask_rows) {
            for (i, &on) in m.iter().enumerate() {
                if on {
                    x.row_mut(i).assign(&p.v1(emb));
                    masked_rows.push(i);
                }
            }
        }
        let (a0, feat_ln_in) = self.feat_ln.forward(p, x.view());
        let mut hcur = self.in_proj.forward(p, a0.view());
        let buckets = bucket_matrix(t, self.cfg.rel_pos_buckets, self.cfg.max_rel_distance);
        let emb = p.v2(self.rel_embed);
        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let drop_p = self.cfg.dropout;

        let mut layer_states = vec![hcur.clone()];
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (u, ln1) = blk.ln1.forward(p, hcur.view());
            let q = blk.q.forward(p, u.view());
            let k = blk.k.forward(p, u.view());
            let v = blk.v.forward(p, u.view());
            let (gate_a, gate_b, gate) = self.gate_parts(p, blk, u.view());

            let mut ctx = Array2::zeros((t, self.cfg.hidden));
            let mut probs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let cols = s![.., hh * dh..(hh + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                for i in 0..t {
                    let gi = gate[[i, hh]];
                    for j in 0..t {
                        scores[[i, j]] = if j < valid {
                            scores[[i, j]] + gi * emb[[buckets[[i, j]], hh]]
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                }
                softmax_rows(&mut scores);
                ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            let mut attn = blk.o.forward(p, ctx.view());
            let drop1 = dropout.as_deref_mut().and_then(|r| dropout_mask(t, self.cfg.hidden, drop_p, r));
            if let Some(m) = &drop1 {
                attn *= m;
            }
            let h1 = &hcur + &attn;

            let (w, ln2) = blk.ln2.forward(p, h1.view());
            let f1 = blk.fc1.forward(p, w.view());
            let act = f1.mapv(gelu);
            let mut f2 = blk.fc2.forward(p, act.view());
            let drop2 = dropout.as_deref_mut().and_then(|r| dropout_mask(t, self.cfg.hidden, drop_p, r));
            if let Some(m) = &drop2 {
                f2 *= m;
            }
            hcur = &h1 + &f2;
            layer_states.push(hcur.clone());
            caches.push(BlockCache {
                u,
                ln1,
                q,
                k,
                v,
                gate_a,
                gate_b,
                gate,
                probs,
                ctx,
                drop1,
                w,
                ln2,
                f1,
                act,
                drop2,
            });
        }
        let (final_out, final_in) = self.final_ln.forward(p, hcur.view());
        let logits = self.head.forward(p, final_out.view());
        Ok((
            ItemOutput { layer_states, logits },
            ItemCache {
                masked_rows,
                feat_ln_in,
                feat_ln_out: a0,
                buckets,
                valid,
                blocks: caches,
                final_in,
                final_out,
            },
        ))
    }

    /// Backpropagates `d_logits` and returns the gradient w.r.t. the input frames.
    pub fn backward_item(&self, p: &ParamStore, g: &mut Grads, cache: &ItemCache, d_logits: ArrayView2<f64>) -> Array2<f64> {
        let d_final = self.head.backward(p, g, cache.final_out.view(), d_logits);
        let mut dh = self.final_ln.backward(p, g, &cache.final_in, d_final.view());

        let heads = self.cfg.heads;
        let dh_dim = self.cfg.head_dim();
        let scale = 1.0 / (dh_dim as f64).sqrt();
        let emb = p.v2(self.rel_embed).to_owned();
        let t = dh.nrows();
        let valid = cache.valid;
        let mut d_emb = Array2::<f64>::zeros(emb.raw_dim());

        for (blk, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            // feed-forward residual
            let mut df2 = dh.clone();
            if let Some(m) = &c.drop2 {
                df2 *= m;
            }
            let d_act = blk.fc2.backward(p, g, c.act.view(), df2.view());
            let d_f1 = &d_act * &c.f1.mapv(gelu_grad);
            let d_w = blk.fc1.backward(p, g, c.w.view(), d_f1.view());
            let mut dh1 = dh + blk.ln2.backward(p, g, &c.ln2, d_w.view());

            // attention residual
            let mut d_attn = dh1.clone();
            if let Some(m) = &c.drop1 {
                d_attn *= m;
            }
            let d_ctx = blk.o.backward(p, g, c.ctx.view(), d_attn.view());
            let mut dq = Array2::zeros(c.q.raw_dim());
            let mut dk = Array2::zeros(c.k.raw_dim());
            let mut dv = Array2::zeros(c.v.raw_dim());
            let mut d_gate = Array2::<f64>::zeros((t, heads));
            for hh in 0..heads {
                let cols = s![.., hh * dh_dim..(hh + 1) * dh_dim];
                let probs = &c.probs[hh];
                let dc = d_ctx.slice(cols);
                let dp = dc.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&probs.t().dot(&dc));
                let mut ds = dp;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(probs.rows()) {
                    let dot: f64 = row.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                    row.iter_mut().zip(prow.iter()).for_each(|(d, &pv)| *d = pv * (*d - dot));
                }
                for i in 0..t {
                    let gi = c.gate[[i, hh]];
                    let mut acc = 0.0;
                    for j in 0..valid {
                        let bk = cache.buckets[[i, j]];
                        let dsv = ds[[i, j]];
                        acc += dsv * emb[[bk, hh]];
                        d_emb[[bk, hh]] += dsv * gi;
                    }
                    d_gate[[i, hh]] = acc;
                }
                dq.slice_mut(cols).assign(&(ds.dot(&c.k.slice(cols)) * scale));
                dk.slice_mut(cols).assign(&(ds.t().dot(&c.q.slice(cols)) * scale));
            }

            let mut du = blk.q.backward(p, g, c.u.view(), dq.view());
            du += &blk.k.backward(p, g, c.u.view(), dk.view());
            du += &blk.v.backward(p, g, c.u.view(), dv.view());

            // gate: gate = a (b c - 1) + 2
            let gc = p.v1(blk.gate_const);
            let mut d_const = Array1::<f64>::zeros(heads);
            for hh in 0..heads {
                let mut dz = Array2::zeros((t, GATE_OUTPUTS));
                for i in 0..t {
                    let (a, b, dg) = (c.gate_a[[i, hh]], c.gate_b[[i, hh]], d_gate[[i, hh]]);
                    let da = dg * (b * gc[hh] - 1.0);
                    let db = dg * a * gc[hh];
                    d_const[hh] += dg * a * b;
                    let dza = da * a * (1.0 - a);
                    let dzb = db * b * (1.0 - b);
                    dz.slice_mut(s![i, ..GATE_OUTPUTS / 2]).fill(dza);
                    dz.slice_mut(s![i, GATE_OUTPUTS / 2..]).fill(dzb);
                }
                let cols = s![.., hh * dh_dim..(hh + 1) * dh_dim];
                let du_h = blk.gate.backward(p, g, c.u.slice(cols), dz.view());
                let mut target = du.slice_mut(cols);
                target += &du_h;
            }
            g.m1(blk.gate_const).scaled_add(1.0, &d_const);

            dh1 += &blk.ln1.backward(p, g, &c.ln1, du.view());
            dh = dh1;
        }
        g.m2(self.rel_embed).scaled_add(1.0, &d_emb);

        let d_a0 = self.in_proj.backward(p, g, cache.feat_ln_out.view(), dh.view());
        let mut dx = self.feat_ln.backward(p, g, &cache.feat_ln_in, d_a0.view());
        if let Some(emb_id) = self.mask_emb {
            let mut d_mask = Array1::<f64>::zeros(self.cfg.input_dim);
            for &r in &cache.masked_rows {
                d_mask += &dx.row(r);
                dx.row_mut(r).fill(0.0);
            }
            g.m1(emb_id).scaled_add(1.0, &d_mask);
        }
        dx
    }

    /// Batched inference (no dropout).
    pub fn encode(&self, p: &ParamStore, f: &FeatureFrames, mask: Option<&MaskSpec>) -> Result<EncoderOutput> {
        self.encode_with_dropout(p, f, mask, None)
    }

    /// Batched forward; with `dropout_seed`, item `i` draws dropout masks from
    /// its own derived stream.
    pub fn encode_with_dropout(
        &self,
        p: &ParamStore,
        f: &FeatureFrames,
        mask: Option<&MaskSpec>,
        dropout_seed: Option<u64>,
    ) -> Result<EncoderOutput> {
        let (b, t, _) = f.values.dim();
        if let Some(m) = mask {
            if m.mask.dim() != (b, t) {
                return Err(Error::Shape("mask does not match features".into()));
            }
        }
        let mut layer_states = vec![Array3::zeros((b, t, self.cfg.hidden)); self.cfg.layers + 1];
        let mut logits = Array3::zeros((b, t, self.cfg.vocab));
        for i in 0..b {
            let mut rng = dropout_seed.map(|s| stream_rng(s, Stream::Dropout, i as u64));
            let (out, _) = self.forward_item(
                p,
                f.values.index_axis(Axis(0), i),
                f.valid_frames[i],
                mask.map(|m| m.mask.row(i)),
                rng.as_mut(),
            )?;
            for (dst, src) in layer_states.iter_mut().zip(&out.layer_states) {
                dst.index_axis_mut(Axis(0), i).assign(src);
            }
            logits.index_axis_mut(Axis(0), i).assign(&out.logits);
        }
        Ok(EncoderOutput { layer_states, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn buckets_clip_and_split_by_sign() {
        let (n, m) = (320, 800);
        assert_eq!(relative_bucket(0, n, m), 0);
        assert_eq!(relative_bucket(-5, n, m), 5);
        assert_eq!(relative_bucket(5, n, m), 165);
        assert_eq!(relative_bucket(800, n, m), relative_bucket(5000, n, m));
        assert_eq!(relative_bucket(-800, n, m), relative_bucket(-5000, n, m));
        assert_eq!(relative_bucket(-800, n, m), 159);
        assert_eq!(relative_bucket(800, n, m), 319);
        let mut prev = 0;
        for d in 0..1000 {
            let b = relative_bucket(-d, n, m);
            assert!(b >= prev && b < 160);
            prev = b;
        }
    }

    #[test]
    fn param_count_matches_store() {
        let cfg = EncoderConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            ffn_dim: 32,
            input_dim: 8,
            vocab: 32,
            rel_pos_buckets: 16,
            max_rel_distance: 20,
            dropout: 0.0,
        };
        for mask_emb in [false, true] {
            let mut store = ParamStore::new();
            Encoder::new(&mut store, &cfg, mask_emb, &mut Rng::seed_from_u64(0)).unwrap();
            assert_eq!(store.numel(), cfg.num_params(mask_emb).total());
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = EncoderConfig {
            hidden: 10,
            heads: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
