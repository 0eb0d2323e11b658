//! Transformer-encoder-style reasoning layer over the cells of a feature grid.
//!
//! Data flow for a `[B, C, H, W]` grid:
//!
//! ```text
//! x' = flatten(grid) + PE
//! z  = LayerNorm1(x' + MultiHead(x'))
//! y  = LayerNorm2(z + MLP(z))
//! out = rearrange(y, H, W)
//! ```
//!
//! Cells are flattened row-major (`i = row * W + col`). Positional encoding
//! is added once, right after flattening.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{param_rng, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReasoningConfig {
    pub d_feature: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    pub ln_eps: f64,
    pub positional_encoding: bool,
}

impl ReasoningConfig {
    /// `d_hidden = 2·d_feature`, LayerNorm eps 1e-5, positional encoding on.
    pub fn new(d_feature: usize, n_heads: usize) -> Self {
        ReasoningConfig {
            d_feature,
            n_heads,
            d_hidden: 2 * d_feature,
            ln_eps: 1e-5,
            positional_encoding: true,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_feature / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_feature == 0 || self.n_heads == 0 || self.d_hidden == 0 {
            return Err(Error::Config(format!("reasoning sizes must be positive: {self:?}")));
        }
        if !self.d_feature.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide feature depth {}",
                self.n_heads, self.d_feature
            )));
        }
        if self.positional_encoding && !self.d_feature.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "positional encoding needs an even feature depth, got {}",
                self.d_feature
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count of one layer.
    pub fn param_count(&self) -> usize {
        let (d, h) = (self.d_feature, self.d_hidden);
        4 * d * d + 4 * d + 2 * d * h + h + d + 4 * d
    }
}

/// Learnable tensors of one reasoning layer, stored in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningLayerParams {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

fn glorot<T: Scalar>(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, &mut param_rng(seed, name))
}

fn he<T: Scalar>(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, &mut param_rng(seed, name))
}

impl ReasoningLayerParams {
    /// Registers freshly initialised weights under `prefix.*`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, config: &ReasoningConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.d_feature, config.d_hidden);
        let mut add = |name: &str, t: Tensor<T>| store.add(format!("{prefix}.{name}"), t);
        let name = |n: &str| format!("{prefix}.{n}");
        Ok(ReasoningLayerParams {
            w_q: add("w_q", glorot(seed, &name("w_q"), d, d)),
            b_q: add("b_q", Tensor::zeros(&[d])),
            w_k: add("w_k", glorot(seed, &name("w_k"), d, d)),
            b_k: add("b_k", Tensor::zeros(&[d])),
            w_v: add("w_v", glorot(seed, &name("w_v"), d, d)),
            b_v: add("b_v", Tensor::zeros(&[d])),
            w_o: add("w_o", glorot(seed, &name("w_o"), d, d)),
            b_o: add("b_o", Tensor::zeros(&[d])),
            mlp_w1: add("mlp_w1", he(seed, &name("mlp_w1"), d, h)),
            mlp_b1: add("mlp_b1", Tensor::zeros(&[h])),
            mlp_w2: add("mlp_w2", glorot(seed, &name("mlp_w2"), h, d)),
            mlp_b2: add("mlp_b2", Tensor::zeros(&[d])),
            ln1_gamma: add("ln1_gamma", Tensor::ones(&[d])),
            ln1_beta: add("ln1_beta", Tensor::zeros(&[d])),
            ln2_gamma: add("ln2_gamma", Tensor::ones(&[d])),
            ln2_beta: add("ln2_beta", Tensor::zeros(&[d])),
        })
    }

    pub fn ids(&self) -> [ParamId; 16] {
        [
            self.w_q,
            self.b_q,
            self.w_k,
            self.b_k,
            self.w_v,
            self.b_v,
            self.w_o,
            self.b_o,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
            self.ln1_gamma,
            self.ln1_beta,
            self.ln2_gamma,
            self.ln2_beta,
        ]
    }

    /// Number of scalars actually held in the store for this layer.
    pub fn count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.ids().iter().map(|&id| store.value(id).len()).sum()
    }

    /// Places every weight on `tape` for one forward pass.
    pub fn bind<'t, T: Scalar>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, config: &ReasoningConfig) -> BoundReasoning<'t, T> {
        let p = |id| tape.param(store, id);
        BoundReasoning {
            config: *config,
            w_q: p(self.w_q),
            b_q: p(self.b_q),
            w_k: p(self.w_k),
            b_k: p(self.b_k),
            w_v: p(self.w_v),
            b_v: p(self.b_v),
            w_o: p(self.w_o),
            b_o: p(self.b_o),
            mlp_w1: p(self.mlp_w1),
            mlp_b1: p(self.mlp_b1),
            mlp_w2: p(self.mlp_w2),
            mlp_b2: p(self.mlp_b2),
            ln1_gamma: p(self.ln1_gamma),
            ln1_beta: p(self.ln1_beta),
            ln2_gamma: p(self.ln2_gamma),
            ln2_beta: p(self.ln2_beta),
        }
    }
}

/// Reasoning weights placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundReasoning<'t, T: Scalar> {
    pub config: ReasoningConfig,
    pub w_q: Var<'t, T>,
    pub b_q: Var<'t, T>,
    pub w_k: Var<'t, T>,
    pub b_k: Var<'t, T>,
    pub w_v: Var<'t, T>,
    pub b_v: Var<'t, T>,
    pub w_o: Var<'t, T>,
    pub b_o: Var<'t, T>,
    pub mlp_w1: Var<'t, T>,
    pub mlp_b1: Var<'t, T>,
    pub mlp_w2: Var<'t, T>,
    pub mlp_b2: Var<'t, T>,
    pub ln1_gamma: Var<'t, T>,
    pub ln1_beta: Var<'t, T>,
    pub ln2_gamma: Var<'t, T>,
    pub ln2_beta: Var<'t, T>,
}

/// A batch of cell sequences, `values: [B, H·W, d]`, remembering the grid
/// it came from.
#[derive(Debug, Clone, Copy)]
pub struct SequenceBatch<'t, T: Scalar> {
    pub values: Var<'t, T>,
    pub height: usize,
    pub width: usize,
}

impl<'t, T: Scalar> SequenceBatch<'t, T> {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_positions(&self) -> usize {
        self.height * self.width
    }

    pub fn d_feature(&self) -> usize {
        self.values.shape()[2]
    }

    fn with_values(&self, values: Var<'t, T>) -> Self {
        SequenceBatch { values, ..*self }
    }
}

/// `[B, C, H, W]` grid → `[B, H·W, C]` sequence, row-major over cells.
pub fn flatten<'t, T: Scalar>(grid: Var<'t, T>) -> Result<SequenceBatch<'t, T>> {
    let s = grid.shape();
    if s.len() != 4 {
        return Err(Error::shape("flatten", &s, &[]));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let values = grid.permute(&[0, 2, 3, 1])?.reshape(&[b, h * w, c])?;
    Ok(SequenceBatch {
        values,
        height: h,
        width: w,
    })
}

/// Inverse of [`flatten`]: `[B, H·W, C]` → `[B, C, H, W]`.
pub fn rearrange<'t, T: Scalar>(seq: &SequenceBatch<'t, T>, height: usize, width: usize) -> Result<Var<'t, T>> {
    let s = seq.values.shape();
    if s.len() != 3 || s[1] != height * width {
        return Err(Error::shape("rearrange", &s, &[height, width]));
    }
    seq.values.reshape(&[s[0], height, width, s[2]])?.permute(&[0, 3, 1, 2])
}

/// Fixed sinusoidal encoding, `[n_positions, d_feature]`:
/// `PE(i, 2j) = sin(i / 10000^(2j/d))`, `PE(i, 2j+1) = cos(i / 10000^(2j/d))`.
pub fn positional_encoding<T: Scalar>(n_positions: usize, d_feature: usize) -> Result<Tensor<T>> {
    if d_feature == 0 || !d_feature.is_multiple_of(2) {
        return Err(Error::Usage(format!("positional encoding needs an even depth, got {d_feature}")));
    }
    if n_positions == 0 {
        return Err(Error::Usage("positional encoding over zero positions".into()));
    }
    let mut data = Vec::with_capacity(n_positions * d_feature);
    for i in 0..n_positions {
        for j in 0..d_feature / 2 {
            let angle = i as f64 / 10000f64.powf((2 * j) as f64 / d_feature as f64);
            data.push(T::from_f64_lossy(angle.sin()));
            data.push(T::from_f64_lossy(angle.cos()));
        }
    }
    Tensor::new(&[n_positions, d_feature], data)
}

/// Intermediate products of scaled dot-product attention.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParts<'t, T: Scalar> {
    /// `QKᵀ / √d_k`, `[G, n, n]`.
    pub logits: Var<'t, T>,
    /// Row-stochastic weights, `[G, n, n]`.
    pub weights: Var<'t, T>,
    /// Weighted values, `[G, n, d_k]`.
    pub output: Var<'t, T>,
}

/// `softmax(QKᵀ / √d_k) V` over `G` independent groups (batch × heads).
pub fn scaled_dot_product<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>) -> Result<AttentionParts<'t, T>> {
    let d_k = *q.shape().last().ok_or_else(|| Error::Usage("empty query".into()))?;
    let scale = T::one() / T::from_usize_lossy(d_k).sqrt();
    let logits = q.matmul(k.transpose()?)?.scale(scale);
    let weights = logits.softmax_last()?;
    let output = weights.matmul(v)?;
    Ok(AttentionParts { logits, weights, output })
}

/// Output of [`multi_head_attention`].
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadOutput<'t, T: Scalar> {
    pub output: SequenceBatch<'t, T>,
    /// `[B·heads, n, n]`, batch-major.
    pub attention: Var<'t, T>,
    pub logits: Var<'t, T>,
}

fn project<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    x.matmul(w)?.add_bias(b)
}

/// `[B·n, d]` → `[B·h, n, d_k]`.
fn split_heads<'t, T: Scalar>(x: Var<'t, T>, b: usize, n: usize, h: usize, d_k: usize) -> Result<Var<'t, T>> {
    x.reshape(&[b, n, h, d_k])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, n, d_k])
}

/// Multi-head self-attention with one full-width projection per Q/K/V,
/// split along depth into `n_heads` blocks, then `Concat(heads)·W_o + b_o`.
pub fn multi_head_attention<'t, T: Scalar>(x: &SequenceBatch<'t, T>, p: &BoundReasoning<'t, T>) -> Result<MultiHeadOutput<'t, T>> {
    let cfg = &p.config;
    let d = cfg.d_feature;
    let s = x.values.shape();
    if s.len() != 3 || s[2] != d {
        return Err(Error::shape("multi_head_attention", &s, &[d]));
    }
    let (b, n) = (s[0], s[1]);
    let (h, d_k) = (cfg.n_heads, cfg.d_k());
    let flat = x.values.reshape(&[b * n, d])?;
    let q = split_heads(project(flat, p.w_q, p.b_q)?, b, n, h, d_k)?;
    let k = split_heads(project(flat, p.w_k, p.b_k)?, b, n, h, d_k)?;
    let v = split_heads(project(flat, p.w_v, p.b_v)?, b, n, h, d_k)?;
    let parts = scaled_dot_product(q, k, v)?;
    let concat = parts
        .output
        .reshape(&[b, h, n, d_k])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * n, d])?;
    let out = project(concat, p.w_o, p.b_o)?.reshape(&[b, n, d])?;
    Ok(MultiHeadOutput {
        output: x.with_values(out),
        attention: parts.weights,
        logits: parts.logits,
    })
}

/// Position-wise `max(0, xW₁ + b₁)W₂ + b₂`.
pub fn mlp<'t, T: Scalar>(x: &SequenceBatch<'t, T>, p: &BoundReasoning<'t, T>) -> Result<SequenceBatch<'t, T>> {
    let s = x.values.shape();
    let d = p.config.d_feature;
    if s.len() != 3 || s[2] != d {
        return Err(Error::shape("mlp", &s, &[d]));
    }
    let flat = x.values.reshape(&[s[0] * s[1], d])?;
    let hidden = project(flat, p.mlp_w1, p.mlp_b1)?.relu();
    let out = project(hidden, p.mlp_w2, p.mlp_b2)?.reshape(&s)?;
    Ok(x.with_values(out))
}

/// Result of a full reasoning pass.
#[derive(Debug, Clone, Copy)]
pub struct ReasoningOutput<'t, T: Scalar> {
    /// Same shape as the input grid.
    pub grid: Var<'t, T>,
    /// Attention weights, `[B·heads, n, n]`.
    pub attention: Var<'t, T>,
}

/// Flatten, add positional encoding, post-norm attention and MLP blocks,
/// rearrange back to the input grid shape.
pub fn reasoning_forward<'t, T: Scalar>(grid: Var<'t, T>, p: &BoundReasoning<'t, T>) -> Result<ReasoningOutput<'t, T>> {
    let cfg = &p.config;
    let s = grid.shape();
    if s.len() != 4 || s[1] != cfg.d_feature {
        return Err(Error::shape("reasoning_forward", &s, &[cfg.d_feature]));
    }
    let tape = grid.tape();
    let seq = flatten(grid)?;
    let x = if cfg.positional_encoding {
        let pe = positional_encoding::<T>(seq.n_positions(), cfg.d_feature)?;
        let tiled = tile_batch(&pe, seq.batch());
        seq.with_values(seq.values.add(tape.constant(tiled))?)
    } else {
        seq
    };
    let eps = T::from_f64_lossy(cfg.ln_eps);
    let attn = multi_head_attention(&x, p)?;
    let z = x.values.add(attn.output.values)?.layer_norm(p.ln1_gamma, p.ln1_beta, eps)?;
    let z = x.with_values(z);
    let m = mlp(&z, p)?;
    let y = z.values.add(m.values)?.layer_norm(p.ln2_gamma, p.ln2_beta, eps)?;
    let out = rearrange(&x.with_values(y), seq.height, seq.width)?;
    Ok(ReasoningOutput {
        grid: out,
        attention: attn.attention,
    })
}

fn tile_batch<T: Scalar>(t: &Tensor<T>, batch: usize) -> Tensor<T> {
    let mut shape = vec![batch];
    shape.extend_from_slice(t.shape());
    let mut data = Vec::with_capacity(t.len() * batch);
    for _ in 0..batch {
        data.extend_from_slice(t.data());
    }
    Tensor::from_parts(shape, data)
}

/// Splits `[B·heads, n, n]` attention weights into per-image, per-head
/// matrices.
pub fn attention_maps<T: Scalar>(attention: &Tensor<T>, heads: usize) -> Result<Vec<Vec<Tensor<T>>>> {
    let s = attention.shape();
    if s.len() != 3 || s[1] != s[2] || heads == 0 || !s[0].is_multiple_of(heads) {
        return Err(Error::shape("attention_maps", s, &[heads]));
    }
    let n = s[1];
    let per = n * n;
    Ok(attention
        .data()
        .chunks_exact(per * heads)
        .map(|img| {
            img.chunks_exact(per)
                .map(|m| Tensor::from_parts(vec![n, n], m.to_vec()))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid<'t>(tape: &'t Tape<f64>, shape: &[usize]) -> Var<'t, f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| (i as f64 * 0.731).sin()).collect();
        tape.var(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn flatten_is_row_major() {
        let tape = Tape::new();
        let g = grid(&tape, &[1, 3, 2, 2]);
        let seq = flatten(g).unwrap();
        let gv = g.value();
        let sv = seq.values.value();
        for (pos, (r, c)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            for ch in 0..3 {
                assert_eq!(sv.at(&[0, pos, ch]), gv.at(&[0, ch, r, c]));
            }
        }
    }

    #[test]
    fn degenerate_grid_flattens_to_one_position() {
        let tape = Tape::new();
        let g = grid(&tape, &[1, 1, 1, 1]);
        let seq = flatten(g).unwrap();
        assert_eq!(seq.values.shape(), vec![1, 1, 1]);
        assert_eq!(seq.values.value().data(), g.value().data());
        let back = rearrange(&seq, 1, 1).unwrap();
        assert_eq!(back.shape(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn rearrange_inverts_flatten_exactly() {
        let tape = Tape::new();
        let g = grid(&tape, &[2, 5, 3, 4]);
        let seq = flatten(g).unwrap();
        let back = rearrange(&seq, 3, 4).unwrap();
        assert_eq!(*back.value(), *g.value());
    }

    #[test]
    fn rearrange_rejects_wrong_size() {
        let tape = Tape::new();
        let seq = flatten(grid(&tape, &[1, 2, 3, 4])).unwrap();
        assert!(matches!(rearrange(&seq, 4, 4), Err(Error::Shape { .. })));
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding::<f64>(2, 4).unwrap();
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        let want = [0.84147, 0.54030, 0.01000, 0.99995];
        for (got, want) in pe.data()[4..].iter().zip(want) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        assert!(matches!(positional_encoding::<f64>(3, 5), Err(Error::Usage(_))));
    }

    #[test]
    fn positional_encoding_is_bounded() {
        let pe = positional_encoding::<f32>(64, 48).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        assert!(ReasoningConfig::new(48, 5).validate().is_err());
        assert!(ReasoningConfig::new(48, 3).validate().is_ok());
    }

    #[test]
    fn param_count_matches_enumeration() {
        for (d, h) in [(4, 1), (32, 2), (48, 3), (64, 4)] {
            let cfg = ReasoningConfig::new(d, h);
            let mut store = ParamStore::<f32>::new();
            let p = ReasoningLayerParams::new(&mut store, "r", &cfg, 7).unwrap();
            assert_eq!(p.count(&store), cfg.param_count());
            assert_eq!(store.count(), cfg.param_count());
        }
    }
}
