//! Transformer building blocks: multi-head attention, position-wise FFN,
//! post-norm encoder/decoder layers, sinusoidal positions, and attention
//! masks.
//!
//! Masking adds a large negative bias to blocked score entries before the
//! softmax. The bias is big enough that `exp` underflows to exactly 0.0, so
//! blocked keys contribute nothing at all; decoding a prefix therefore
//! produces bit-identical activations whether or not later positions exist.
//! A query row with every key blocked would silently turn into a uniform
//! distribution, so mask constructors reject that instead.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::fmath;
use crate::rng::SeedRng;
use crate::tensor::{Array, Result as TensorResult, Tape, TensorError, TensorRef};

/// Score bias for blocked attention entries. `exp(MASK_BIAS + s - max)`
/// underflows to 0.0 for any realistic score `s`, which is what makes
/// causal decoding exact rather than approximately-suppressed.
pub const MASK_BIAS: f32 = -1.0e9;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub &'static str);

/// Hyperparameters shared by the pretrained grapheme encoder and the G2P
/// encoder-decoder built on top of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    /// Depth of the pretrained grapheme encoder.
    pub gbert_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub dropout_p: f32,
    /// Longest supported sequence, counting any language tag.
    pub max_len: usize,
    /// Language embedding table size; 0 disables language embeddings.
    pub num_languages: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_encoder_layers: 4,
            num_decoder_layers: 4,
            gbert_layers: 6,
            d_model: 256,
            num_heads: 4,
            d_ffn: 1024,
            dropout_p: 0.1,
            max_len: 64,
            num_languages: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> core::result::Result<(), ConfigError> {
        if self.d_model == 0 {
            return Err(ConfigError("d_model must be positive"));
        }
        if self.d_model % 2 != 0 {
            return Err(ConfigError("d_model must be even for sinusoidal positions"));
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(ConfigError("num_heads must be positive and divide d_model"));
        }
        if self.num_encoder_layers == 0 || self.num_decoder_layers == 0 || self.gbert_layers == 0 {
            return Err(ConfigError("layer counts must be positive"));
        }
        if self.d_ffn == 0 {
            return Err(ConfigError("d_ffn must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ConfigError("dropout_p must lie in [0, 1)"));
        }
        if self.max_len < 2 {
            return Err(ConfigError("max_len must be at least 2"));
        }
        Ok(())
    }
}

/// Boolean attention layout: `allow[q * k_len + k]` says whether query `q`
/// may read key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    q_len: usize,
    k_len: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn full(q_len: usize, k_len: usize) -> Self {
        AttentionMask {
            q_len,
            k_len,
            allow: vec![true; q_len * k_len],
        }
    }

    /// Lower-triangular mask: position `q` sees keys `0..=q`.
    pub fn causal(len: usize) -> Self {
        let mut allow = vec![false; len * len];
        for q in 0..len {
            for k in 0..=q {
                allow[q * len + k] = true;
            }
        }
        AttentionMask {
            q_len: len,
            k_len: len,
            allow,
        }
    }

    /// Every query sees exactly the keys flagged valid (non-padding).
    pub fn padding(q_len: usize, key_valid: &[bool]) -> Self {
        let k_len = key_valid.len();
        let mut allow = vec![false; q_len * k_len];
        for q in 0..q_len {
            for (k, &ok) in key_valid.iter().enumerate() {
                allow[q * k_len + k] = ok;
            }
        }
        AttentionMask {
            q_len,
            k_len,
            allow,
        }
    }

    /// Intersection of two masks of identical geometry.
    pub fn and(&self, other: &AttentionMask) -> TensorResult<AttentionMask> {
        if self.q_len != other.q_len || self.k_len != other.k_len {
            return Err(TensorError::ShapeMismatch {
                op: "mask and",
                lhs: vec![self.q_len, self.k_len],
                rhs: vec![other.q_len, other.k_len],
            });
        }
        let allow = self
            .allow
            .iter()
            .zip(&other.allow)
            .map(|(a, b)| a & b)
            .collect();
        Ok(AttentionMask {
            q_len: self.q_len,
            k_len: self.k_len,
            allow,
        })
    }

    pub fn q_len(&self) -> usize {
        self.q_len
    }

    pub fn k_len(&self) -> usize {
        self.k_len
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.k_len + k]
    }

    /// Additive score bias `[q_len, k_len]`: 0 where allowed, [`MASK_BIAS`]
    /// where blocked. A query row with no allowed key is an error because it
    /// would softmax into a uniform, meaningless distribution.
    pub fn to_bias(&self) -> TensorResult<Array> {
        let mut data = Vec::with_capacity(self.allow.len());
        for q in 0..self.q_len {
            let row = &self.allow[q * self.k_len..(q + 1) * self.k_len];
            if !row.iter().any(|&a| a) {
                return Err(TensorError::FullyMaskedQuery { row: q });
            }
            data.extend(row.iter().map(|&a| if a { 0.0 } else { MASK_BIAS }));
        }
        Array::new(vec![self.q_len, self.k_len], data)
    }
}

/// Stack per-sequence masks into one `[batch, q_len, k_len]` bias tensor.
pub fn stack_bias(masks: &[AttentionMask]) -> TensorResult<Array> {
    let (q_len, k_len) = (masks[0].q_len, masks[0].k_len);
    let mut data = Vec::with_capacity(masks.len() * q_len * k_len);
    for m in masks {
        if m.q_len != q_len || m.k_len != k_len {
            return Err(TensorError::ShapeMismatch {
                op: "stack_bias",
                lhs: vec![q_len, k_len],
                rhs: vec![m.q_len, m.k_len],
            });
        }
        data.extend_from_slice(m.to_bias()?.data());
    }
    Array::new(vec![masks.len(), q_len, k_len], data)
}

/// Sinusoidal position table `[len, d_model]`:
/// even columns `sin(pos / 10000^(2i/d))`, odd columns the matching cosine.
pub fn sinusoidal_positions(len: usize, d_model: usize) -> Array {
    let mut data = Vec::with_capacity(len * d_model);
    for pos in 0..len {
        for j in 0..d_model {
            let i = (j / 2) as f32;
            let exponent = 2.0 * i / d_model as f32;
            let angle = pos as f32 / fmath::powf(10_000.0, exponent);
            data.push(if j % 2 == 0 {
                fmath::sin(angle)
            } else {
                fmath::cos(angle)
            });
        }
    }
    Array::new(vec![len, d_model], data).expect("len*d_model elements")
}

/// Inverted dropout. Inference and `p == 0` are the identity, so evaluation
/// never perturbs activations; during training kept units are scaled by
/// `1/(1-p)` to preserve expectations.
pub struct Dropout<'a> {
    p: f32,
    rng: Option<&'a mut SeedRng>,
}

impl Dropout<'static> {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }
}

impl<'a> Dropout<'a> {
    pub fn train(p: f32, rng: &'a mut SeedRng) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: TensorRef) -> TensorRef {
        let p = self.p;
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let shape = tape.value(x).shape().to_vec();
        let numel = tape.value(x).numel();
        let keep_scale = 1.0 / (1.0 - p);
        let data: Vec<f32> = (0..numel)
            .map(|_| if rng.next_f32() < p { 0.0 } else { keep_scale })
            .collect();
        let mask = tape.constant(Array::new(shape, data).expect("mask matches x"));
        tape.mul(x, mask).expect("mask matches x")
    }
}

pub struct AttentionParams {
    pub wq: TensorRef,
    pub bq: TensorRef,
    pub wk: TensorRef,
    pub bk: TensorRef,
    pub wv: TensorRef,
    pub bv: TensorRef,
    pub wo: TensorRef,
    pub bo: TensorRef,
}

pub struct FfnParams {
    pub w1: TensorRef,
    pub b1: TensorRef,
    pub w2: TensorRef,
    pub b2: TensorRef,
}

pub struct NormParams {
    pub gain: TensorRef,
    pub bias: TensorRef,
}

pub struct EncoderLayerParams {
    pub attn: AttentionParams,
    pub ln1: NormParams,
    pub ffn: FfnParams,
    pub ln2: NormParams,
}

pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub ln1: NormParams,
    pub cross_attn: AttentionParams,
    pub ln2: NormParams,
    pub ffn: FfnParams,
    pub ln3: NormParams,
}

pub const LN_EPS: f32 = 1e-5;

/// Multi-head scaled dot-product attention. Queries come from `q_src`
/// `[.., tq, d]`, keys and values from `kv_src` `[.., tk, d]`;
/// `mask_bias`, when present, must match the score shape `[.., tq, tk]`.
/// Dropout lands on the attention weights.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_src: TensorRef,
    kv_src: TensorRef,
    p: &AttentionParams,
    num_heads: usize,
    mask_bias: Option<TensorRef>,
    drop: &mut Dropout,
) -> TensorResult<TensorRef> {
    let d_model = tape.value(q_src).last_dim();
    if num_heads == 0 || d_model % num_heads != 0 {
        return Err(TensorError::InvalidShape {
            op: "multi_head_attention",
            shape: tape.value(q_src).shape().to_vec(),
            reason: "num_heads must divide the model width",
        });
    }
    let d_head = d_model / num_heads;
    let inv_sqrt_dh = 1.0 / fmath::sqrt(d_head as f32);

    let q = tape.matmul(q_src, p.wq)?;
    let q = tape.add_broadcast(q, p.bq)?;
    let k = tape.matmul(kv_src, p.wk)?;
    let k = tape.add_broadcast(k, p.bk)?;
    let v = tape.matmul(kv_src, p.wv)?;
    let v = tape.add_broadcast(v, p.bv)?;

    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let scores = tape.matmul_transb(qh, kh)?;
        let scores = tape.scale(scores, inv_sqrt_dh);
        let scores = match mask_bias {
            Some(m) => tape.add(scores, m)?,
            None => scores,
        };
        let axis = tape.value(scores).rank() - 1;
        let weights = tape.softmax(scores, axis)?;
        let weights = drop.apply(tape, weights);
        heads.push(tape.matmul(weights, vh)?);
    }
    let ctx = tape.concat_cols(&heads)?;
    let out = tape.matmul(ctx, p.wo)?;
    tape.add_broadcast(out, p.bo)
}

/// Position-wise feed-forward: `relu(x·w1 + b1)·w2 + b2`.
pub fn feed_forward(tape: &mut Tape, x: TensorRef, p: &FfnParams) -> TensorResult<TensorRef> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_broadcast(h, p.b1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, p.w2)?;
    tape.add_broadcast(out, p.b2)
}

pub fn residual_norm(
    tape: &mut Tape,
    x: TensorRef,
    sublayer: TensorRef,
    ln: &NormParams,
    drop: &mut Dropout,
) -> TensorResult<TensorRef> {
    let dropped = drop.apply(tape, sublayer);
    let sum = tape.add(x, dropped)?;
    tape.layer_norm(sum, ln.gain, ln.bias, LN_EPS)
}

/// Post-norm encoder layer:
/// `x ← LN(x + drop(SelfAttn(x)))`, then `x ← LN(x + drop(FFN(x)))`.
pub fn encoder_layer(
    tape: &mut Tape,
    x: TensorRef,
    p: &EncoderLayerParams,
    num_heads: usize,
    mask_bias: Option<TensorRef>,
    drop: &mut Dropout,
) -> TensorResult<TensorRef> {
    let attn = multi_head_attention(tape, x, x, &p.attn, num_heads, mask_bias, drop)?;
    let x = residual_norm(tape, x, attn, &p.ln1, drop)?;
    let ffn = feed_forward(tape, x, &p.ffn)?;
    residual_norm(tape, x, ffn, &p.ln2, drop)
}

/// Post-norm decoder layer: causal self-attention, then cross-attention
/// over `enc_out`, then the FFN, each wrapped in residual + layer norm.
pub fn decoder_layer(
    tape: &mut Tape,
    s: TensorRef,
    enc_out: TensorRef,
    p: &DecoderLayerParams,
    num_heads: usize,
    self_mask_bias: Option<TensorRef>,
    cross_mask_bias: Option<TensorRef>,
    drop: &mut Dropout,
) -> TensorResult<TensorRef> {
    let attn = multi_head_attention(tape, s, s, &p.self_attn, num_heads, self_mask_bias, drop)?;
    let s = residual_norm(tape, s, attn, &p.ln1, drop)?;
    let cross =
        multi_head_attention(tape, s, enc_out, &p.cross_attn, num_heads, cross_mask_bias, drop)?;
    let s = residual_norm(tape, s, cross, &p.ln2, drop)?;
    let ffn = feed_forward(tape, s, &p.ffn)?;
    residual_norm(tape, s, ffn, &p.ln3, drop)
}

/// Token embedding, scaled by `scale`, plus sinusoidal positions, then
/// embedding dropout. `ids` is `batch` rows of length `t` flattened.
pub fn embed_with_positions(
    tape: &mut Tape,
    table: TensorRef,
    ids: &[u32],
    batch: usize,
    t: usize,
    scale: f32,
    drop: &mut Dropout,
) -> TensorResult<TensorRef> {
    let d_model = tape.value(table).shape()[1];
    let e = tape.embedding(table, ids)?;
    let e = tape.reshape(e, &[batch, t, d_model])?;
    let e = if scale != 1.0 { tape.scale(e, scale) } else { e };
    let pos = tape.constant(sinusoidal_positions(t, d_model));
    let x = tape.add_broadcast(e, pos)?;
    Ok(drop.apply(tape, x))
}
