use super::mask_bias;
use super::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::error::{CrabError, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Cross-modal attention projections, all `[d, d]` and bias-free.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossAttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl CrossAttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, init: &mut Init) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(CrabError::Config(format!("attention dim {dim} not divisible by {heads} heads")));
        }
        let mut proj = |p: &str| store.add(format!("{name}.{p}"), ParamGroup::Main, init.fan_in_uniform(&[dim, dim]));
        Ok(CrossAttentionParams {
            query: proj("wq"),
            key: proj("wk"),
            value: proj("wv"),
            output: proj("wo"),
            dim,
            heads,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.query, self.key, self.value, self.output]
    }
}

fn project(tape: &mut Tape, x: Var, w: ParamId) -> Result<Var> {
    let wt = tape.transpose(w.var())?;
    tape.matmul(x, wt)
}

/// Scaled dot-product attention of `query_seq [B, Tq, d]` over
/// `key_value_seq [B, Tk, d]`, masked by `kv_mask [B, Tk]`, followed by the
/// output projection. No residual is added here.
pub fn cross_attention(tape: &mut Tape, p: &CrossAttentionParams, query_seq: Var, key_value_seq: Var, kv_mask: &Tensor) -> Result<Var> {
    let (qs, ks) = (tape.shape(query_seq).to_vec(), tape.shape(key_value_seq).to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[2] != p.dim || ks[2] != p.dim || qs[0] != ks[0] {
        return Err(CrabError::dim("cross_attention", format!("query {qs:?}, keys {ks:?}, dim {}", p.dim)));
    }
    let (b, tq, tk) = (qs[0], qs[1], ks[1]);
    if kv_mask.shape() != [b, tk] {
        return Err(CrabError::dim("cross_attention", format!("mask {:?} vs keys {ks:?}", kv_mask.shape())));
    }
    if let Some(row) = kv_mask.data().chunks(tk).position(|r| r.iter().all(|&m| m == 0.0)) {
        return Err(CrabError::Degenerate {
            op: "cross_attention",
            detail: format!("all keys masked in row {row}"),
        });
    }
    let q = project(tape, query_seq, p.query)?;
    let k = project(tape, key_value_seq, p.key)?;
    let v = project(tape, key_value_seq, p.value)?;
    let bias = mask_bias(tape, kv_mask, &[b, 1, tk])?;
    let head_dim = p.dim / p.heads;
    let scale = 1.0 / (head_dim as Real).sqrt();

    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 2, h * head_dim, head_dim)?,
                tape.slice(k, 2, h * head_dim, head_dim)?,
                tape.slice(v, 2, h * head_dim, head_dim)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let scores = tape.add(scores, bias)?;
        let weights = tape.softmax(scores, 2)?;
        debug_assert_eq!(tape.shape(weights), &[b, tq, tk]);
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 2)? };
    project(tape, merged, p.output)
}

/// Learned query vector `m` for attention pooling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionPoolingParams {
    pub query: ParamId,
    pub dim: usize,
}

impl AttentionPoolingParams {
    /// `m ~ N(0, 1/sqrt(D))` (standard deviation).
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, init: &mut Init) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        AttentionPoolingParams {
            query: store.add(format!("{name}.m"), ParamGroup::Main, init.normal(&[dim], std)),
            dim,
        }
    }
}

/// Result of attention pooling: `[B, D]` vectors and `[B, T]` weights.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub pooled: Var,
    pub weights: Var,
}

/// `w_i = softmax_i(r_i · m / sqrt(D))` over valid positions, `r = Σ w_i r_i`.
pub fn attention_pool(tape: &mut Tape, p: &AttentionPoolingParams, seq: Var, mask: &Tensor) -> Result<Pooled> {
    let s = tape.shape(seq).to_vec();
    if s.len() != 3 || s[2] != p.dim {
        return Err(CrabError::dim("attention_pool", format!("sequence {s:?} vs dim {}", p.dim)));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    if mask.shape() != [b, t] {
        return Err(CrabError::dim("attention_pool", format!("mask {:?} vs sequence {s:?}", mask.shape())));
    }
    if let Some(row) = mask.data().chunks(t).position(|r| r.iter().all(|&m| m == 0.0)) {
        return Err(CrabError::Degenerate {
            op: "attention_pool",
            detail: format!("no valid position in row {row}"),
        });
    }
    let m = tape.reshape(p.query.var(), &[d, 1])?;
    let scores = tape.matmul(seq, m)?;
    let scores = tape.reshape(scores, &[b, t])?;
    let scores = tape.scale(scores, 1.0 / (d as Real).sqrt())?;
    let bias = mask_bias(tape, mask, &[b, t])?;
    let scores = tape.add(scores, bias)?;
    let weights = tape.softmax(scores, 1)?;
    let w = tape.reshape(weights, &[b, 1, t])?;
    let pooled = tape.matmul(w, seq)?;
    let pooled = tape.reshape(pooled, &[b, d])?;
    Ok(Pooled { pooled, weights })
}
