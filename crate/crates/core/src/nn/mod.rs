//! Parameterised layers. Every layer is a pure function of its parameters
//! and inputs, recorded on a [`Tape`](crate::Tape).

mod attention;
mod gru;
mod linear;
mod params;

pub use attention::{attention_pool, cross_attention, AttentionPoolingParams, CrossAttentionParams, Pooled};
pub use gru::{bi_gru, mask_lengths, GruDirection, GruParams};
pub use linear::{csl_forward, layer_norm, linear, CslParams, LayerNormParams, LinearParams};
pub use params::{Init, Param, ParamGroup, ParamId, ParamStore};

use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Additive bias for masked softmax: 0 where `mask` is 1, -1e9 where 0.
pub(crate) fn mask_bias(tape: &mut Tape, mask: &Tensor, shape: &[usize]) -> Result<Var> {
    let data: Vec<Real> = mask.data().iter().map(|&m| (m - 1.0) * 1e9).collect();
    Ok(tape.constant(Tensor::new(shape.to_vec(), data)?))
}
