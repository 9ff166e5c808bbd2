use super::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::error::{CrabError, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Fully connected layer, `y = x W^T + b` with `W` stored `[out, in]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, group: ParamGroup, init: &mut Init) -> Self {
        let weight = store.add(format!("{name}.weight"), group, init.fan_in_uniform(&[out_dim, in_dim]));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]));
        LinearParams {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Square map initialised to the identity.
    pub fn identity(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let weight = store.add(format!("{name}.weight"), group, Tensor::identity(dim));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[dim]));
        LinearParams {
            weight,
            bias,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

pub fn linear(tape: &mut Tape, p: &LinearParams, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.last() != Some(&p.in_dim) {
        return Err(CrabError::dim("linear", format!("input {shape:?} vs in_dim {}", p.in_dim)));
    }
    let rows = tape.value(x).numel() / p.in_dim;
    let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, p.in_dim])? };
    let wt = tape.transpose(p.weight.var())?;
    let y = tape.matmul(flat, wt)?;
    let y = tape.add(y, p.bias.var())?;
    if shape.len() == 2 {
        return Ok(y);
    }
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = p.out_dim;
    tape.reshape(y, &out_shape)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: Real,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), group, Tensor::ones(&[dim])),
            shift: store.add(format!("{name}.shift"), group, Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.shift]
    }
}

pub fn layer_norm(tape: &mut Tape, p: &LayerNormParams, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.gain.var(), p.shift.var(), p.eps)
}

/// Contrastive supervision leg: FC, ReLU, FC into the embedding space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CslParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl CslParams {
    /// Hidden width equals the input width.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, embed_dim: usize, init: &mut Init) -> Self {
        CslParams {
            fc1: LinearParams::new(store, &format!("{name}.fc1"), in_dim, in_dim, ParamGroup::Main, init),
            fc2: LinearParams::new(store, &format!("{name}.fc2"), in_dim, embed_dim, ParamGroup::Main, init),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        let [a, b] = self.fc1.ids();
        let [c, d] = self.fc2.ids();
        [a, b, c, d]
    }
}

/// Raw (not normalised) contrastive embedding of a pooled representation.
pub fn csl_forward(tape: &mut Tape, p: &CslParams, x: Var) -> Result<Var> {
    if tape.shape(x).len() != 2 {
        return Err(CrabError::dim("csl", format!("expected [B, in], got {:?}", tape.shape(x))));
    }
    let h = linear(tape, &p.fc1, x)?;
    let h = tape.relu(h)?;
    linear(tape, &p.fc2, h)
}
