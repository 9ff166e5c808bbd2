use super::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::error::{CrabError, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// One direction of a GRU. Gate rows are stacked `[z; r; h~]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GruDirection {
    /// `[3h, in]`
    pub w_ih: ParamId,
    /// `[3h, h]`
    pub w_hh: ParamId,
    /// `[3h]`
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GruParams {
    pub forward: GruDirection,
    pub backward: GruDirection,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, init: &mut Init) -> Self {
        let mut direction = |dir: &str| GruDirection {
            w_ih: store.add(format!("{name}.{dir}.w_ih"), ParamGroup::Main, init.fan_in_uniform(&[3 * hidden, input])),
            w_hh: store.add(format!("{name}.{dir}.w_hh"), ParamGroup::Main, init.fan_in_uniform(&[3 * hidden, hidden])),
            bias: store.add(format!("{name}.{dir}.bias"), ParamGroup::Main, Tensor::zeros(&[3 * hidden])),
        };
        let forward = direction("fwd");
        let backward = direction("bwd");
        GruParams {
            forward,
            backward,
            input,
            hidden,
        }
    }

    pub fn ids(&self) -> [ParamId; 6] {
        let (f, b) = (self.forward, self.backward);
        [f.w_ih, f.w_hh, f.bias, b.w_ih, b.w_hh, b.bias]
    }
}

/// Valid length of every row of a right-padded `[B, T]` mask. Fails if a
/// row is not a contiguous prefix of ones.
pub fn mask_lengths(mask: &Tensor) -> Result<Vec<usize>> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(CrabError::dim("mask", format!("expected [B, T], got {s:?}")));
    }
    let t = s[1];
    mask.data()
        .chunks(t)
        .enumerate()
        .map(|(b, row)| {
            let len = row.iter().take_while(|&&m| m == 1.0).count();
            if row[len..].iter().any(|&m| m != 0.0) {
                Err(CrabError::Contract(format!("mask row {b} is not a right-padded prefix: {row:?}")))
            } else {
                Ok(len)
            }
        })
        .collect()
}

/// Bidirectional GRU over `[B, T, in]` returning `[B, T, 2h]`
/// (forward states, then backward states).
///
/// Per step: `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h~ = tanh(W_h x + U_h (r ∘ h) + b_h)`, `h' = (1 - z) ∘ h + z ∘ h~`, with
/// `h_0 = 0`. The backward direction starts at each row's last valid step;
/// outputs at padded steps are zero.
pub fn bi_gru(tape: &mut Tape, p: &GruParams, x: Var, mask: &Tensor) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != p.input {
        return Err(CrabError::dim("bi_gru", format!("input {shape:?} vs in_dim {}", p.input)));
    }
    let (b, t) = (shape[0], shape[1]);
    if mask.shape() != [b, t] {
        return Err(CrabError::dim("bi_gru", format!("mask {:?} vs input {shape:?}", mask.shape())));
    }
    mask_lengths(mask)?;
    let fwd = run_direction(tape, p, &p.forward, x, mask, false)?;
    let bwd = run_direction(tape, p, &p.backward, x, mask, true)?;
    tape.concat(&[fwd, bwd], 2)
}

fn run_direction(tape: &mut Tape, p: &GruParams, dir: &GruDirection, x: Var, mask: &Tensor, reverse: bool) -> Result<Var> {
    let h = p.hidden;
    let shape = tape.shape(x).to_vec();
    let (b, t) = (shape[0], shape[1]);

    // Input contributions for all steps at once: [B, T, 3h].
    let flat = tape.reshape(x, &[b * t, p.input])?;
    let w_t = tape.transpose(dir.w_ih.var())?;
    let xw = tape.matmul(flat, w_t)?;
    let xw = tape.add(xw, dir.bias.var())?;
    let xw = tape.reshape(xw, &[b, t, 3 * h])?;

    let u_t = tape.transpose(dir.w_hh.var())?;
    let u_zr = tape.slice(u_t, 1, 0, 2 * h)?;
    let u_h = tape.slice(u_t, 1, 2 * h, h)?;

    let mut state = tape.constant(Tensor::zeros(&[b, h]));
    let mut outputs = vec![None; t];
    let steps: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for step in steps {
        let column: Vec<Real> = (0..b).map(|row| mask.data()[row * t + step]).collect();
        let full = column.iter().all(|&m| m == 1.0);

        let xt = tape.slice(xw, 1, step, 1)?;
        let xt = tape.reshape(xt, &[b, 3 * h])?;
        let x_zr = tape.slice(xt, 1, 0, 2 * h)?;
        let x_h = tape.slice(xt, 1, 2 * h, h)?;

        let h_zr = tape.matmul(state, u_zr)?;
        let zr = tape.add(x_zr, h_zr)?;
        let zr = tape.sigmoid(zr)?;
        let z = tape.slice(zr, 1, 0, h)?;
        let r = tape.slice(zr, 1, h, h)?;

        let gated = tape.mul(r, state)?;
        let h_h = tape.matmul(gated, u_h)?;
        let cand = tape.add(x_h, h_h)?;
        let cand = tape.tanh(cand)?;

        let delta = tape.sub(cand, state)?;
        let delta = tape.mul(z, delta)?;
        let out = if full {
            state = tape.add(state, delta)?;
            state
        } else {
            let m = tape.constant(Tensor::new(vec![b, 1], column)?);
            let delta = tape.mul(m, delta)?;
            state = tape.add(state, delta)?;
            tape.mul(m, state)?
        };
        outputs[step] = Some(tape.reshape(out, &[b, 1, h])?);
    }
    let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
    tape.concat(&outputs, 1)
}
