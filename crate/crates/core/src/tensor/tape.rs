use super::kernels::{gemm_nn, gemm_nt, gemm_tn, Broadcast};
use super::{split_axis, Real, Tensor};
use crate::error::{CrabError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Scale(Real),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Relu,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Scale(Real),
}

#[derive(Clone, Copy, Debug)]
enum MatMulLayout {
    /// Matching batch dims: `batch` independent `[m,k] x [k,n]` products.
    Batched { batch: usize },
    /// Right operand is 2-D and shared across the left operand's batch.
    SharedRight { rows: usize },
    /// Left operand is 2-D and shared across the right operand's batch.
    SharedLeft { batch: usize },
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        a_map: Broadcast,
        b_map: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        layout: MatMulLayout,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LogSoftmax {
        a: Var,
        axis: usize,
    },
    LogSumExp {
        a: Var,
        axis: usize,
    },
    Reduce {
        a: Var,
        axis: Option<usize>,
        /// Per-element weight of the input (mask values), if masked.
        weights: Option<Vec<Real>>,
        /// Per-output divisor (1 for sums).
        divisors: Vec<Real>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<Real>,
        rstd: Vec<Real>,
    },
    L2Normalize {
        a: Var,
        norms: Vec<Real>,
    },
    Gather {
        a: Var,
        index: Vec<usize>,
    },
    Fused {
        a: Var,
        grad: Vec<Real>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every op's inputs precede it.
/// [`Tape::backward`] walks that order in reverse exactly once. Leaf
/// gradients persist across calls and accumulate until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<Real>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(CrabError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    // ----- pointwise -------------------------------------------------------

    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(CrabError::Contract(format!(
                "{op:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Sub => self.sub(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Relu => self.relu(inputs[0]),
            Elementwise::Exp => self.exp(inputs[0]),
            Elementwise::Log => self.log(inputs[0]),
            Elementwise::Tanh => self.tanh(inputs[0]),
            Elementwise::Sigmoid => self.sigmoid(inputs[0]),
            Elementwise::Scale(c) => self.scale(inputs[0], c),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        let (out_shape, a_map, b_map) = if let Some(map) = Broadcast::plan(&sa, &sb).filter(|_| na >= nb) {
            (sa, Broadcast::Same, map)
        } else if let Some(map) = Broadcast::plan(&sb, &sa) {
            (sb, map, Broadcast::Same)
        } else {
            return Err(CrabError::dim(
                "elementwise",
                format!("cannot broadcast {sa:?} with {sb:?}"),
            ));
        };
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let numel: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        match (&a_map, &b_map, kind) {
            (Broadcast::Same, Broadcast::Same, BinaryKind::Add) => {
                out.extend(xa.iter().zip(xb).map(|(x, y)| x + y))
            }
            (Broadcast::Same, Broadcast::Same, BinaryKind::Sub) => {
                out.extend(xa.iter().zip(xb).map(|(x, y)| x - y))
            }
            (Broadcast::Same, Broadcast::Same, BinaryKind::Mul) => {
                out.extend(xa.iter().zip(xb).map(|(x, y)| x * y))
            }
            _ => {
                for i in 0..numel {
                    let (x, y) = (xa[a_map.index(i)], xb[b_map.index(i)]);
                    out.push(match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                    });
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(
            "elementwise",
            value,
            Op::Binary {
                kind,
                a,
                b,
                a_map,
                b_map,
            },
            &[a, b],
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    /// Natural log; any non-positive input is a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(CrabError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary(UnaryKind::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), a)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = self.value(a);
        let f: fn(Real, Real) -> Real = match kind {
            UnaryKind::Relu => |x, _| x.max(0.0),
            UnaryKind::Exp => |x, _| x.exp(),
            UnaryKind::Log => |x, _| x.ln(),
            UnaryKind::Tanh => |x, _| x.tanh(),
            UnaryKind::Sigmoid => |x, _| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            UnaryKind::Scale(_) => |x, c| x * c,
        };
        let c = if let UnaryKind::Scale(c) = kind { c } else { 0.0 };
        let data = x.data().iter().map(|&v| f(v, c)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let name = match kind {
            UnaryKind::Relu => "relu",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Scale(_) => "scale",
        };
        self.push(name, value, Op::Unary { kind, a }, &[a])
    }

    // ----- linear algebra --------------------------------------------------

    /// `[.., m, k] x [.., k, n] -> [.., m, n]`. Batch dims must match, or one
    /// side must be a plain matrix shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(CrabError::dim("matmul", format!("{sa:?} x {sb:?}: operands must be at least 2-D")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(CrabError::dim("matmul", format!("inner dims differ: {sa:?} x {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (layout, batch_shape) = if ba == bb {
            (MatMulLayout::Batched { batch: ba.iter().product() }, ba.to_vec())
        } else if bb.is_empty() {
            let rows = ba.iter().product::<usize>() * m;
            (MatMulLayout::SharedRight { rows }, ba.to_vec())
        } else if ba.is_empty() {
            (MatMulLayout::SharedLeft { batch: bb.iter().product() }, bb.to_vec())
        } else {
            return Err(CrabError::dim("matmul", format!("batch dims not broadcastable: {sa:?} x {sb:?}")));
        };
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let out = match layout {
            MatMulLayout::SharedRight { rows } => {
                let mut c = vec![0.0; rows * n];
                gemm_nn(rows, k, n, xa, xb, &mut c);
                c
            }
            MatMulLayout::Batched { batch } => {
                let mut c = vec![0.0; batch * m * n];
                for i in 0..batch {
                    gemm_nn(
                        m,
                        k,
                        n,
                        &xa[i * m * k..(i + 1) * m * k],
                        &xb[i * k * n..(i + 1) * k * n],
                        &mut c[i * m * n..(i + 1) * m * n],
                    );
                }
                c
            }
            MatMulLayout::SharedLeft { batch } => {
                let mut c = vec![0.0; batch * m * n];
                for i in 0..batch {
                    gemm_nn(
                        m,
                        k,
                        n,
                        xa,
                        &xb[i * k * n..(i + 1) * k * n],
                        &mut c[i * m * n..(i + 1) * m * n],
                    );
                }
                c
            }
        };
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                layout,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() < 2 {
            return Err(CrabError::dim("transpose", format!("rank {} < 2", s.len())));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = x.numel() / (r * c);
        let out = transpose_batched(x.data(), batch, r, c);
        let mut shape = s.to_vec();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let value = Tensor::new(shape, out)?;
        self.push("transpose", value, Op::Transpose { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    // ----- normalisation along an axis ---------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis("softmax", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len).map(|j| out[base + j * inner]).fold(Real::NEG_INFINITY, Real::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { a, axis }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis("log_softmax", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let lse = logsumexp_strided(&out, base, len, inner);
                for j in 0..len {
                    out[base + j * inner] -= lse;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax { a, axis }, &[a])
    }

    /// `log(sum(exp(x)))` along `axis`; the axis is removed from the shape.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis("logsumexp", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                out.push(logsumexp_strided(x.data(), o * len * inner + i, len, inner));
            }
        }
        let value = Tensor::new(reduced_shape(x.shape(), Some(axis)), out)?;
        self.push("logsumexp", value, Op::LogSumExp { a, axis }, &[a])
    }

    // ----- reductions --------------------------------------------------------

    pub fn reduce(&mut self, op: Reduce, a: Var, axis: Option<usize>, mask: Option<&Tensor>) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        if let Some(ax) = axis {
            check_axis("reduce", &shape, ax)?;
        }
        let weights = match mask {
            None => None,
            Some(m) => Some(expand_mask(m, &shape, axis)?),
        };
        let (outer, len, inner) = match axis {
            Some(ax) => split_axis(&shape, ax),
            None => (1, x.numel(), 1),
        };
        let data = x.data();
        let mut sums = vec![0.0f64; outer * inner];
        let mut counts = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    let idx = (o * len + j) * inner + i;
                    let w = weights.as_ref().map_or(1.0, |w| w[idx]);
                    sums[o * inner + i] += f64::from(data[idx] * w);
                    counts[o * inner + i] += f64::from(w);
                }
            }
        }
        let divisors: Vec<Real> = match op {
            Reduce::Sum => vec![1.0; sums.len()],
            Reduce::Mean => {
                if counts.contains(&0.0) {
                    return Err(CrabError::Degenerate {
                        op: "reduce",
                        detail: "mask selects no element for some output".into(),
                    });
                }
                counts.iter().map(|&c| c as Real).collect()
            }
        };
        let out = sums
            .iter()
            .zip(&divisors)
            .map(|(&s, &d)| (s / f64::from(d)) as Real)
            .collect();
        let value = Tensor::new(reduced_shape(&shape, axis), out)?;
        self.push(
            "reduce",
            value,
            Op::Reduce {
                a,
                axis,
                weights,
                divisors,
            },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Sum, a, axis, None)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Mean, a, axis, None)
    }

    /// Mean over `axis` counting only positions where `mask` is 1. The mask
    /// shape must be a leading prefix of the input shape reaching `axis`.
    pub fn masked_mean(&mut self, a: Var, axis: usize, mask: &Tensor) -> Result<Var> {
        self.reduce(Reduce::Mean, a, Some(axis), Some(mask))
    }

    // ----- structure ---------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| CrabError::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rest = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !same_rest {
                return Err(CrabError::dim("concat", format!("{s:?} does not match {base:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let x = self.value(v);
                let chunk = x.shape()[axis] * inner;
                out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Entries `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis("slice", x.shape(), axis)?;
        let (outer, full, inner) = split_axis(x.shape(), axis);
        if len == 0 || start + len > full {
            return Err(CrabError::dim("slice", format!("{start}..{} out of 0..{full}", start + len)));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[from..from + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push("slice", value, Op::Slice { a, axis, start }, &[a])
    }

    /// Per-row normalisation over the last axis (biased variance), then
    /// `gain * xhat + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: Real) -> Result<Var> {
        let xs = self.value(x);
        let d = *xs.shape().last().unwrap();
        if self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(CrabError::dim("layer_norm", format!("feature dim {d} vs gain {:?}", self.shape(gain))));
        }
        let rows = xs.numel() / d;
        let (g, b) = (self.value(gain).data(), self.value(shift).data());
        let mut xhat = Vec::with_capacity(xs.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.numel());
        for r in 0..rows {
            let row = &xs.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + f64::from(eps)).sqrt();
            rstd.push(rs as Real);
            for (j, &v) in row.iter().enumerate() {
                let h = ((f64::from(v) - mean) * rs) as Real;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            },
            &[x, gain, shift],
        )
    }

    /// Scale each vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().unwrap();
        let rows = x.numel() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.numel());
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let sq: f64 = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
            let n = (sq + 1e-12).sqrt() as Real;
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push("l2_normalize", value, Op::L2Normalize { a, norms }, &[a])
    }

    /// `out[b] = a[b, index[b]]` for a 2-D input.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() != 2 || s[0] != index.len() {
            return Err(CrabError::dim("gather", format!("{s:?} with {} indices", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[1]) {
            return Err(CrabError::dim("gather", format!("index {bad} out of range 0..{}", s[1])));
        }
        let out = index.iter().enumerate().map(|(r, &c)| x.data()[r * s[1] + c]).collect();
        let value = Tensor::new(vec![index.len()], out)?;
        self.push(
            "gather",
            value,
            Op::Gather {
                a,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    /// A scalar objective of `a` evaluated outside the tape, together with
    /// its gradient with respect to `a`. Lets a loss be computed in higher
    /// precision while staying differentiable.
    pub fn fused_scalar(&mut self, a: Var, value: f64, grad: &[f64]) -> Result<Var> {
        let n = self.value(a).numel();
        if grad.len() != n {
            return Err(CrabError::dim("fused_scalar", format!("{} gradient entries for {n} inputs", grad.len())));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(CrabError::NonFinite { op: "fused_scalar" });
        }
        let grad = grad.iter().map(|&g| g as Real).collect();
        self.push("fused_scalar", Tensor::scalar(value as Real), Op::Fused { a, grad }, &[a])
    }

    // ----- backward ----------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Gradients of leaves that require
    /// grad are added to any gradient already stored for them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CrabError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<Real>>> = Vec::new();
        work.resize_with(loss.0 + 1, || None);
        work[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut work);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[Real], work: &mut [Option<Vec<Real>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Binary {
                kind,
                a,
                b,
                a_map,
                b_map,
            } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let ga = slot(work, *a, xa.len());
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => gk,
                            BinaryKind::Mul => gk * xb[b_map.index(k)],
                        };
                        ga[a_map.index(k)] += d;
                    }
                }
                if self.requires_grad(*b) {
                    let gb = slot(work, *b, xb.len());
                    for (k, &gk) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => gk,
                            BinaryKind::Sub => -gk,
                            BinaryKind::Mul => gk * xa[a_map.index(k)],
                        };
                        gb[b_map.index(k)] += d;
                    }
                }
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                let ga = slot(work, *a, x.len());
                for k in 0..g.len() {
                    ga[k] += g[k]
                        * match kind {
                            UnaryKind::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Exp => y[k],
                            UnaryKind::Log => 1.0 / x[k],
                            UnaryKind::Tanh => 1.0 - y[k] * y[k],
                            UnaryKind::Sigmoid => y[k] * (1.0 - y[k]),
                            UnaryKind::Scale(c) => *c,
                        };
                }
            }
            Op::MatMul {
                a,
                b,
                layout,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let ga = slot(work, *a, xa.len());
                    match *layout {
                        MatMulLayout::SharedRight { rows } => gemm_nt(rows, n, k, g, xb, ga),
                        MatMulLayout::Batched { batch } => {
                            for t in 0..batch {
                                gemm_nt(
                                    m,
                                    n,
                                    k,
                                    &g[t * m * n..(t + 1) * m * n],
                                    &xb[t * k * n..(t + 1) * k * n],
                                    &mut ga[t * m * k..(t + 1) * m * k],
                                );
                            }
                        }
                        MatMulLayout::SharedLeft { batch } => {
                            for t in 0..batch {
                                gemm_nt(m, n, k, &g[t * m * n..(t + 1) * m * n], &xb[t * k * n..(t + 1) * k * n], ga);
                            }
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let gb = slot(work, *b, xb.len());
                    match *layout {
                        MatMulLayout::SharedRight { rows } => gemm_tn(k, rows, n, xa, g, gb),
                        MatMulLayout::Batched { batch } => {
                            for t in 0..batch {
                                gemm_tn(
                                    k,
                                    m,
                                    n,
                                    &xa[t * m * k..(t + 1) * m * k],
                                    &g[t * m * n..(t + 1) * m * n],
                                    &mut gb[t * k * n..(t + 1) * k * n],
                                );
                            }
                        }
                        MatMulLayout::SharedLeft { batch } => {
                            for t in 0..batch {
                                gemm_tn(k, m, n, xa, &g[t * m * n..(t + 1) * m * n], &mut gb[t * k * n..(t + 1) * k * n]);
                            }
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                let s = self.shape(*a);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c);
                // g has the transposed layout [.., c, r].
                let back = transpose_batched(g, batch, c, r);
                add_into(slot(work, *a, back.len()), &back);
            }
            Op::Reshape { a } => add_into(slot(work, *a, g.len()), g),
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let ga = slot(work, *a, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: Real = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            ga[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let ga = slot(work, *a, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let total: Real = (0..len).map(|j| g[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            ga[p] += g[p] - y[p].exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExp { a, axis } => {
                let x = self.value(*a);
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let xd = x.data();
                let ga = slot(work, *a, xd.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let r = o * inner + i;
                        for j in 0..len {
                            let p = base + j * inner;
                            ga[p] += g[r] * (xd[p] - y[r]).exp();
                        }
                    }
                }
            }
            Op::Reduce {
                a,
                axis,
                weights,
                divisors,
            } => {
                let shape = self.shape(*a).to_vec();
                let (outer, len, inner) = match axis {
                    Some(ax) => split_axis(&shape, *ax),
                    None => (1, shape.iter().product(), 1),
                };
                let ga = slot(work, *a, outer * len * inner);
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            let idx = (o * len + j) * inner + i;
                            let r = o * inner + i;
                            let w = weights.as_ref().map_or(1.0, |w| w[idx]);
                            ga[idx] += g[r] * w / divisors[r];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let gv = slot(work, v, outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut gv[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let full_shape = self.shape(*a).to_vec();
                let (outer, full, inner) = split_axis(&full_shape, *axis);
                let len = node.value.shape()[*axis];
                let ga = slot(work, *a, outer * full * inner);
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    add_into(&mut ga[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let rows = g.len() / d;
                let gv = self.value(*gain).data();
                if self.requires_grad(*gain) {
                    let gg = slot(work, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.requires_grad(*shift) {
                    let gs = slot(work, *shift, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gs[j] += g[r * d + j];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gx = slot(work, *x, g.len());
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_xhat = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_xhat += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as Real;
                        mean_dh_xhat /= d as Real;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_xhat);
                        }
                    }
                }
            }
            Op::L2Normalize { a, norms } => {
                let d = *node.value.shape().last().unwrap();
                let ga = slot(work, *a, g.len());
                for (r, &n) in norms.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let gy: Real = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for p in row {
                        ga[p] += (g[p] - y[p] * gy) / n;
                    }
                }
            }
            Op::Gather { a, index } => {
                let cols = self.shape(*a)[1];
                let ga = slot(work, *a, index.len() * cols);
                for (r, &c) in index.iter().enumerate() {
                    ga[r * cols + c] += g[r];
                }
            }
            Op::Fused { a, grad } => {
                let ga = slot(work, *a, grad.len());
                ga.iter_mut().zip(grad).for_each(|(d, s)| *d += g[0] * s);
            }
        }
    }
}

fn slot(work: &mut [Option<Vec<Real>>], v: Var, len: usize) -> &mut Vec<Real> {
    work[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [Real], src: &[Real]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn transpose_batched(x: &[Real], batch: usize, r: usize, c: usize) -> Vec<Real> {
    let mut out = vec![0.0; x.len()];
    for t in 0..batch {
        let off = t * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = x[off + i * c + j];
            }
        }
    }
    out
}

fn logsumexp_strided(x: &[Real], base: usize, len: usize, stride: usize) -> Real {
    let max = (0..len).map(|j| x[base + j * stride]).fold(Real::NEG_INFINITY, Real::max);
    let sum: Real = (0..len).map(|j| (x[base + j * stride] - max).exp()).sum();
    max + sum.ln()
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(CrabError::dim(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        Some(ax) if shape.len() > 1 => {
            let mut s = shape.to_vec();
            s.remove(ax);
            s
        }
        _ => vec![1],
    }
}

/// Broadcast a 0/1 mask whose shape is a leading prefix of `shape` to one
/// weight per input element.
fn expand_mask(mask: &Tensor, shape: &[usize], axis: Option<usize>) -> Result<Vec<Real>> {
    let ms = mask.shape();
    let covers_axis = axis.map_or(ms.len() == shape.len(), |ax| ms.len() > ax);
    if ms.len() > shape.len() || ms != &shape[..ms.len()] || !covers_axis {
        return Err(CrabError::dim("reduce", format!("mask {ms:?} is not a prefix of {shape:?} covering the axis")));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(CrabError::Contract("mask values must be 0 or 1".into()));
    }
    let inner: usize = shape[ms.len()..].iter().product();
    Ok(mask
        .data()
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, inner))
        .collect())
}
