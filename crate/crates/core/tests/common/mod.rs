//! Helpers and f64 reference implementations shared by the integration tests.
#![allow(dead_code)]

use crab_core::nn::{CrossAttentionParams, ParamStore};
use crab_core::tensor::gradcheck::random_tensor;
use crab_core::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fd_eps() -> Real {
    if cfg!(feature = "f64") {
        1e-5
    } else {
        1e-2
    }
}

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn max_diff(a: &[Real], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - y).abs()).fold(0.0, f64::max)
}

pub fn rand_store(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        p.value = random_tensor(&mut rng, p.value.shape(), -0.8, 0.8);
    }
}

pub fn oracle_linear(w: &[f64], b: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let inp = x.len();
    (0..out).map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar GRU recurrence over the valid steps of one sequence.
pub fn oracle_gru_direction(w_ih: &[f64], w_hh: &[f64], bias: &[f64], xs: &[Vec<f64>], hidden: usize) -> Vec<Vec<f64>> {
    let inp = xs[0].len();
    let mut h = vec![0.0; hidden];
    let mut out = Vec::new();
    for x in xs {
        let gate = |g: usize, j: usize, hv: &[f64]| -> f64 {
            let row = g * hidden + j;
            let mut s = bias[row];
            for i in 0..inp {
                s += w_ih[row * inp + i] * x[i];
            }
            for i in 0..hidden {
                s += w_hh[row * hidden + i] * hv[i];
            }
            s
        };
        let z: Vec<f64> = (0..hidden).map(|j| sigmoid(gate(0, j, &h))).collect();
        let r: Vec<f64> = (0..hidden).map(|j| sigmoid(gate(1, j, &h))).collect();
        let rh: Vec<f64> = (0..hidden).map(|j| r[j] * h[j]).collect();
        let cand: Vec<f64> = (0..hidden).map(|j| gate(2, j, &rh).tanh()).collect();
        h = (0..hidden).map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j]).collect();
        out.push(h.clone());
    }
    out
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..w.len() / d).map(|o| (0..d).map(|i| w[o * d + i] * x[i]).sum()).collect()
}

pub fn oracle_cross_attention(store: &ParamStore, p: &CrossAttentionParams, q: &[Vec<f64>], kv: &[Vec<f64>], valid: &[bool]) -> Vec<Vec<f64>> {
    let (wq, wk, wv, wo) = (to64(store.get(p.query)), to64(store.get(p.key)), to64(store.get(p.value)), to64(store.get(p.output)));
    let hd = p.dim / p.heads;
    let ks: Vec<Vec<f64>> = kv.iter().map(|x| matvec(&wk, x)).collect();
    let vs: Vec<Vec<f64>> = kv.iter().map(|x| matvec(&wv, x)).collect();
    q.iter()
        .map(|x| {
            let qv = matvec(&wq, x);
            let mut merged = vec![0.0; p.dim];
            for h in 0..p.heads {
                let range = h * hd..(h + 1) * hd;
                let idx: Vec<usize> = (0..kv.len()).filter(|&j| valid[j]).collect();
                let scores: Vec<f64> = idx
                    .iter()
                    .map(|&j| range.clone().map(|c| qv[c] * ks[j][c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let w = softmax(&scores);
                for (wi, &j) in w.iter().zip(&idx) {
                    for c in range.clone() {
                        merged[c] += wi * vs[j][c];
                    }
                }
            }
            matvec(&wo, &merged)
        })
        .collect()
}

/// Layer norm over one row with biased variance.
pub fn oracle_layer_norm(x: &[f64], gain: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * rstd * gain[i] + shift[i]).collect()
}

/// Attention pooling of valid frames with query `m`; returns (pooled, weights).
pub fn oracle_pool(frames: &[Vec<f64>], m: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = m.len();
    let scores: Vec<f64> = frames.iter().map(|r| r.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
    let w = softmax(&scores);
    let pooled = (0..d).map(|c| frames.iter().zip(&w).map(|(r, wi)| wi * r[c]).sum()).collect();
    (pooled, w)
}

/// Valid-prefix bi-GRU for one sequence: forward states then backward states.
pub fn oracle_bi_gru(store: &ParamStore, p: &crab_core::nn::GruParams, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dir = |d: &crab_core::nn::GruDirection| (to64(store.get(d.w_ih)), to64(store.get(d.w_hh)), to64(store.get(d.bias)));
    let (fw, fu, fb) = dir(&p.forward);
    let (bw, bu, bb) = dir(&p.backward);
    let fwd = oracle_gru_direction(&fw, &fu, &fb, xs, p.hidden);
    let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
    let mut bwd = oracle_gru_direction(&bw, &bu, &bb, &rev, p.hidden);
    bwd.reverse();
    fwd.into_iter().zip(bwd).map(|(a, b)| [a, b].concat()).collect()
}

pub fn random_tensor_in(seed: u64, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), shape, lo, hi)
}

pub fn normalise(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = (r.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Target distribution `c` against predicted `q`, anchor by anchor.
pub fn oracle_mpcl(emb: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let z = normalise(emb);
    let b = z.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for a in 0..b {
        let cands: Vec<usize> = (0..b).filter(|&i| i != a).collect();
        let pos = cands.iter().filter(|&&i| labels[i] == labels[a]).count();
        if pos == 0 {
            continue;
        }
        let denom: f64 = cands.iter().map(|&i| (cos(&z[a], &z[i]) / tau).exp()).sum();
        let mut loss = 0.0;
        for &i in &cands {
            let q = (cos(&z[a], &z[i]) / tau).exp() / denom;
            let c = if labels[i] == labels[a] { 1.0 / pos as f64 } else { 0.0 };
            if c > 0.0 {
                loss -= c * q.ln();
            }
        }
        total += loss;
        anchors += 1;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

pub fn oracle_scl(emb: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let z = normalise(emb);
    let b = z.len();
    let mut per_anchor = Vec::new();
    for a in 0..b {
        let positives: Vec<usize> = (0..b).filter(|&p| p != a && labels[p] == labels[a]).collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..b).filter(|&n| n != a).map(|n| (cos(&z[a], &z[n]) / tau).exp()).sum();
        let s: f64 = positives.iter().map(|&p| ((cos(&z[a], &z[p]) / tau).exp() / denom).ln()).sum();
        per_anchor.push(-s / positives.len() as f64);
    }
    if per_anchor.is_empty() {
        0.0
    } else {
        per_anchor.iter().sum::<f64>() / per_anchor.len() as f64
    }
}

pub fn oracle_wce(logits: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        num += weights[y] * (lse - row[y]);
        den += weights[y];
    }
    num / den
}

/// Mean target entropy over anchors with positives.
pub fn target_entropy(labels: &[usize]) -> f64 {
    let h: Vec<f64> = (0..labels.len())
        .filter_map(|a| {
            let p = labels.iter().enumerate().filter(|&(i, &y)| i != a && y == labels[a]).count();
            (p > 0).then(|| (p as f64).ln())
        })
        .collect();
    if h.is_empty() {
        0.0
    } else {
        h.iter().sum::<f64>() / h.len() as f64
    }
}
