use crab_core::nn::{
    attention_pool, bi_gru, cross_attention, csl_forward, layer_norm, linear, AttentionPoolingParams, CrossAttentionParams, CslParams,
    GruParams, Init, LayerNormParams, LinearParams, ParamGroup, ParamStore,
};
use crab_core::tensor::gradcheck::{self, random_tensor};
use crab_core::{CrabError, Real, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
mod common;

use common::*;
use rand_chacha::ChaCha8Rng;

/// Parameters first, then data inputs, so `ParamId::var` resolves on the
/// gradient-check tape.
fn layer_grad_suite<P>(name: &str, eps: Real, make: impl Fn(&mut ParamStore) -> P, data: &[&[usize]], build: impl Fn(&mut Tape, &P, &[Var]) -> crab_core::Result<Var>) {
    for seed in 0..20 {
        let mut store = ParamStore::new();
        let p = make(&mut store);
        rand_store(&mut store, 100 + seed);
        let n = store.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
        inputs.extend(data.iter().map(|s| random_tensor(&mut rng, s, -1.0, 1.0)));
        let errs = gradcheck::check(&inputs, eps, seed, |t, v| build(t, &p, &v[n..])).unwrap();
        for (i, e) in errs.iter().enumerate() {
            assert!(*e < 1e-3, "{name}: seed {seed} input {i} relative error {e}");
        }
    }
}

// ----- linear / layer norm / CSL -------------------------------------------

#[test]
fn linear_matches_composition_oracle() {
    let mut store = ParamStore::new();
    let p = LinearParams::new(&mut store, "fc", 5, 3, ParamGroup::Main, &mut Init::new(1));
    rand_store(&mut store, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[2, 4, 5], -1.0, 1.0);
    let (w, b) = (to64(store.get(p.weight)), to64(store.get(p.bias)));
    let want: Vec<f64> = to64(&x).chunks(5).flat_map(|row| oracle_linear(&w, &b, row, 3)).collect();
    let mut tape = store.tape(false);
    let vx = tape.constant(x);
    let y = linear(&mut tape, &p, vx).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 3]);
    assert!(max_diff(tape.value(y).data(), &want) < 1e-6);
}

#[test]
fn layer_norm_moments() {
    let mut store = ParamStore::new();
    let p = LayerNormParams::new(&mut store, "ln", 64, ParamGroup::Main);
    let (g, s) = (1.7, -0.4);
    store.get_mut(p.gain).data_mut().fill(g);
    store.get_mut(p.shift).data_mut().fill(s);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, &[3, 64], -5.0, 5.0);
    let mut tape = store.tape(false);
    let vx = tape.constant(x);
    let y = layer_norm(&mut tape, &p, vx).unwrap();
    for row in tape.value(y).data().chunks(64) {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / 64.0;
        let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / 64.0;
        assert!((mean - f64::from(s)).abs() < 1e-5);
        assert!((var - f64::from(g * g)).abs() < 1e-3);
    }
}

#[test]
fn csl_matches_two_linear_oracle() {
    let mut store = ParamStore::new();
    let p = CslParams::new(&mut store, "csl", 4, 3, &mut Init::new(0));
    rand_store(&mut store, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&mut rng, &[2, 4], -1.0, 1.0);
    let want: Vec<f64> = to64(&x)
        .chunks(4)
        .flat_map(|row| {
            let h = oracle_linear(&to64(store.get(p.fc1.weight)), &to64(store.get(p.fc1.bias)), row, 4);
            let h: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
            oracle_linear(&to64(store.get(p.fc2.weight)), &to64(store.get(p.fc2.bias)), &h, 3)
        })
        .collect();
    let mut tape = store.tape(false);
    let vx = tape.constant(x);
    let e = csl_forward(&mut tape, &p, vx).unwrap();
    assert!(max_diff(tape.value(e).data(), &want) < 1e-6);
}

#[test]
fn csl_identity_passes_positive_part() {
    let mut store = ParamStore::new();
    let p = CslParams::new(&mut store, "csl", 2, 2, &mut Init::new(0));
    *store.get_mut(p.fc1.weight) = Tensor::identity(2);
    *store.get_mut(p.fc2.weight) = Tensor::identity(2);
    let mut tape = store.tape(false);
    let x = tape.constant(Tensor::new(vec![1, 2], vec![0.7, -0.3]).unwrap());
    let e = csl_forward(&mut tape, &p, x).unwrap();
    assert_eq!(tape.value(e).data(), &[0.7, 0.0]);
}

// ----- bi-GRU --------------------------------------------------------------

fn gru_fixture(seed: u64) -> (ParamStore, GruParams) {
    let mut store = ParamStore::new();
    let p = GruParams::new(&mut store, "gru", 3, 4, &mut Init::new(seed));
    rand_store(&mut store, seed + 1);
    (store, p)
}

#[test]
fn bi_gru_matches_scalar_recurrence() {
    let (store, p) = gru_fixture(21);
    let (b, t, h) = (2, 5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = random_tensor(&mut rng, &[b, t, 3], -1.0, 1.0);
    let lengths = [5usize, 3];
    let mask = Tensor::new(vec![b, t], (0..b).flat_map(|r| (0..t).map(move |s| if s < lengths[r] { 1.0 } else { 0.0 })).collect()).unwrap();

    let mut tape = store.tape(false);
    let vx = tape.constant(x.clone());
    let y = bi_gru(&mut tape, &p, vx, &mask).unwrap();
    let got = tape.value(y);
    assert_eq!(got.shape(), &[b, t, 2 * h]);

    let dir = |d: &crab_core::nn::GruDirection| (to64(store.get(d.w_ih)), to64(store.get(d.w_hh)), to64(store.get(d.bias)));
    let (fw, fu, fb) = dir(&p.forward);
    let (bw, bu, bb) = dir(&p.backward);
    for row in 0..b {
        let n = lengths[row];
        let xs: Vec<Vec<f64>> = (0..n).map(|s| (0..3).map(|i| f64::from(x.at(&[row, s, i]))).collect()).collect();
        let fwd = oracle_gru_direction(&fw, &fu, &fb, &xs, h);
        let rev_xs: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut bwd = oracle_gru_direction(&bw, &bu, &bb, &rev_xs, h);
        bwd.reverse();
        for s in 0..t {
            for j in 0..h {
                let (want_f, want_b) = if s < n { (fwd[s][j], bwd[s][j]) } else { (0.0, 0.0) };
                assert!((f64::from(got.at(&[row, s, j])) - want_f).abs() < 1e-5);
                assert!((f64::from(got.at(&[row, s, h + j])) - want_b).abs() < 1e-5);
                if s >= n {
                    assert_eq!(got.at(&[row, s, j]), 0.0);
                    assert_eq!(got.at(&[row, s, h + j]), 0.0);
                }
            }
        }
    }
}

#[test]
fn bi_gru_rejects_non_prefix_mask() {
    let (store, p) = gru_fixture(1);
    let mut tape = store.tape(false);
    let x = tape.constant(Tensor::zeros(&[1, 3, 3]));
    let mask = Tensor::new(vec![1, 3], vec![1., 0., 1.]).unwrap();
    assert!(matches!(bi_gru(&mut tape, &p, x, &mask), Err(CrabError::Contract(_))));
}

#[test]
fn bi_gru_padding_invariance() {
    let (store, p) = gru_fixture(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[1, 3, 3], -1.0, 1.0);
    let mut padded = x.data().to_vec();
    padded.extend([9.0; 6]);
    let padded = Tensor::new(vec![1, 5, 3], padded).unwrap();
    let mask = Tensor::new(vec![1, 5], vec![1., 1., 1., 0., 0.]).unwrap();

    let mut tape = store.tape(false);
    let (a, b) = (tape.constant(x), tape.constant(padded));
    let ya = bi_gru(&mut tape, &p, a, &Tensor::ones(&[1, 3])).unwrap();
    let yb = bi_gru(&mut tape, &p, b, &mask).unwrap();
    let yb = tape.slice(yb, 1, 0, 3).unwrap();
    assert!(tape.value(ya).max_abs_diff(tape.value(yb)) < 1e-6);
}

// ----- attention ------------------------------------------------------------

fn attention_fixture(dim: usize, heads: usize, seed: u64) -> (ParamStore, CrossAttentionParams) {
    let mut store = ParamStore::new();
    let p = CrossAttentionParams::new(&mut store, "xattn", dim, heads, &mut Init::new(seed)).unwrap();
    rand_store(&mut store, seed + 7);
    (store, p)
}

#[test]
fn cross_attention_single_valid_key() {
    let (store, p) = attention_fixture(4, 1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = random_tensor(&mut rng, &[1, 2, 4], -1.0, 1.0);
    let kv = random_tensor(&mut rng, &[1, 3, 4], -1.0, 1.0);
    let mask = Tensor::new(vec![1, 3], vec![1., 0., 0.]).unwrap();
    let mut tape = store.tape(false);
    let (vq, vkv) = (tape.constant(q), tape.constant(kv.clone()));
    let out = cross_attention(&mut tape, &p, vq, vkv, &mask).unwrap();
    let key0: Vec<f64> = (0..4).map(|i| f64::from(kv.at(&[0, 0, i]))).collect();
    let want = matvec(&to64(store.get(p.output)), &matvec(&to64(store.get(p.value)), &key0));
    for row in tape.value(out).data().chunks(4) {
        assert!(max_diff(row, &want) < 1e-6);
    }
}

#[test]
fn cross_attention_identical_keys_give_uniform_weights() {
    let (store, p) = attention_fixture(4, 1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random_tensor(&mut rng, &[1, 2, 4], -1.0, 1.0);
    let key = random_tensor(&mut rng, &[1, 1, 4], -1.0, 1.0);
    let values: Vec<Real> = key.data().iter().cycle().take(12).cloned().collect();
    let kv = Tensor::new(vec![1, 3, 4], values).unwrap();
    let mut tape = store.tape(false);
    let (vq, vkv) = (tape.constant(q), tape.constant(kv));
    let out = cross_attention(&mut tape, &p, vq, vkv, &Tensor::ones(&[1, 3])).unwrap();
    let want = matvec(&to64(store.get(p.output)), &matvec(&to64(store.get(p.value)), &to64(&key)));
    for row in tape.value(out).data().chunks(4) {
        assert!(max_diff(row, &want) < 1e-6);
    }
}

fn check_attention_oracle(heads: usize) {
    let (store, p) = attention_fixture(4, heads, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = random_tensor(&mut rng, &[1, 2, 4], -1.0, 1.0);
    let kv = random_tensor(&mut rng, &[1, 3, 4], -1.0, 1.0);
    let mask = Tensor::new(vec![1, 3], vec![1., 1., 0.]).unwrap();
    let rows = |t: &Tensor, n: usize| -> Vec<Vec<f64>> { to64(t).chunks(4).take(n).map(<[f64]>::to_vec).collect() };
    let want = oracle_cross_attention(&store, &p, &rows(&q, 2), &rows(&kv, 3), &[true, true, false]);
    let mut tape = store.tape(false);
    let (vq, vkv) = (tape.constant(q), tape.constant(kv));
    let out = cross_attention(&mut tape, &p, vq, vkv, &mask).unwrap();
    let flat: Vec<f64> = want.concat();
    assert!(max_diff(tape.value(out).data(), &flat) < 1e-6);
}

#[test]
fn cross_attention_matches_formula_oracle() {
    check_attention_oracle(1);
    check_attention_oracle(2);
}

#[test]
fn cross_attention_all_masked_is_degenerate() {
    let (store, p) = attention_fixture(4, 1, 1);
    let mut tape = store.tape(false);
    let q = tape.constant(Tensor::zeros(&[2, 2, 4]));
    let kv = tape.constant(Tensor::zeros(&[2, 3, 4]));
    let mask = Tensor::new(vec![2, 3], vec![1., 0., 0., 0., 0., 0.]).unwrap();
    assert!(matches!(cross_attention(&mut tape, &p, q, kv, &mask), Err(CrabError::Degenerate { .. })));
    let mut store2 = ParamStore::new();
    assert!(CrossAttentionParams::new(&mut store2, "x", 5, 2, &mut Init::new(0)).is_err());
}

fn pool_fixture(dim: usize, seed: u64) -> (ParamStore, AttentionPoolingParams) {
    let mut store = ParamStore::new();
    let p = AttentionPoolingParams::new(&mut store, "pool", dim, &mut Init::new(seed));
    (store, p)
}

#[test]
fn attention_pool_identical_frames_and_single_frame() {
    let (store, p) = pool_fixture(3, 1);
    let frame: [Real; 3] = [0.5, -1.0, 2.0];
    let seq = Tensor::new(vec![1, 4, 3], frame.iter().cycle().take(12).cloned().collect()).unwrap();
    let mask = Tensor::new(vec![1, 4], vec![1., 1., 1., 0.]).unwrap();
    let mut tape = store.tape(false);
    let s = tape.constant(seq);
    let out = attention_pool(&mut tape, &p, s, &mask).unwrap();
    let pooled = tape.value(out.pooled).data();
    for (a, b) in pooled.iter().zip(frame) {
        assert!((a - b).abs() < 1e-6);
    }
    let w = tape.value(out.weights).data();
    for &wi in &w[..3] {
        assert!((f64::from(wi) - 1.0 / 3.0).abs() < 1e-6);
    }
    assert!(w[3].abs() < 1e-12);

    let single = tape.constant(Tensor::new(vec![1, 1, 3], frame.to_vec()).unwrap());
    let out = attention_pool(&mut tape, &p, single, &Tensor::ones(&[1, 1])).unwrap();
    assert_eq!(tape.value(out.pooled).data(), &frame);
    assert_eq!(tape.value(out.weights).data(), &[1.0]);

    let empty = tape.constant(Tensor::zeros(&[1, 2, 3]));
    assert!(matches!(attention_pool(&mut tape, &p, empty, &Tensor::zeros(&[1, 2])), Err(CrabError::Degenerate { .. })));
}

#[test]
fn attention_pool_matches_formula_oracle() {
    let (store, p) = pool_fixture(4, 2);
    let m = to64(store.get(p.query));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = random_tensor(&mut rng, &[1, 3, 4], -1.0, 1.0);
    let frames: Vec<Vec<f64>> = to64(&seq).chunks(4).map(<[f64]>::to_vec).collect();
    let scores: Vec<f64> = frames.iter().map(|r| r.iter().zip(&m).map(|(a, b)| a * b).sum::<f64>() / 2.0).collect();
    let w = softmax(&scores);
    let want: Vec<f64> = (0..4).map(|c| frames.iter().zip(&w).map(|(r, wi)| wi * r[c]).sum()).collect();
    let mut tape = store.tape(false);
    let s = tape.constant(seq);
    let out = attention_pool(&mut tape, &p, s, &Tensor::ones(&[1, 3])).unwrap();
    assert!(max_diff(tape.value(out.pooled).data(), &want) < 1e-6);
    assert!(max_diff(tape.value(out.weights).data(), &w) < 1e-6);
}

// ----- gradient checks --------------------------------------------------------

#[test]
fn layer_gradients() {
    let mask = Tensor::new(vec![2, 4], vec![1., 1., 1., 1., 1., 1., 0., 0.]).unwrap();
    layer_grad_suite(
        "linear",
        fd_eps(),
        |s| LinearParams::new(s, "fc", 4, 3, ParamGroup::Main, &mut Init::new(0)),
        &[&[2, 3, 4]],
        |t, p, x| linear(t, p, x[0]),
    );
    layer_grad_suite(
        "layer_norm",
        fd_eps(),
        |s| LayerNormParams::new(s, "ln", 5, ParamGroup::Main),
        &[&[3, 5]],
        |t, p, x| layer_norm(t, p, x[0]),
    );
    // Smaller step so perturbations rarely straddle the ReLU kink.
    layer_grad_suite("csl", fd_eps() / 10.0, |s| CslParams::new(s, "csl", 4, 3, &mut Init::new(0)), &[&[3, 4]], |t, p, x| csl_forward(t, p, x[0]));
    layer_grad_suite(
        "bi_gru",
        fd_eps(),
        |s| GruParams::new(s, "gru", 3, 4, &mut Init::new(0)),
        &[&[2, 4, 3]],
        |t, p, x| bi_gru(t, p, x[0], &mask),
    );
    layer_grad_suite(
        "cross_attention",
        fd_eps(),
        |s| CrossAttentionParams::new(s, "xa", 4, 2, &mut Init::new(0)).unwrap(),
        &[&[2, 3, 4], &[2, 4, 4]],
        |t, p, x| cross_attention(t, p, x[0], x[1], &mask),
    );
    layer_grad_suite(
        "attention_pool",
        fd_eps(),
        |s| AttentionPoolingParams::new(s, "pool", 4, &mut Init::new(0)),
        &[&[2, 4, 4]],
        |t, p, x| attention_pool(t, p, x[0], &mask).map(|o| o.pooled),
    );
}

// ----- properties --------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooled_output_in_convex_hull(seed in 0u64..10_000, valid in 1usize..=5) {
        let (store, p) = pool_fixture(3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = random_tensor(&mut rng, &[1, 5, 3], -3.0, 3.0);
        let mask = Tensor::new(vec![1, 5], (0..5).map(|i| if i < valid { 1.0 } else { 0.0 }).collect()).unwrap();
        let mut tape = store.tape(false);
        let s = tape.constant(seq.clone());
        let out = attention_pool(&mut tape, &p, s, &mask).unwrap();
        let pooled = tape.value(out.pooled).data();
        for c in 0..3 {
            let col: Vec<Real> = (0..valid).map(|i| seq.at(&[0, i, c])).collect();
            let lo = col.iter().cloned().fold(Real::INFINITY, Real::min);
            let hi = col.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            prop_assert!(pooled[c] >= lo - 1e-5 && pooled[c] <= hi + 1e-5);
        }
        let wsum: Real = tape.value(out.weights).data().iter().sum();
        prop_assert!((wsum - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cross_attention_key_permutation_invariant(seed in 0u64..10_000) {
        let (store, p) = attention_fixture(4, 1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_tensor(&mut rng, &[1, 2, 4], -1.0, 1.0);
        let kv = random_tensor(&mut rng, &[1, 3, 4], -1.0, 1.0);
        let perm = [2usize, 0, 1];
        let permuted: Vec<Real> = perm.iter().flat_map(|&j| kv.data()[j * 4..(j + 1) * 4].to_vec()).collect();
        let permuted = Tensor::new(vec![1, 3, 4], permuted).unwrap();
        let mut tape = store.tape(false);
        let (vq, a, b) = (tape.constant(q), tape.constant(kv), tape.constant(permuted));
        let ya = cross_attention(&mut tape, &p, vq, a, &Tensor::ones(&[1, 3])).unwrap();
        let yb = cross_attention(&mut tape, &p, vq, b, &Tensor::ones(&[1, 3])).unwrap();
        prop_assert!(tape.value(ya).max_abs_diff(tape.value(yb)) < 1e-6);
    }
}
