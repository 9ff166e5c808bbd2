use crab_core::losses::{
    combined_objective, contrastive_loss, mpcl_loss, scl_loss, weighted_cross_entropy, ClassWeights, ContrastiveConfig, ContrastiveVariant,
    LossConfig, Objective,
};
use crab_core::tensor::gradcheck::{self, random_tensor};
use crab_core::{CrabError, Real, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::{fd_eps, oracle_mpcl, oracle_scl, oracle_wce, target_entropy};

fn cfg(tau: f64) -> ContrastiveConfig {
    ContrastiveConfig {
        tau,
        ..Default::default()
    }
}

fn mat(r: &[&[Real]]) -> Tensor {
    Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

fn value(tape: &Tape, v: Var) -> f64 {
    f64::from(tape.value(v).data()[0])
}

fn eval_contrastive(emb: &Tensor, labels: &[usize], c: &ContrastiveConfig) -> crab_core::Result<(f64, bool)> {
    let mut tape = Tape::new();
    let e = tape.param(emb.clone());
    let out = contrastive_loss(&mut tape, e, labels, c)?;
    Ok((value(&tape, out.loss), out.skipped))
}

fn mpcl(emb: &Tensor, labels: &[usize], tau: f64) -> f64 {
    eval_contrastive(emb, labels, &cfg(tau)).unwrap().0
}

fn scl(emb: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let c = ContrastiveConfig {
        variant: ContrastiveVariant::Scl,
        ..cfg(tau)
    };
    eval_contrastive(emb, labels, &c).unwrap().0
}

// ----- class weights and cross-entropy -------------------------------------

#[test]
fn inverse_frequency_weights_for_four_class_counts() {
    let w = ClassWeights::from_counts(&[1103, 1636, 1708, 1084]).unwrap();
    for (got, want) in w.weights.iter().zip([5.0145, 3.3808, 3.2383, 5.1024]) {
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
    assert_eq!(w.total, 5531);
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let uniform = tape.param(Tensor::zeros(&[1, 2]));
    let l = weighted_cross_entropy(&mut tape, uniform, &[1], None).unwrap();
    assert!((value(&tape, l) - 2f64.ln()).abs() < 1e-6);

    let confident = tape.param(mat(&[&[40.0, 0.0, 0.0]]));
    let l = weighted_cross_entropy(&mut tape, confident, &[0], None).unwrap();
    assert!(value(&tape, l).abs() < 1e-6);

    let bad = tape.param(Tensor::zeros(&[2, 3]));
    assert!(matches!(weighted_cross_entropy(&mut tape, bad, &[0, 3], None), Err(CrabError::Contract(_))));
    assert!(weighted_cross_entropy(&mut tape, bad, &[0], None).is_err());
}

#[test]
fn weighted_cross_entropy_matches_per_sample_oracle() {
    let w = ClassWeights::from_counts(&[50, 25, 25]).unwrap();
    let logits = mat(&[&[0.3, -1.2, 2.0], &[1.5, 0.1, -0.4], &[-0.7, 0.9, 0.2]]);
    let labels = [0, 2, 1];
    let mut tape = Tape::new();
    let x = tape.param(logits.clone());
    let l = weighted_cross_entropy(&mut tape, x, &labels, Some(&w)).unwrap();
    let want = oracle_wce(&rows(&logits), &labels, &w.weights);
    assert!((value(&tape, l) - want).abs() < 1e-6, "{} vs {want}", value(&tape, l));
}

#[test]
fn unit_weights_match_plain_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let logits = random_tensor(&mut rng, &[6, 4], -3.0, 3.0);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let equal = ClassWeights::from_counts(&[3, 3, 3, 3]).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(logits.clone());
        let plain = weighted_cross_entropy(&mut tape, x, &labels, None).unwrap();
        let weighted = weighted_cross_entropy(&mut tape, x, &labels, Some(&equal)).unwrap();
        assert!((value(&tape, plain) - value(&tape, weighted)).abs() < 1e-7);
        let want = oracle_wce(&rows(&logits), &labels, &[1.0; 4]);
        assert!((value(&tape, plain) - want).abs() < 1e-6);
    }
}

// ----- contrastive ----------------------------------------------------------

#[test]
fn mpcl_identical_embeddings_give_uniform_q() {
    let emb = Tensor::ones(&[3, 4]);
    let (l, skipped) = eval_contrastive(&emb, &[0, 0, 1], &cfg(0.1)).unwrap();
    assert!(!skipped);
    assert!((l - 2f64.ln()).abs() < 1e-6, "{l}");
}

#[test]
fn no_positive_pairs_skip_with_zero() {
    let emb = mat(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
    for variant in [ContrastiveVariant::Mpcl, ContrastiveVariant::Scl] {
        let c = ContrastiveConfig { variant, ..cfg(0.1) };
        let (l, skipped) = eval_contrastive(&emb, &[0, 1, 2], &c).unwrap();
        assert!(skipped);
        assert_eq!(l, 0.0);
    }
}

#[test]
fn contrastive_preconditions() {
    let one = Tensor::ones(&[1, 3]);
    assert!(matches!(eval_contrastive(&one, &[0], &cfg(0.1)), Err(CrabError::Contract(_))));
    let two = Tensor::ones(&[2, 3]);
    assert!(eval_contrastive(&two, &[0, 0], &cfg(0.0)).is_err());
    let keep_self = ContrastiveConfig {
        exclude_self: false,
        ..cfg(0.1)
    };
    assert!(eval_contrastive(&two, &[0, 0], &keep_self).is_err());
}

#[test]
fn mpcl_matches_brute_force_on_fixed_batch() {
    let emb = mat(&[&[1.0, 0.0], &[0.8, 0.6], &[0.0, 1.0], &[-0.6, 0.8]]);
    let labels = [0, 0, 1, 1];
    let want = oracle_mpcl(&rows(&emb), &labels, 0.1);
    let got = mpcl(&emb, &labels, 0.1);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn scl_identical_embeddings_and_brute_force() {
    let same = Tensor::ones(&[4, 3]);
    let labels = [0, 0, 1, 1];
    let got = scl(&same, &labels, 0.1);
    assert!((got - 3f64.ln()).abs() < 1e-6);
    assert!((got - oracle_scl(&rows(&same), &labels, 0.1)).abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let emb = random_tensor(&mut rng, &[6, 5], -1.0, 1.0);
    let labels = [0, 1, 0, 2, 1, 0];
    let want = oracle_scl(&rows(&emb), &labels, 0.2);
    assert!((scl(&emb, &labels, 0.2) - want).abs() < 1e-5);
    assert!((mpcl(&emb, &labels, 0.2) - oracle_mpcl(&rows(&emb), &labels, 0.2)).abs() < 1e-5);
}

#[test]
fn mpcl_reaches_target_entropy_when_q_equals_c() {
    // Positives coincide with the anchor and negatives point the other way,
    // so at a small temperature q puts its mass uniformly on the positives.
    let emb = mat(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0], &[-1.0, 0.0]]);
    let labels = [0, 0, 0, 1, 1];
    let got = mpcl(&emb, &labels, 0.01);
    let h = target_entropy(&labels);
    assert!((got - h).abs() < 1e-5, "{got} vs {h}");
}

fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..8, 2usize..5).prop_flat_map(|(b, d)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), b),
            prop::collection::vec(0usize..3, b),
        )
    })
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    let d = rows[0].len();
    Tensor::new(vec![rows.len(), d], rows.iter().flatten().map(|&v| v as Real).collect()).unwrap()
}

fn well_conditioned(rows: &[Vec<f64>]) -> bool {
    rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mpcl_bounded_below_by_target_entropy((emb, labels) in batch_strategy()) {
        prop_assume!(well_conditioned(&emb));
        let l = mpcl(&tensor(&emb), &labels, 0.1);
        prop_assert!(l >= target_entropy(&labels) - 1e-6, "{} < {}", l, target_entropy(&labels));
    }

    #[test]
    fn mpcl_ignores_positive_rescaling((emb, labels) in batch_strategy(), k in 0.1f64..10.0) {
        prop_assume!(well_conditioned(&emb));
        let scaled: Vec<Vec<f64>> = emb.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
        let a = mpcl(&tensor(&emb), &labels, 0.1);
        let b = mpcl(&tensor(&scaled), &labels, 0.1);
        prop_assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn mpcl_ignores_batch_order((emb, labels) in batch_strategy(), seed in any::<u64>()) {
        prop_assume!(well_conditioned(&emb));
        let mut order: Vec<usize> = (0..emb.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let e2: Vec<Vec<f64>> = order.iter().map(|&i| emb[i].clone()).collect();
        let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let a = mpcl(&tensor(&emb), &labels, 0.1);
        let b = mpcl(&tensor(&e2), &l2, 0.1);
        prop_assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn one_positive_per_anchor_mpcl_equals_scl(pairs in 1usize..5, d in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..2 * pairs).map(|i| i / 2).collect();
        labels.shuffle(&mut rng);
        let emb = random_tensor(&mut rng, &[2 * pairs, d], -1.0, 1.0);
        prop_assume!(well_conditioned(&rows(&emb)));
        let a = mpcl(&emb, &labels, 0.1);
        let b = scl(&emb, &labels, 0.1);
        prop_assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{} vs {}", a, b);
    }
}

// ----- combined objective ----------------------------------------------------

fn loss_cfg(objective: Objective, alpha: f64) -> LossConfig {
    LossConfig {
        objective,
        alpha,
        ..Default::default()
    }
}

#[test]
fn combined_arithmetic_on_known_terms() {
    // Uniform 2-class logits give CE = ln 2; identical embeddings with labels
    // [0,0,1,1] give every contrastive leg ln 3.
    let labels = [0, 0, 1, 1];
    let mut tape = Tape::new();
    let logits = tape.param(Tensor::zeros(&[4, 2]));
    let legs: Vec<Var> = (0..5).map(|_| tape.param(Tensor::ones(&[4, 3]))).collect();
    let (total, parts) = combined_objective(&mut tape, logits, &legs, &labels, &loss_cfg(Objective::Mlcs, 2.0), None).unwrap();
    let want = 2f64.ln() + 2.0 * 3f64.ln();
    assert!((value(&tape, total) - want).abs() < 1e-6);
    assert_eq!(parts.legs.len(), 5);
    assert!((parts.total - want).abs() < 1e-6 && (parts.ce - 2f64.ln()).abs() < 1e-6);
}

#[test]
fn zero_alpha_is_cross_entropy_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let labels = [0, 1, 1, 0, 2];
    let w = ClassWeights::from_counts(&[2, 2, 1]).unwrap();
    let mut tape = Tape::new();
    let logits = tape.param(random_tensor(&mut rng, &[5, 3], -2.0, 2.0));
    let legs: Vec<Var> = (0..5).map(|_| tape.param(random_tensor(&mut rng, &[5, 4], -1.0, 1.0))).collect();
    let ce = weighted_cross_entropy(&mut tape, logits, &labels, Some(&w)).unwrap();
    let (total, _) = combined_objective(&mut tape, logits, &legs, &labels, &loss_cfg(Objective::Mlcs, 0.0), Some(&w)).unwrap();
    assert_eq!(value(&tape, total), value(&tape, ce));
}

#[test]
fn combined_equals_independently_computed_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = ClassWeights::from_counts(&[4, 3, 5]).unwrap();
    for trial in 0..10 {
        let b = 6;
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let logits = random_tensor(&mut rng, &[b, 3], -2.0, 2.0);
        let embs: Vec<Tensor> = (0..5).map(|_| random_tensor(&mut rng, &[b, 4], -1.0, 1.0)).collect();
        let alpha = 0.25 + trial as f64 * 0.3;
        for objective in [Objective::Mlcs, Objective::MlcsScl, Objective::CePlusMpcl] {
            let c = loss_cfg(objective, alpha);
            let mut tape = Tape::new();
            let x = tape.param(logits.clone());
            let legs: Vec<Var> = embs.iter().map(|e| tape.param(e.clone())).collect();
            let (total, parts) = combined_objective(&mut tape, x, &legs, &labels, &c, Some(&w)).unwrap();

            let ce = oracle_wce(&rows(&logits), &labels, &w.weights);
            let used: &[Tensor] = if objective == Objective::CePlusMpcl { &embs[4..] } else { &embs };
            let leg_terms: Vec<f64> = used
                .iter()
                .map(|e| match objective {
                    Objective::MlcsScl => oracle_scl(&rows(e), &labels, c.tau),
                    _ => oracle_mpcl(&rows(e), &labels, c.tau),
                })
                .collect();
            let want = ce + alpha * leg_terms.iter().sum::<f64>() / leg_terms.len() as f64;
            let got = value(&tape, total);
            assert!((got - want).abs() < 1e-5 * want.max(1.0), "{objective}: {got} vs {want}");
            let recombined = parts.ce + alpha * parts.legs.iter().sum::<f64>() / parts.legs.len() as f64;
            assert!((recombined - got).abs() < 1e-6 * got.abs().max(1.0), "{objective}: {recombined} vs {got}");
        }
    }
}

#[test]
fn probe_legs_use_cross_entropy() {
    let labels = [0, 1, 2, 1];
    let mut tape = Tape::new();
    let logits = tape.param(Tensor::zeros(&[4, 3]));
    let probes: Vec<Var> = (0..3).map(|_| tape.param(Tensor::zeros(&[4, 3]))).collect();
    let (total, parts) = combined_objective(&mut tape, logits, &probes, &labels, &loss_cfg(Objective::MlsCe, 1.5), None).unwrap();
    let ln3 = 3f64.ln();
    assert!((value(&tape, total) - 2.5 * ln3).abs() < 1e-5);
    assert_eq!(parts.legs.len(), 3);
}

#[test]
fn objective_leg_count_mismatches() {
    let labels = [0, 1];
    let mut tape = Tape::new();
    let logits = tape.param(Tensor::zeros(&[2, 2]));
    for objective in [Objective::Mlcs, Objective::MlcsScl, Objective::CePlusMpcl, Objective::MlsCe] {
        assert!(matches!(
            combined_objective(&mut tape, logits, &[], &labels, &loss_cfg(objective, 1.0), None),
            Err(CrabError::Config(_))
        ));
    }
    let (total, parts) = combined_objective(&mut tape, logits, &[], &labels, &loss_cfg(Objective::Ce, 1.0), None).unwrap();
    assert!((value(&tape, total) - 2f64.ln()).abs() < 1e-6);
    assert!(parts.legs.is_empty());
    let neg = loss_cfg(Objective::Ce, -1.0);
    assert!(combined_objective(&mut tape, logits, &[], &labels, &neg, None).is_err());
}

#[test]
fn loss_config_json() {
    let c: LossConfig = serde_json::from_str(r#"{"objective":"CE+MPCL","alpha":0.5}"#).unwrap();
    assert_eq!(c.objective, Objective::CePlusMpcl);
    assert_eq!(c.tau, 0.1);
    assert!(c.weighted_ce);
    assert!(serde_json::from_str::<LossConfig>(r#"{"objective":"CE","alpha":1,"beta":2}"#).is_err());
}

// ----- gradients --------------------------------------------------------------

#[test]
fn loss_gradients_match_finite_differences() {
    let w = ClassWeights::from_counts(&[3, 1, 2]).unwrap();
    let labels = [0, 2, 1, 0, 2, 0];
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_tensor(&mut rng, &[6, 3], -2.0, 2.0);
        let errs = gradcheck::check(&[logits], fd_eps(), seed, |t, v| weighted_cross_entropy(t, v[0], &labels, Some(&w))).unwrap();
        assert!(errs[0] < 1e-3, "wce seed {seed}: {}", errs[0]);

        let emb = random_tensor(&mut rng, &[6, 4], 0.2, 1.0);
        let signs = random_tensor(&mut rng, &[6, 4], -1.0, 1.0);
        let emb = Tensor::new(
            vec![6, 4],
            emb.data().iter().zip(signs.data()).map(|(v, s)| if *s < 0.0 { -v } else { *v }).collect(),
        )
        .unwrap();
        for variant in [ContrastiveVariant::Mpcl, ContrastiveVariant::Scl] {
            let c = ContrastiveConfig { variant, ..cfg(0.5) };
            let errs = gradcheck::check(std::slice::from_ref(&emb), fd_eps(), seed, |t, v| {
                Ok(match variant {
                    ContrastiveVariant::Mpcl => mpcl_loss(t, v[0], &labels, &c)?.loss,
                    ContrastiveVariant::Scl => scl_loss(t, v[0], &labels, &c)?.loss,
                })
            })
            .unwrap();
            assert!(errs[0] < 1e-3, "{variant:?} seed {seed}: {}", errs[0]);
        }
    }
}

#[test]
fn combined_gradient_matches_finite_differences() {
    let labels = [1, 0, 1, 1, 0];
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let mut inputs = vec![random_tensor(&mut rng, &[5, 2], -2.0, 2.0)];
        for _ in 0..3 {
            inputs.push(random_tensor(&mut rng, &[5, 3], 0.3, 1.0));
        }
        let c = LossConfig {
            tau: 0.5,
            ..loss_cfg(Objective::Mlcs, 2.0)
        };
        let errs = gradcheck::check(&inputs, fd_eps(), seed, |t, v| Ok(combined_objective(t, v[0], &v[1..], &labels, &c, None)?.0)).unwrap();
        for (i, e) in errs.iter().enumerate() {
            assert!(*e < 1e-3, "seed {seed} input {i}: {e}");
        }
    }
}
