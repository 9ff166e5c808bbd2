//! Training objectives: weighted cross-entropy, the multi-positive
//! contrastive loss (MPCL), supervised contrastive loss (SCL), and their
//! combination across supervision legs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CrabError, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Inverse-frequency class weights, `w_j = N / N_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub class_counts: Vec<u64>,
    pub total: u64,
}

impl ClassWeights {
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        if counts.is_empty() {
            return Err(CrabError::Config("class weights need at least one class".into()));
        }
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(CrabError::Config(format!("class {j} has no samples; cannot weight by inverse frequency")));
        }
        let total: u64 = counts.iter().sum();
        Ok(ClassWeights {
            weights: counts.iter().map(|&c| total as f64 / c as f64).collect(),
            class_counts: counts.to_vec(),
            total,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }
}

pub fn class_weights_from_counts(counts: &[u64]) -> Result<ClassWeights> {
    ClassWeights::from_counts(counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContrastiveVariant {
    #[serde(rename = "MPCL")]
    Mpcl,
    #[serde(rename = "SCL")]
    Scl,
}

/// Contrastive loss settings. Candidates are always the other samples of the
/// same batch (self excluded).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub variant: ContrastiveVariant,
    /// Must stay true; an anchor is never its own candidate.
    pub exclude_self: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            variant: ContrastiveVariant::Mpcl,
            exclude_self: true,
        }
    }
}

/// Which training objective is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    /// Weighted cross-entropy at the output only.
    #[serde(rename = "CE")]
    Ce,
    /// Cross-entropy plus MPCL on the classifier leg only.
    #[serde(rename = "CE+MPCL")]
    CePlusMpcl,
    /// Cross-entropy plus an auxiliary cross-entropy probe on every leg.
    #[serde(rename = "MLS+CE")]
    MlsCe,
    /// Cross-entropy plus MPCL on every leg.
    #[serde(rename = "MLCS")]
    Mlcs,
    /// As `Mlcs`, with SCL in place of MPCL.
    #[serde(rename = "MLCS_SCL")]
    MlcsScl,
}

impl Objective {
    pub const ALL: [Objective; 5] = [Objective::Ce, Objective::CePlusMpcl, Objective::MlsCe, Objective::Mlcs, Objective::MlcsScl];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Ce => "CE",
            Objective::CePlusMpcl => "CE+MPCL",
            Objective::MlsCe => "MLS+CE",
            Objective::Mlcs => "MLCS",
            Objective::MlcsScl => "MLCS_SCL",
        }
    }

    /// What the supervision legs must produce during training.
    pub fn legs(self) -> Legs {
        match self {
            Objective::Ce => Legs::None,
            Objective::MlsCe => Legs::Probes,
            Objective::CePlusMpcl | Objective::Mlcs | Objective::MlcsScl => Legs::Contrastive,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = CrabError;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| CrabError::Config(format!("unknown objective {s:?}")))
    }
}

/// Outputs the supervision legs compute in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Legs {
    /// Inference: legs are never executed.
    None,
    Contrastive,
    Probes,
}

fn default_tau() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

/// Objective selection as it appears in run configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub objective: Objective,
    /// Weight of the averaged leg losses.
    pub alpha: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Inverse-frequency class weights on every cross-entropy term.
    #[serde(default = "default_true")]
    pub weighted_ce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            objective: Objective::Mlcs,
            alpha: 2.0,
            tau: default_tau(),
            weighted_ce: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(CrabError::Config(format!("alpha must be a finite non-negative number, got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CrabError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            variant: match self.objective {
                Objective::MlcsScl => ContrastiveVariant::Scl,
                _ => ContrastiveVariant::Mpcl,
            },
            exclude_self: true,
        }
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(CrabError::dim("loss", format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(CrabError::Contract(format!("label {bad} out of range 0..{classes}")));
    }
    Ok(())
}

/// Weighted mean of per-sample negative log-likelihoods, normalised by the
/// sum of the applied weights. `None` means unit weights.
pub fn weighted_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], weights: Option<&ClassWeights>) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 {
        return Err(CrabError::dim("weighted_cross_entropy", format!("logits {s:?}")));
    }
    check_labels(labels, s[0], s[1])?;
    if let Some(w) = weights {
        if w.num_classes() != s[1] {
            return Err(CrabError::dim("weighted_cross_entropy", format!("{} weights for {} classes", w.num_classes(), s[1])));
        }
    }
    let per_sample: Vec<f64> = labels.iter().map(|&y| weights.map_or(1.0, |w| w.weights[y])).collect();
    let norm: f64 = per_sample.iter().sum();
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.gather(logp, labels)?;
    let w = tape.constant(Tensor::new(vec![labels.len()], per_sample.iter().map(|&v| v as Real).collect())?);
    let weighted = tape.mul(picked, w)?;
    let total = tape.sum(weighted, None)?;
    tape.scale(total, (-1.0 / norm) as Real)
}

/// A contrastive loss value and how many anchors contributed.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveOutcome {
    pub loss: Var,
    /// The loss in f64; `loss` holds it rounded to the tape precision.
    pub value: f64,
    pub anchors: usize,
    /// No anchor had a positive; `loss` is exactly 0.
    pub skipped: bool,
}

/// Positive-set sizes per anchor (same label, self excluded).
fn positives(labels: &[usize]) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .map(|(a, ya)| labels.iter().enumerate().filter(|&(i, yi)| i != a && yi == ya).count())
        .collect()
}

/// `(1/A) Σ_a Σ_j t_aj (lse_a − s_aj)` over cosine similarities `s = z zᵀ/τ`
/// with the anchor itself removed from every softmax. Value and gradient are
/// computed together in f64 and attached to the tape as one node.
fn fused_contrastive(tape: &mut Tape, embeddings: Var, targets: &[f64], anchors: usize, tau: f64) -> Result<(Var, f64)> {
    let x = tape.value(embeddings);
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let mut z = vec![0.0f64; b * d];
    let mut norms = vec![0.0f64; b];
    for (r, row) in x.data().chunks(d).enumerate() {
        let n = (row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() + 1e-12).sqrt();
        norms[r] = n;
        for (k, &v) in row.iter().enumerate() {
            z[r * d + k] = f64::from(v) / n;
        }
    }
    let dot = |i: usize, j: usize| (0..d).map(|k| z[i * d + k] * z[j * d + k]).sum::<f64>();
    let mut value = 0.0;
    // dL/ds, then folded through s = z zᵀ/τ.
    let mut gs = vec![0.0f64; b * b];
    for a in 0..b {
        let row_t = &targets[a * b..(a + 1) * b];
        let mass: f64 = row_t.iter().sum();
        if mass == 0.0 {
            continue;
        }
        let s: Vec<f64> = (0..b).map(|j| if j == a { f64::NEG_INFINITY } else { dot(a, j) / tau }).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = s.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        for j in (0..b).filter(|&j| j != a) {
            value += row_t[j] * (lse - s[j]);
            gs[a * b + j] = (mass * (s[j] - lse).exp() - row_t[j]) / anchors as f64;
        }
    }
    value /= anchors as f64;
    let mut grad = vec![0.0f64; b * d];
    for i in 0..b {
        let mut gz = vec![0.0f64; d];
        for j in 0..b {
            let w = (gs[i * b + j] + gs[j * b + i]) / tau;
            if w != 0.0 {
                gz.iter_mut().enumerate().for_each(|(k, g)| *g += w * z[j * d + k]);
            }
        }
        let along: f64 = (0..d).map(|k| gz[k] * z[i * d + k]).sum();
        for k in 0..d {
            grad[i * d + k] = (gz[k] - z[i * d + k] * along) / norms[i];
        }
    }
    Ok((tape.fused_scalar(embeddings, value, &grad)?, value))
}

fn contrastive_preconditions(tape: &Tape, embeddings: Var, labels: &[usize], cfg: &ContrastiveConfig) -> Result<usize> {
    let s = tape.shape(embeddings);
    if s.len() != 2 {
        return Err(CrabError::dim("contrastive", format!("embeddings {s:?}")));
    }
    if s[0] < 2 {
        return Err(CrabError::Contract(format!("contrastive loss needs at least 2 samples, got {}", s[0])));
    }
    if labels.len() != s[0] {
        return Err(CrabError::dim("contrastive", format!("{} labels for {} rows", labels.len(), s[0])));
    }
    if !cfg.exclude_self {
        return Err(CrabError::Config("contrastive candidates must exclude the anchor".into()));
    }
    if !(cfg.tau > 0.0) {
        return Err(CrabError::Config(format!("tau must be positive, got {}", cfg.tau)));
    }
    Ok(s[0])
}

fn skipped(tape: &mut Tape) -> ContrastiveOutcome {
    ContrastiveOutcome {
        loss: tape.constant(Tensor::scalar(0.0)),
        value: 0.0,
        anchors: 0,
        skipped: true,
    }
}

/// Multi-positive contrastive loss: per anchor, the cross-entropy between
/// the same-label target distribution `c` and the softmax similarity
/// distribution `q` over the other samples in the batch, averaged over
/// anchors that have at least one positive.
pub fn mpcl_loss(tape: &mut Tape, embeddings: Var, labels: &[usize], cfg: &ContrastiveConfig) -> Result<ContrastiveOutcome> {
    let b = contrastive_preconditions(tape, embeddings, labels, cfg)?;
    let pos = positives(labels);
    let anchors = pos.iter().filter(|&&p| p > 0).count();
    if anchors == 0 {
        return Ok(skipped(tape));
    }
    let mut target = vec![0.0f64; b * b];
    for a in 0..b {
        if pos[a] == 0 {
            continue;
        }
        for i in 0..b {
            if i != a && labels[i] == labels[a] {
                target[a * b + i] = 1.0 / pos[a] as f64;
            }
        }
    }
    let (loss, value) = fused_contrastive(tape, embeddings, &target, anchors, cfg.tau)?;
    Ok(ContrastiveOutcome {
        loss,
        value,
        anchors,
        skipped: false,
    })
}

/// Supervised contrastive loss in its per-positive form:
/// `-(1/|P(a)|) Σ_p [s_ap - log Σ_{n≠a} exp(s_an)]`, averaged over anchors
/// with positives.
pub fn scl_loss(tape: &mut Tape, embeddings: Var, labels: &[usize], cfg: &ContrastiveConfig) -> Result<ContrastiveOutcome> {
    let b = contrastive_preconditions(tape, embeddings, labels, cfg)?;
    let pos = positives(labels);
    let anchors = pos.iter().filter(|&&p| p > 0).count();
    if anchors == 0 {
        return Ok(skipped(tape));
    }
    // Each positive pair carries 1/|P(a)|; the log-partition is counted once
    // per anchor because these weights sum to one.
    let mut pair_weights = vec![0.0f64; b * b];
    for a in 0..b {
        for p in 0..b {
            if p != a && labels[p] == labels[a] {
                pair_weights[a * b + p] = 1.0 / pos[a] as f64;
            }
        }
    }
    let (loss, value) = fused_contrastive(tape, embeddings, &pair_weights, anchors, cfg.tau)?;
    Ok(ContrastiveOutcome {
        loss,
        value,
        anchors,
        skipped: false,
    })
}

pub fn contrastive_loss(tape: &mut Tape, embeddings: Var, labels: &[usize], cfg: &ContrastiveConfig) -> Result<ContrastiveOutcome> {
    match cfg.variant {
        ContrastiveVariant::Mpcl => mpcl_loss(tape, embeddings, labels, cfg),
        ContrastiveVariant::Scl => scl_loss(tape, embeddings, labels, cfg),
    }
}

/// Per-term values of the combined objective, for logging.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    /// One value per supervision leg that contributed.
    pub legs: Vec<f64>,
    /// A contrastive term had no positive pair in the batch.
    pub skipped: bool,
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    f64::from(tape.value(v).data()[0])
}

/// `CE + alpha * mean(leg losses)`.
///
/// `legs` holds the CSL embeddings (contrastive objectives) or the probe
/// logits (`MLS+CE`), ordered with the classifier leg last.
pub fn combined_objective(
    tape: &mut Tape,
    logits: Var,
    legs: &[Var],
    labels: &[usize],
    cfg: &LossConfig,
    weights: Option<&ClassWeights>,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let ce = weighted_cross_entropy(tape, logits, labels, weights)?;
    let mut breakdown = LossBreakdown {
        ce: scalar(tape, ce),
        ..Default::default()
    };
    let used: &[Var] = match cfg.objective {
        Objective::Ce => &[],
        Objective::CePlusMpcl => match legs.last() {
            Some(last) => std::slice::from_ref(last),
            None => return Err(CrabError::Config("CE+MPCL needs the classifier leg embedding".into())),
        },
        _ if legs.is_empty() => {
            return Err(CrabError::Config(format!("{} needs at least one supervision leg", cfg.objective)));
        }
        _ => legs,
    };
    if used.is_empty() {
        breakdown.total = breakdown.ce;
        return Ok((ce, breakdown));
    }
    let contrastive = cfg.contrastive();
    let mut terms = Vec::with_capacity(used.len());
    for &leg in used {
        let term = if cfg.objective == Objective::MlsCe {
            weighted_cross_entropy(tape, leg, labels, weights)?
        } else {
            let out = contrastive_loss(tape, leg, labels, &contrastive)?;
            breakdown.skipped |= out.skipped;
            out.loss
        };
        breakdown.legs.push(scalar(tape, term));
        terms.push(term);
    }
    let stacked = tape.concat(&terms, 0)?;
    let mean = tape.mean(stacked, None)?;
    let weighted = tape.scale(mean, cfg.alpha as Real)?;
    let total = tape.add(ce, weighted)?;
    breakdown.total = scalar(tape, total);
    Ok((total, breakdown))
}
