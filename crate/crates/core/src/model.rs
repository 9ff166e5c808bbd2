//! The bimodal network: per-modality encoders, cross-modal attention with
//! residuals, attention pooling, the classifier, and the training-only
//! supervision legs.

use serde::{Deserialize, Serialize};

use crate::error::{CrabError, Result};
use crate::losses::Legs;
use crate::nn::{
    attention_pool, bi_gru, cross_attention, csl_forward, layer_norm, linear, mask_lengths, AttentionPoolingParams, CrossAttentionParams, CslParams,
    GruParams, Init, LayerNormParams, LinearParams, ParamGroup, ParamId, ParamStore,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModalityMode {
    #[default]
    Bimodal,
    SpeechOnly,
    TextOnly,
}

impl ModalityMode {
    pub fn uses_speech(self) -> bool {
        self != ModalityMode::TextOnly
    }

    pub fn uses_text(self) -> bool {
        self != ModalityMode::SpeechOnly
    }
}

fn default_hidden() -> usize {
    512
}

fn default_heads() -> usize {
    1
}

fn default_csl_dim() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub speech_feat_dim: usize,
    pub text_feat_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
    pub num_classes: usize,
    #[serde(default = "default_csl_dim")]
    pub csl_dim: usize,
    #[serde(default)]
    pub modality_mode: ModalityMode,
    /// Trainable identity-initialised projection per modality, placed in the
    /// encoder parameter group.
    #[serde(default)]
    pub encoder_stub: bool,
}

impl ModelConfig {
    pub fn new(speech_feat_dim: usize, text_feat_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            speech_feat_dim,
            text_feat_dim,
            hidden: default_hidden(),
            attention_heads: default_heads(),
            num_classes,
            csl_dim: default_csl_dim(),
            modality_mode: ModalityMode::Bimodal,
            encoder_stub: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CrabError::Config(msg));
        if self.hidden == 0 {
            return bad("hidden size must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.csl_dim == 0 {
            return bad("csl_dim must be positive".into());
        }
        if self.modality_mode.uses_speech() && self.speech_feat_dim == 0 {
            return bad("speech_feat_dim must be positive".into());
        }
        if self.modality_mode.uses_text() && self.text_feat_dim == 0 {
            return bad("text_feat_dim must be positive".into());
        }
        if self.attention_heads == 0 || !(2 * self.hidden).is_multiple_of(self.attention_heads) {
            return bad(format!("attention width {} not divisible by {} heads", 2 * self.hidden, self.attention_heads));
        }
        Ok(())
    }

    /// Width of the fused representation fed to the classifier.
    pub fn fused_dim(&self) -> usize {
        match self.modality_mode {
            ModalityMode::Bimodal => 4 * self.hidden,
            _ => 2 * self.hidden,
        }
    }

    /// Number of supervision legs.
    pub fn num_legs(&self) -> usize {
        self.leg_names().len()
    }

    /// Leg names in output order.
    pub fn leg_names(&self) -> &'static [&'static str] {
        match self.modality_mode {
            ModalityMode::Bimodal => &["speech_unimodal", "text_unimodal", "speech_pooled", "text_pooled", "classifier"],
            ModalityMode::SpeechOnly => &["speech_unimodal", "speech_pooled", "classifier"],
            ModalityMode::TextOnly => &["text_unimodal", "text_pooled", "classifier"],
        }
    }

    fn leg_in_dims(&self) -> Vec<usize> {
        let h = self.hidden;
        let mut dims = vec![2 * h; self.num_legs() - 1];
        dims.push(h);
        dims
    }
}

/// One modality's path up to attention pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub stub: Option<LinearParams>,
    pub proj: LinearParams,
    pub norm: LayerNormParams,
    pub gru: GruParams,
    /// Attention with this modality as the query (bimodal only).
    pub cross: Option<CrossAttentionParams>,
    pub pool: AttentionPoolingParams,
}

impl Branch {
    fn new(store: &mut ParamStore, name: &str, in_dim: usize, cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        let h = cfg.hidden;
        let stub = cfg.encoder_stub.then(|| LinearParams::identity(store, &format!("{name}.encoder_stub"), in_dim, ParamGroup::Encoder));
        let proj = LinearParams::new(store, &format!("{name}.proj"), in_dim, h, ParamGroup::Main, init);
        let norm = LayerNormParams::new(store, &format!("{name}.norm"), h, ParamGroup::Main);
        let gru = GruParams::new(store, &format!("{name}.gru"), h, h, init);
        let cross = match cfg.modality_mode {
            ModalityMode::Bimodal => Some(CrossAttentionParams::new(store, &format!("{name}.cross"), 2 * h, cfg.attention_heads, init)?),
            _ => None,
        };
        let pool = AttentionPoolingParams::new(store, &format!("{name}.pool"), 2 * h, init);
        Ok(Branch {
            stub,
            proj,
            norm,
            gru,
            cross,
            pool,
        })
    }

    fn encode(&self, tape: &mut Tape, features: &Tensor, mask: &Tensor) -> Result<Var> {
        let mut x = tape.constant(features.clone());
        if let Some(stub) = &self.stub {
            x = linear(tape, stub, x)?;
        }
        let x = linear(tape, &self.proj, x)?;
        let x = layer_norm(tape, &self.norm, x)?;
        bi_gru(tape, &self.gru, x, mask)
    }
}

/// All trainable state of the network plus the configuration that shaped it.
#[derive(Clone, Debug)]
pub struct CrabParams {
    pub config: ModelConfig,
    pub legs: Legs,
    pub store: ParamStore,
    pub speech: Option<Branch>,
    pub text: Option<Branch>,
    pub classifier_norm: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
    /// Contrastive legs, present when built with `Legs::Contrastive`.
    pub csl: Vec<CslParams>,
    /// Linear probes to the class logits, present when built with `Legs::Probes`.
    pub probes: Vec<LinearParams>,
}

impl CrabParams {
    /// Backbone parameters are drawn first, so two models with the same seed
    /// share their backbone initialisation whatever legs they carry.
    pub fn new(config: &ModelConfig, legs: Legs, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let mode = config.modality_mode;
        let speech = if mode.uses_speech() {
            Some(Branch::new(&mut store, "speech", config.speech_feat_dim, config, &mut init)?)
        } else {
            None
        };
        let text = if mode.uses_text() {
            Some(Branch::new(&mut store, "text", config.text_feat_dim, config, &mut init)?)
        } else {
            None
        };
        let fused = config.fused_dim();
        let classifier_norm = LayerNormParams::new(&mut store, "classifier.norm", fused, ParamGroup::Main);
        let fc1 = LinearParams::new(&mut store, "classifier.fc1", fused, config.hidden, ParamGroup::Main, &mut init);
        let fc2 = LinearParams::new(&mut store, "classifier.fc2", config.hidden, config.num_classes, ParamGroup::Main, &mut init);

        let mut csl = Vec::new();
        let mut probes = Vec::new();
        for (name, in_dim) in config.leg_names().iter().zip(config.leg_in_dims()) {
            match legs {
                Legs::Contrastive => csl.push(CslParams::new(&mut store, &format!("csl.{name}"), in_dim, config.csl_dim, &mut init)),
                Legs::Probes => probes.push(LinearParams::new(
                    &mut store,
                    &format!("probe.{name}"),
                    in_dim,
                    config.num_classes,
                    ParamGroup::Main,
                    &mut init,
                )),
                Legs::None => {}
            }
        }
        Ok(CrabParams {
            config: config.clone(),
            legs,
            store,
            speech,
            text,
            classifier_norm,
            fc1,
            fc2,
            csl,
            probes,
        })
    }

    /// Copy every parameter of `self` from a store holding a superset of
    /// them (for example a training checkpoint that also carries legs).
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<()> {
        for p in self.store.iter_mut() {
            let id = other
                .find(&p.name)
                .ok_or_else(|| CrabError::Config(format!("parameter {} missing from source", p.name)))?;
            let src = other.get(id);
            if src.shape() != p.value.shape() {
                return Err(CrabError::Config(format!("parameter {} has shape {:?}, expected {:?}", p.name, src.shape(), p.value.shape())));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Parameter ids split by learning-rate group.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamGroups {
    pub main: Vec<ParamId>,
    pub encoder: Vec<ParamId>,
}

pub fn parameter_groups(params: &CrabParams) -> ParamGroups {
    let mut groups = ParamGroups::default();
    for id in params.store.ids() {
        match params.store.param(id).group {
            ParamGroup::Main => groups.main.push(id),
            ParamGroup::Encoder => groups.encoder.push(id),
        }
    }
    groups
}

pub fn count_parameters(params: &CrabParams) -> usize {
    params.store.numel()
}

/// A padded mini-batch. Masks are `[B, T]` right-padded prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, F, D_s]`
    pub speech: Tensor,
    pub speech_mask: Tensor,
    /// `[B, L, D_t]`
    pub text: Tensor,
    pub text_mask: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn cross_params(branch: &Branch) -> Result<&CrossAttentionParams> {
    branch.cross.as_ref().ok_or_else(|| CrabError::Contract("bimodal branch without cross attention".into()))
}

fn check_modality(name: &str, features: &Tensor, mask: &Tensor, b: usize, dim: usize) -> Result<()> {
    let s = features.shape();
    if s.len() != 3 || s[0] != b || s[2] != dim {
        return Err(CrabError::dim("forward", format!("{name} features {s:?}, expected [{b}, T, {dim}]")));
    }
    if mask.shape() != [b, s[1]] {
        return Err(CrabError::dim("forward", format!("{name} mask {:?} vs features {s:?}", mask.shape())));
    }
    if let Some(row) = mask_lengths(mask)?.iter().position(|&n| n == 0) {
        return Err(CrabError::Degenerate {
            op: "forward",
            detail: format!("{name} row {row} has no valid position"),
        });
    }
    Ok(())
}

/// Forward-pass results. All fields are tape variables.
#[derive(Clone, Debug)]
pub struct CrabOutput {
    /// `[B, E]`
    pub logits: Var,
    /// One entry per leg in `ModelConfig::leg_names` order: contrastive
    /// embeddings or probe logits, empty when legs were not requested.
    pub legs: Vec<Var>,
    /// Inputs the legs read from, in the same order.
    pub leg_inputs: Vec<Var>,
    /// Fused representation `[B, D_f]`.
    pub fused: Var,
    /// Attention-pooling weights per active modality, speech first.
    pub pool_weights: Vec<Var>,
}

/// Runs the network on `batch`. The tape must come from `params.store.tape`.
/// Legs are evaluated only if `legs` asks for them and the parameters carry
/// them.
pub fn forward(tape: &mut Tape, params: &CrabParams, batch: &Batch, legs: Legs) -> Result<CrabOutput> {
    let cfg = &params.config;
    let b = batch.len();
    if b == 0 {
        return Err(CrabError::Contract("empty batch".into()));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= cfg.num_classes) {
        return Err(CrabError::Contract(format!("label {y} out of range 0..{}", cfg.num_classes)));
    }
    if cfg.modality_mode.uses_speech() {
        check_modality("speech", &batch.speech, &batch.speech_mask, b, cfg.speech_feat_dim)?;
    }
    if cfg.modality_mode.uses_text() {
        check_modality("text", &batch.text, &batch.text_mask, b, cfg.text_feat_dim)?;
    }

    let mut leg_inputs = Vec::with_capacity(cfg.num_legs());
    let mut pool_weights = Vec::with_capacity(2);
    let fused = match (&params.speech, &params.text) {
        (Some(sp), Some(tx)) => {
            let gs = sp.encode(tape, &batch.speech, &batch.speech_mask)?;
            let gt = tx.encode(tape, &batch.text, &batch.text_mask)?;
            leg_inputs.push(tape.masked_mean(gs, 1, &batch.speech_mask)?);
            leg_inputs.push(tape.masked_mean(gt, 1, &batch.text_mask)?);

            let s_att = cross_attention(tape, cross_params(sp)?, gs, gt, &batch.text_mask)?;
            let s_att = tape.add(s_att, gs)?;
            let t_att = cross_attention(tape, cross_params(tx)?, gt, gs, &batch.speech_mask)?;
            let t_att = tape.add(t_att, gt)?;

            let ps = attention_pool(tape, &sp.pool, s_att, &batch.speech_mask)?;
            let pt = attention_pool(tape, &tx.pool, t_att, &batch.text_mask)?;
            leg_inputs.push(ps.pooled);
            leg_inputs.push(pt.pooled);
            pool_weights.extend([ps.weights, pt.weights]);
            tape.concat(&[ps.pooled, pt.pooled], 1)?
        }
        (Some(branch), None) | (None, Some(branch)) => {
            let (features, mask) = if params.speech.is_some() {
                (&batch.speech, &batch.speech_mask)
            } else {
                (&batch.text, &batch.text_mask)
            };
            let g = branch.encode(tape, features, mask)?;
            leg_inputs.push(tape.masked_mean(g, 1, mask)?);
            let pooled = attention_pool(tape, &branch.pool, g, mask)?;
            leg_inputs.push(pooled.pooled);
            pool_weights.push(pooled.weights);
            pooled.pooled
        }
        (None, None) => return Err(CrabError::Config("model has no modality branch".into())),
    };

    let x = layer_norm(tape, &params.classifier_norm, fused)?;
    let hidden = linear(tape, &params.fc1, x)?;
    leg_inputs.push(hidden);
    let act = tape.relu(hidden)?;
    let logits = linear(tape, &params.fc2, act)?;

    let legs = match legs {
        Legs::None => Vec::new(),
        Legs::Contrastive => {
            if params.csl.len() != leg_inputs.len() {
                return Err(CrabError::Config(format!("model carries {} contrastive legs, need {}", params.csl.len(), leg_inputs.len())));
            }
            params.csl.iter().zip(&leg_inputs).map(|(p, &x)| csl_forward(tape, p, x)).collect::<Result<_>>()?
        }
        Legs::Probes => {
            if params.probes.len() != leg_inputs.len() {
                return Err(CrabError::Config(format!("model carries {} probe legs, need {}", params.probes.len(), leg_inputs.len())));
            }
            params.probes.iter().zip(&leg_inputs).map(|(p, &x)| linear(tape, p, x)).collect::<Result<_>>()?
        }
    };
    Ok(CrabOutput {
        logits,
        legs,
        leg_inputs,
        fused,
        pool_weights,
    })
}
