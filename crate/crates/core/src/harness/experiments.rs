//! Data generation, checkpoint evaluation, α sweeps and objective
//! ablations built on the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::load_checkpoint;
use super::config::{DataSource, RunConfig};
use super::train::{evaluate, train_with_data, Evaluation, RunData, RunOutcome, DATA_DIR};
use crate::data::synth::MANIFEST_FILE;
use crate::data::{generate_synthetic, Dataset, Generated, Manifest, Split, SynthSpec};
use crate::error::{CrabError, Result};
use crate::losses::Objective;
use crate::metrics::emit_report;

pub fn gen_data(spec: &SynthSpec, out_dir: &Path) -> Result<Generated> {
    generate_synthetic(spec, out_dir)
}

/// Evaluates the checkpoint in `checkpoint_dir` on one split of a manifest
/// and writes `metrics.json` / `confusion.csv` into `out_dir`. Legs stored in
/// the checkpoint are loaded but never run.
pub fn eval_checkpoint(checkpoint_dir: &Path, manifest_path: &Path, split: Split, batch_size: usize, out_dir: &Path) -> Result<Evaluation> {
    let (params, labels) = load_checkpoint(checkpoint_dir)?;
    let manifest = Manifest::load(manifest_path, &labels)?;
    let data = Dataset::load(&manifest, split, &labels)?;
    let (ds, dt) = (data.speech_dim(), data.text_dim());
    let m = &params.config;
    if (m.modality_mode.uses_speech() && ds != m.speech_feat_dim) || (m.modality_mode.uses_text() && dt != m.text_feat_dim) {
        return Err(CrabError::Config(format!(
            "checkpoint expects {}x{} features, split {split} has {ds}x{dt}",
            m.speech_feat_dim, m.text_feat_dim
        )));
    }
    let ev = evaluate(&params, &data, batch_size)?;
    emit_report(&ev.report, &ev.confusion, &labels, out_dir)?;
    Ok(ev)
}

/// `"start:stop:step"` (inclusive of `stop` up to rounding) or a comma list.
pub fn parse_alphas(text: &str) -> Result<Vec<f64>> {
    let bad = || CrabError::Config(format!("cannot parse alpha list {text:?}; use start:stop:step or a,b,c"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let values = if text.contains(':') {
        let parts: Vec<f64> = text.split(':').map(num).collect::<Result<_>>()?;
        let [start, stop, step] = parts[..] else { return Err(bad()) };
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| start + i as f64 * step).collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() || values.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(bad());
    }
    Ok(values)
}

/// Outcome of one run in a sweep or ablation.
#[derive(Clone, Debug)]
pub struct Row {
    pub name: String,
    pub config: RunConfig,
    pub outcome: RunOutcome,
}

impl Row {
    /// Best-checkpoint report on the first evaluation split.
    pub fn scores(&self) -> &crate::metrics::MetricReport {
        let split = self.config.eval_splits[0];
        &self.outcome.eval[&split].report
    }
}

/// Generates synthetic data once under `<output_dir>/data` and points the
/// config at the resulting manifest, so derived runs share it.
fn shared_data(base: &RunConfig) -> Result<(RunConfig, RunData)> {
    base.validate()?;
    let mut cfg = base.clone();
    if let DataSource::Synthetic(spec) = &base.data {
        let dir = base.output_dir.join(DATA_DIR);
        generate_synthetic(spec, &dir)?;
        cfg.label_map = Some(base.labels()?);
        cfg.data = DataSource::Manifest(dir.join(MANIFEST_FILE));
    }
    let data = RunData::prepare(&cfg)?;
    Ok((cfg, data))
}

fn fmt_alpha(a: f64) -> String {
    format!("{a}")
}

/// One run per α, each under `<output_dir>/alpha_<α>`, plus `summary.csv`.
pub fn sweep_alpha(base: &RunConfig, alphas: &[f64]) -> Result<Vec<Row>> {
    let (shared, data) = shared_data(base)?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut cfg = shared.clone();
        cfg.loss.alpha = alpha;
        cfg.output_dir = base.output_dir.join(format!("alpha_{}", fmt_alpha(alpha)));
        let outcome = train_with_data(&cfg, &data)?;
        rows.push(Row {
            name: fmt_alpha(alpha),
            config: cfg,
            outcome,
        });
    }
    write_table(&base.output_dir.join("summary.csv"), "alpha", &rows)?;
    Ok(rows)
}

pub const VARIANTS: [&str; 6] = ["CE", "CE+MPCL", "MLS+CE", "MLCS", "MLCS_SCL", "MLCS_flat_lr"];

/// The configuration of one ablation variant. `MLCS_flat_lr` is MLCS with
/// the encoder group at the main learning rate.
pub fn variant_config(base: &RunConfig, variant: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match variant {
        "MLCS_flat_lr" => {
            cfg.loss.objective = Objective::Mlcs;
            cfg.optim.lr_encoder = cfg.optim.lr_main;
        }
        other => {
            cfg.loss.objective = other
                .parse()
                .map_err(|_| CrabError::Config(format!("unknown variant {other:?}; known: {}", VARIANTS.join(", "))))?;
        }
    }
    Ok(cfg)
}

pub fn parse_variants(text: &str) -> Result<Vec<String>> {
    let list: Vec<String> = text.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if list.is_empty() {
        return Err(CrabError::Config("empty variant list".into()));
    }
    for v in &list {
        if !VARIANTS.contains(&v.as_str()) {
            return Err(CrabError::Config(format!("unknown variant {v:?}; known: {}", VARIANTS.join(", "))));
        }
    }
    Ok(list)
}

/// One run per variant on shared data and seed, under
/// `<output_dir>/<variant>`, plus `ablation.csv`.
pub fn ablate(base: &RunConfig, variants: &[String]) -> Result<Vec<Row>> {
    let configs = variants.iter().map(|v| variant_config(base, v)).collect::<Result<Vec<_>>>()?;
    let (shared, data) = shared_data(base)?;
    let mut rows = Vec::with_capacity(variants.len());
    for (v, cfg) in variants.iter().zip(configs) {
        let cfg = RunConfig {
            data: shared.data.clone(),
            label_map: shared.label_map.clone(),
            output_dir: base.output_dir.join(v.replace('+', "_plus_")),
            ..cfg
        };
        let outcome = train_with_data(&cfg, &data)?;
        rows.push(Row {
            name: v.clone(),
            config: cfg,
            outcome,
        });
    }
    write_table(&base.output_dir.join("ablation.csv"), "variant", &rows)?;
    Ok(rows)
}

fn write_table(path: &Path, key: &str, rows: &[Row]) -> Result<PathBuf> {
    let mut out = format!("{key},war,uar,macro_f1,best_epoch\n");
    for r in rows {
        let s = r.scores();
        writeln!(out, "{},{},{},{},{}", r.name, s.war, s.uar, s.macro_f1, r.outcome.best_epoch).expect("writing to a String");
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CrabError::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| CrabError::io(path, e))?;
    Ok(path.to_path_buf())
}
