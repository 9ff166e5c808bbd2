//! Training loop, evaluation and run logs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{DataSource, RunConfig};
use crate::data::{generate_synthetic, Dataset, LabelMap, Manifest, Split};
use crate::error::{CrabError, Result};
use crate::losses::{combined_objective, ClassWeights, Legs, LossBreakdown, Objective};
use crate::metrics::{argmax_rows, confusion, emit_report, report, ConfusionMatrix, MetricReport};
use crate::model::{forward, Batch, CrabParams};
use crate::optim::{steps_per_epoch, AdamW, GradAccumulator};
use crate::tensor::Real;

pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const TIMING_FILE: &str = "timing.json";
pub const DATA_DIR: &str = "data";

/// Decoded splits a run trains and evaluates on.
#[derive(Clone, Debug)]
pub struct RunData {
    pub labels: LabelMap,
    pub splits: BTreeMap<Split, Dataset>,
}

impl RunData {
    /// Loads (generating first, for synthetic sources) the train and dev
    /// splits plus every split in `cfg.eval_splits`.
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let labels = cfg.labels()?;
        let manifest = match &cfg.data {
            DataSource::Manifest(path) => Manifest::load(path, &labels)?,
            DataSource::Synthetic(spec) => generate_synthetic(spec, &cfg.output_dir.join(DATA_DIR))?.manifest,
        };
        let mut wanted = vec![Split::Train, Split::Dev];
        wanted.extend(cfg.eval_splits.iter().copied());
        Self::from_manifest(&manifest, labels, &wanted)
    }

    pub fn from_manifest(manifest: &Manifest, labels: LabelMap, splits: &[Split]) -> Result<Self> {
        let mut out = BTreeMap::new();
        for &s in splits {
            if let std::collections::btree_map::Entry::Vacant(slot) = out.entry(s) {
                slot.insert(Dataset::load(manifest, s, &labels)?);
            }
        }
        Ok(RunData { labels, splits: out })
    }

    pub fn split(&self, split: Split) -> Result<&Dataset> {
        self.splits.get(&split).ok_or_else(|| CrabError::Data(format!("split {split} was not loaded")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLoss {
    /// Means over the epoch's micro-batches.
    pub total: f64,
    pub ce: f64,
    pub legs: Vec<f64>,
    pub leg_names: Vec<String>,
    /// Micro-batches in which some contrastive anchor had no positive.
    pub skipped_batches: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLrs {
    pub main: f64,
    pub encoder: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub war: f64,
    pub uar: f64,
    pub macro_f1: f64,
}

impl From<&MetricReport> for Scores {
    fn from(r: &MetricReport) -> Self {
        Scores {
            war: r.war,
            uar: r.uar,
            macro_f1: r.macro_f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
    pub train: TrainLoss,
    /// Rates used by the epoch's last optimizer step.
    pub lr: GroupLrs,
    pub dev: Scores,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    /// Without supervision legs.
    pub inference: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub best_epoch: usize,
    pub best_dev_uar: f64,
    /// Best-checkpoint reports keyed by split name.
    pub eval: BTreeMap<Split, MetricReport>,
    pub parameters: ParamCounts,
    pub config: RunConfig,
}

/// One line of `runlog.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Epoch(EpochRecord),
    Final(FinalRecord),
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Row-major `[N, E]`.
    pub logits: Vec<f64>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub report: MetricReport,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub log: Vec<LogRecord>,
    /// Mean loss of each optimizer step's micro-batches.
    pub step_losses: Vec<f64>,
    pub best: CrabParams,
    pub last: CrabParams,
    pub best_epoch: usize,
    pub eval: BTreeMap<Split, Evaluation>,
    pub output_dir: PathBuf,
}

impl RunOutcome {
    pub fn final_record(&self) -> &FinalRecord {
        match self.log.last() {
            Some(LogRecord::Final(f)) => f,
            _ => unreachable!("a finished run ends with its final record"),
        }
    }
}

/// Runs the network without legs on every batch of `data`, in order.
/// Batches are spread over the worker pool; results keep dataset order.
pub fn evaluate(params: &CrabParams, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let e = params.config.num_classes;
    let batches = data.batches(batch_size, None)?;
    let parts = batches
        .par_iter()
        .map(|b| {
            let mut tape = params.store.tape(false);
            let out = forward(&mut tape, params, b, Legs::None)?;
            Ok(tape.value(out.logits).data().iter().map(|&v| f64::from(v)).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<f64> = parts.concat();
    let predictions = argmax_rows(&logits, e);
    let labels = data.labels();
    let cm = confusion(&labels, &predictions, e)?;
    let report = report(&cm)?;
    Ok(Evaluation {
        logits,
        predictions,
        labels,
        ids: data.items.iter().map(|u| u.id.clone()).collect(),
        confusion: cm,
        report,
    })
}

fn inference_param_count(params: &CrabParams) -> usize {
    params
        .store
        .iter()
        .filter(|p| !(p.name.starts_with("csl.") || p.name.starts_with("probe.")))
        .map(|p| p.value.numel())
        .sum()
}

fn leg_names(params: &CrabParams, objective: Objective) -> Vec<String> {
    let names = params.config.leg_names();
    match objective {
        Objective::Ce => Vec::new(),
        Objective::CePlusMpcl => vec![names[names.len() - 1].to_string()],
        _ => names.iter().map(|s| s.to_string()).collect(),
    }
}

struct MicroResult {
    grads: Vec<Vec<Real>>,
    loss: LossBreakdown,
}

fn as_numeric(err: CrabError, epoch: usize, step: usize) -> CrabError {
    match err {
        CrabError::NonFinite { op } => CrabError::Numeric {
            epoch,
            step,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

fn micro_step(params: &CrabParams, batch: &Batch, cfg: &RunConfig, weights: Option<&ClassWeights>, epoch: usize, step: usize) -> Result<MicroResult> {
    let legs = cfg.loss.objective.legs();
    let mut tape = params.store.tape(true);
    let run = |tape: &mut crate::tensor::Tape| -> Result<_> {
        let out = forward(tape, params, batch, legs)?;
        let (loss, breakdown) = combined_objective(tape, out.logits, &out.legs, &batch.labels, &cfg.loss, weights)?;
        if !breakdown.total.is_finite() {
            return Err(CrabError::Numeric {
                epoch,
                step,
                detail: format!("loss is {}", breakdown.total),
            });
        }
        tape.backward(loss)?;
        Ok(breakdown)
    };
    let loss = run(&mut tape).map_err(|e| as_numeric(e, epoch, step))?;
    let grads = params.store.grads(&mut tape);
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(CrabError::Numeric {
            epoch,
            step,
            detail: "non-finite gradient".into(),
        });
    }
    Ok(MicroResult { grads, loss })
}

struct LogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LogWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| CrabError::io(&path, e))?;
        Ok(LogWriter {
            out: BufWriter::new(file),
            path,
        })
    }

    fn append(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| CrabError::io(&self.path, e))?;
        self.out.flush().map_err(|e| CrabError::io(&self.path, e))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CrabError::io(path, e))
}

#[derive(Serialize)]
struct Timing {
    total_seconds: f64,
    epoch_seconds: Vec<f64>,
}

/// Trains on already loaded data and writes config snapshot, run log,
/// checkpoints (`checkpoints/best`, `checkpoints/last`) and best-checkpoint
/// reports (`eval/<split>/`) under `cfg.output_dir`.
pub fn train_with_data(cfg: &RunConfig, data: &RunData) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let out_dir = &cfg.output_dir;
    fs::create_dir_all(out_dir).map_err(|e| CrabError::io(out_dir, e))?;
    if data.labels != cfg.labels()? {
        return Err(CrabError::Config("loaded data and config disagree on the label map".into()));
    }
    let train = data.split(Split::Train)?;
    let dev = data.split(Split::Dev)?;
    if train.speech_dim() != cfg.model.speech_feat_dim || train.text_dim() != cfg.model.text_feat_dim {
        return Err(CrabError::Config(format!(
            "data feature dims {}x{} differ from model feature dims {}x{}",
            train.speech_dim(),
            train.text_dim(),
            cfg.model.speech_feat_dim,
            cfg.model.text_feat_dim
        )));
    }
    write_text(&out_dir.join(CONFIG_FILE), &(cfg.to_json()? + "\n"))?;

    let objective = cfg.loss.objective;
    let mut params = CrabParams::new(&cfg.model, objective.legs(), cfg.seed)?;
    let weights = if cfg.loss.weighted_ce {
        let mut counts = vec![0u64; data.labels.len()];
        train.items.iter().for_each(|u| counts[u.label] += 1);
        Some(ClassWeights::from_counts(&counts)?)
    } else {
        None
    };
    let o = &cfg.optim;
    let micro_per_epoch = train.len().div_ceil(o.batch_size);
    let per_epoch = steps_per_epoch(micro_per_epoch, o.grad_accum);
    let total_steps = per_epoch * o.epochs;
    let mut opt = AdamW::for_store(o.hyper(), &params.store);
    let mut acc = GradAccumulator::for_store(&params.store);
    let mut log = Vec::with_capacity(o.epochs + 1);
    let mut writer = LogWriter::create(out_dir.join(RUNLOG_FILE))?;
    let names = leg_names(&params, objective);

    let mut step = 0usize;
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut best = (params.clone(), 0usize, f64::NEG_INFINITY);
    let mut epoch_seconds = Vec::with_capacity(o.epochs);
    for epoch in 1..=o.epochs {
        let t0 = Instant::now();
        let batches = train.batches(o.batch_size, Some((cfg.seed, epoch as u64)))?;
        let mut sums = (0.0f64, 0.0f64, vec![0.0f64; names.len()], 0usize);
        let mut lr = GroupLrs { main: 0.0, encoder: 0.0 };
        for group in batches.chunks(o.grad_accum) {
            let results = group
                .par_iter()
                .map(|b| micro_step(&params, b, cfg, weights.as_ref(), epoch, step))
                .collect::<Result<Vec<_>>>()?;
            let mut group_loss = 0.0;
            for r in &results {
                acc.add(&r.grads)?;
                sums.0 += r.loss.total;
                sums.1 += r.loss.ce;
                for (s, v) in sums.2.iter_mut().zip(&r.loss.legs) {
                    *s += v;
                }
                sums.3 += usize::from(r.loss.skipped);
                group_loss += r.loss.total;
            }
            step_losses.push(group_loss / results.len() as f64);
            let mean = acc.take_mean().expect("group is non-empty");
            let factor = o.lr_factor(step, total_steps)?;
            lr = GroupLrs {
                main: o.lr_main * factor,
                encoder: o.lr_encoder * factor,
            };
            opt.step_store(&mut params.store, &mean, lr.main, lr.encoder)?;
            if !params.store.iter().all(|p| p.value.is_finite()) {
                return Err(CrabError::Numeric {
                    epoch,
                    step,
                    detail: "parameters became non-finite after the update".into(),
                });
            }
            step += 1;
        }
        let n = batches.len() as f64;
        let dev_eval = evaluate(&params, dev, o.batch_size)?;
        let record = EpochRecord {
            epoch,
            steps: step,
            train: TrainLoss {
                total: sums.0 / n,
                ce: sums.1 / n,
                legs: sums.2.iter().map(|s| s / n).collect(),
                leg_names: names.clone(),
                skipped_batches: sums.3,
            },
            lr,
            dev: Scores::from(&dev_eval.report),
        };
        if dev_eval.report.uar > best.2 {
            best = (params.clone(), epoch, dev_eval.report.uar);
        }
        let record = LogRecord::Epoch(record);
        writer.append(&record)?;
        log.push(record);
        epoch_seconds.push(t0.elapsed().as_secs_f64());
    }

    let (best_params, best_epoch, best_uar) = best;
    save_checkpoint(&out_dir.join("checkpoints/best"), &best_params, &data.labels)?;
    save_checkpoint(&out_dir.join("checkpoints/last"), &params, &data.labels)?;
    let mut evals = BTreeMap::new();
    for &split in &cfg.eval_splits {
        let ev = evaluate(&best_params, data.split(split)?, o.batch_size)?;
        emit_report(&ev.report, &ev.confusion, &data.labels, &out_dir.join("eval").join(split.name()))?;
        evals.insert(split, ev);
    }
    let record = LogRecord::Final(FinalRecord {
        best_epoch,
        best_dev_uar: best_uar,
        eval: evals.iter().map(|(s, e)| (*s, e.report.clone())).collect(),
        parameters: ParamCounts {
            total: params.store.numel(),
            inference: inference_param_count(&params),
        },
        config: cfg.clone(),
    });
    writer.append(&record)?;
    log.push(record);
    let timing = Timing {
        total_seconds: started.elapsed().as_secs_f64(),
        epoch_seconds,
    };
    write_text(&out_dir.join(TIMING_FILE), &serde_json::to_string_pretty(&timing)?)?;
    Ok(RunOutcome {
        log,
        step_losses,
        best: best_params,
        last: params,
        best_epoch,
        eval: evals,
        output_dir: out_dir.clone(),
    })
}

/// Loads or generates the data named by `cfg` and trains.
pub fn train(cfg: &RunConfig) -> Result<RunOutcome> {
    let data = RunData::prepare(cfg)?;
    train_with_data(cfg, &data)
}

