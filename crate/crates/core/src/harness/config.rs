//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, Split, SynthSpec};
use crate::error::{CrabError, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;

/// Where a run's utterances come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// JSONL manifest; relative shard paths resolve against its directory.
    Manifest(PathBuf),
    /// Generated into `<output_dir>/data` before training.
    Synthetic(SynthSpec),
}

fn default_eval_splits() -> Vec<Split> {
    vec![Split::Test]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub data: DataSource,
    /// Required with a manifest; optional with synthetic data, where it must
    /// match the generator's class names.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_map: Option<LabelMap>,
    pub output_dir: PathBuf,
    #[serde(default = "default_eval_splits")]
    pub eval_splits: Vec<Split>,
    /// Seeds parameter initialisation and batch shuffling.
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CrabError::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CrabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CrabError::Config(m) => CrabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        let labels = self.labels()?;
        if labels.len() != self.model.num_classes {
            return Err(CrabError::Config(format!("model.num_classes is {} but the label map has {} labels", self.model.num_classes, labels.len())));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.speech_dim != self.model.speech_feat_dim || spec.text_dim != self.model.text_feat_dim {
                return Err(CrabError::Config(format!(
                    "synthetic dims {}x{} differ from model feature dims {}x{}",
                    spec.speech_dim, spec.text_dim, self.model.speech_feat_dim, self.model.text_feat_dim
                )));
            }
        }
        if self.eval_splits.is_empty() {
            return Err(CrabError::Config("eval_splits is empty".into()));
        }
        Ok(())
    }

    /// The label map in force for this run.
    pub fn labels(&self) -> Result<LabelMap> {
        match (&self.data, &self.label_map) {
            (DataSource::Manifest(_), Some(m)) => Ok(m.clone()),
            (DataSource::Manifest(_), None) => Err(CrabError::Config("label_map is required with a manifest".into())),
            (DataSource::Synthetic(spec), given) => {
                let generated = spec.label_map()?;
                match given {
                    Some(m) if *m != generated => Err(CrabError::Config(format!(
                        "label_map {:?} differs from the synthetic class names {:?}",
                        m.labels(),
                        generated.labels()
                    ))),
                    _ => Ok(generated),
                }
            }
        }
    }
}
