//! JSONL dataset manifests and the label map.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CrabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = CrabError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| CrabError::Config(format!("unknown split {s:?} (expected train, dev or test)")))
    }
}

/// Ordered class names; position is the class index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelMap {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelMap {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(CrabError::Config("label map is empty".into()));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(CrabError::Config(format!("label {l:?} appears twice in the label map")));
            }
        }
        Ok(LabelMap { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.labels.get(class).map(String::as_str)
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| CrabError::Data(format!("label {label:?} is not in the label map {:?}", self.labels)))
    }
}

impl TryFrom<Vec<String>> for LabelMap {
    type Error = CrabError;

    fn try_from(v: Vec<String>) -> Result<Self> {
        LabelMap::new(v)
    }
}

impl From<LabelMap> for Vec<String> {
    fn from(m: LabelMap) -> Self {
        m.labels
    }
}

/// One manifest line. Paths are relative to the manifest's directory
/// unless absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub label: String,
    pub speech_path: String,
    pub text_path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Reads and validates a manifest: unique ids, known labels, existing
    /// shard files.
    pub fn load(path: &Path, labels: &LabelMap) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CrabError::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| CrabError::Data(format!("{}:{}: bad manifest record: {e}", path.display(), n + 1)))?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Manifest { root, records };
        manifest.validate(labels)?;
        Ok(manifest)
    }

    pub fn validate(&self, labels: &LabelMap) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(CrabError::Data(format!("duplicate utterance id {:?}", r.id)));
            }
            labels.index_of(&r.label).map_err(|e| CrabError::Data(format!("utterance {:?}: {e}", r.id)))?;
            for p in [&r.speech_path, &r.text_path] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(CrabError::Data(format!("utterance {:?}: shard {} does not exist", r.id, full.display())));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Writes one JSON object per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| CrabError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| CrabError::io(path, e))?;
        }
        w.flush().map_err(|e| CrabError::io(path, e))
    }
}

/// Per-class counts of one split, in label-map order.
pub fn count_labels(manifest: &Manifest, split: Split, labels: &LabelMap) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; labels.len()];
    for r in manifest.split(split) {
        counts[labels.index_of(&r.label)?] += 1;
    }
    Ok(counts)
}
