//! Synthetic imbalanced bimodal corpora standing in for pre-extracted
//! speech and text features.
//!
//! Every class gets a frozen centroid per modality, `σ_between · g` with
//! `g ~ N(0, I)`. A speech frame is its class centroid plus `σ_within`
//! Gaussian noise. The text sequence is drawn the same way around the
//! centroid of a *text cluster*, which equals the true class with
//! probability `ρ` and is a uniformly chosen other class otherwise.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{LabelMap, Manifest, ManifestRecord, Split};
use super::shard::write_shard;
use crate::error::{CrabError, Result};
use crate::tensor::{Real, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const METADATA_FILE: &str = "metadata.json";
pub const SHARD_DIR: &str = "shards";

/// Class proportions of the 7-class conversational corpus.
pub const MELD_LABELS: [&str; 7] = ["anger", "disgust", "fear", "joy", "neutral", "sadness", "surprise"];
pub const MELD_PROPORTIONS: [f64; 7] = [0.11, 0.03, 0.03, 0.17, 0.47, 0.07, 0.12];
/// Class counts of the 4-class acted corpus.
pub const IEMOCAP_LABELS: [&str; 4] = ["angry", "happy", "neutral", "sad"];
pub const IEMOCAP_COUNTS: [u64; 4] = [1103, 1636, 1708, 1084];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// Empty means `class_0 .. class_{E-1}`.
    #[serde(default)]
    pub class_names: Vec<String>,
    pub class_proportions: Vec<f64>,
    pub sigma_between: f64,
    pub sigma_within: f64,
    /// Probability that the text cluster agrees with the speech class.
    pub rho: f64,
    /// Inclusive frame-count range.
    pub speech_len: [usize; 2],
    /// Inclusive token-count range.
    pub text_len: [usize; 2],
    pub speech_dim: usize,
    pub text_dim: usize,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl SynthSpec {
    /// Seven imbalanced classes with the conversational-corpus proportions;
    /// the desk-scale defaults used by the acceptance runs.
    pub fn meld_like(seed: u64) -> Self {
        SynthSpec {
            num_classes: 7,
            class_names: MELD_LABELS.iter().map(|s| s.to_string()).collect(),
            class_proportions: MELD_PROPORTIONS.to_vec(),
            sigma_between: 1.0,
            sigma_within: 10.0,
            rho: 0.85,
            speech_len: [6, 14],
            text_len: [4, 10],
            speech_dim: 16,
            text_dim: 16,
            counts: SplitCounts {
                train: 6000,
                dev: 800,
                test: 800,
            },
            seed,
        }
    }

    /// Four mildly imbalanced classes with proportions from the acted-corpus
    /// counts.
    pub fn iemocap_like(seed: u64) -> Self {
        let total: u64 = IEMOCAP_COUNTS.iter().sum();
        SynthSpec {
            num_classes: 4,
            class_names: IEMOCAP_LABELS.iter().map(|s| s.to_string()).collect(),
            class_proportions: IEMOCAP_COUNTS.iter().map(|&c| c as f64 / total as f64).collect(),
            counts: SplitCounts {
                train: 4000,
                dev: 500,
                test: 500,
            },
            ..Self::meld_like(seed)
        }
    }

    /// `num_classes` equally likely classes.
    pub fn balanced(num_classes: usize, counts: SplitCounts, seed: u64) -> Self {
        SynthSpec {
            num_classes,
            class_names: Vec::new(),
            class_proportions: vec![1.0 / num_classes.max(1) as f64; num_classes],
            counts,
            ..Self::meld_like(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "meld-like" => Ok(Self::meld_like(seed)),
            "iemocap-like" => Ok(Self::iemocap_like(seed)),
            "balanced" => Ok(Self::balanced(
                4,
                SplitCounts {
                    train: 400,
                    dev: 100,
                    test: 100,
                },
                seed,
            )),
            other => Err(CrabError::Config(format!("unknown preset {other:?} (meld-like, iemocap-like, balanced)"))),
        }
    }

    /// Reads a JSON spec; malformed or inconsistent specs are config errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CrabError::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| CrabError::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CrabError::Config(m));
        if self.num_classes == 0 || self.class_proportions.len() != self.num_classes {
            return bad(format!("{} proportions for {} classes", self.class_proportions.len(), self.num_classes));
        }
        if self.class_proportions.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return bad("class proportions must be positive".into());
        }
        let sum: f64 = self.class_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("class proportions sum to {sum}, not 1"));
        }
        if !self.class_names.is_empty() {
            if self.class_names.len() != self.num_classes {
                return bad(format!("{} class names for {} classes", self.class_names.len(), self.num_classes));
            }
            LabelMap::new(self.class_names.clone())?;
        }
        if !(self.sigma_between >= 0.0 && self.sigma_between.is_finite() && self.sigma_within >= 0.0 && self.sigma_within.is_finite()) {
            return bad("sigmas must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        for (name, [lo, hi]) in [("speech_len", self.speech_len), ("text_len", self.text_len)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} must be a range [min, max] with 1 <= min <= max, got [{lo}, {hi}]"));
            }
        }
        if self.speech_dim == 0 || self.text_dim == 0 {
            return bad("feature dimensions must be at least 1".into());
        }
        if self.counts.total() == 0 {
            return bad("no samples requested".into());
        }
        Ok(())
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        if self.class_names.is_empty() {
            LabelMap::new((0..self.num_classes).map(|i| format!("class_{i}")))
        } else {
            LabelMap::new(self.class_names.clone())
        }
    }
}

/// Sidecar written next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub spec: SynthSpec,
    pub labels: Vec<String>,
    /// `[E][D_s]`
    pub speech_centroids: Vec<Vec<f64>>,
    /// `[E][D_t]`
    pub text_centroids: Vec<Vec<f64>>,
    /// Class index of every utterance per split, in id order.
    pub draws: SplitDraws<Vec<usize>>,
    /// Text cluster of every utterance per split, in id order.
    pub text_clusters: SplitDraws<Vec<usize>>,
    /// Per-class counts per split.
    pub counts: SplitDraws<Vec<u64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitDraws<T> {
    pub train: T,
    pub dev: T,
    pub test: T,
}

impl<T> SplitDraws<T> {
    pub fn get(&self, split: Split) -> &T {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut T {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub manifest: Manifest,
    pub labels: LabelMap,
    pub metadata: SynthMetadata,
}

/// Class counts for `n` draws: floors of `n·p` plus largest remainders
/// (ties to the lower class index).
pub fn stratified_counts(proportions: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    counts
}

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).collect()
}

fn noisy_sequence(rng: &mut ChaCha8Rng, centroid: &[f64], len: usize, sigma: f64) -> Tensor {
    let dim = centroid.len();
    let mut data = Vec::with_capacity(len * dim);
    for _ in 0..len {
        for &c in centroid {
            let noise: f64 = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            data.push((c + noise) as f32 as Real);
        }
    }
    Tensor::new(vec![len, dim], data).expect("positive length and dim")
}

/// Generates the corpus described by `spec` under `out_dir`: a manifest,
/// two shards per utterance and the metadata sidecar. A pure function of
/// `spec`; reruns produce byte-identical files.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<Generated> {
    spec.validate()?;
    let labels = spec.label_map()?;
    let shard_dir = out_dir.join(SHARD_DIR);
    fs::create_dir_all(&shard_dir).map_err(|e| CrabError::io(&shard_dir, e))?;

    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(k);
        rng
    };
    let mut centroid_rng = stream(0);
    let speech_centroids = gaussian_rows(&mut centroid_rng, spec.num_classes, spec.speech_dim, spec.sigma_between);
    let text_centroids = gaussian_rows(&mut centroid_rng, spec.num_classes, spec.text_dim, spec.sigma_between);

    let e = spec.num_classes;
    let mut draws = SplitDraws::<Vec<usize>>::default();
    let mut clusters = SplitDraws::<Vec<usize>>::default();
    let mut counts = SplitDraws::<Vec<u64>>::default();
    let mut records = Vec::with_capacity(spec.counts.total());

    for (k, split) in Split::ALL.into_iter().enumerate() {
        let n = spec.counts.get(split);
        let mut rng = stream(1 + k as u64);
        let per_class = stratified_counts(&spec.class_proportions, n);
        let mut ys: Vec<usize> = per_class.iter().enumerate().flat_map(|(c, &m)| std::iter::repeat_n(c, m)).collect();
        ys.shuffle(&mut rng);

        for (i, &y) in ys.iter().enumerate() {
            let id = format!("{split}_{i:05}");
            let cluster = if e == 1 || rng.random_bool(spec.rho) {
                y
            } else {
                let other = rng.random_range(0..e - 1);
                if other >= y {
                    other + 1
                } else {
                    other
                }
            };
            let f = rng.random_range(spec.speech_len[0]..=spec.speech_len[1]);
            let l = rng.random_range(spec.text_len[0]..=spec.text_len[1]);
            let speech = noisy_sequence(&mut rng, &speech_centroids[y], f, spec.sigma_within);
            let text = noisy_sequence(&mut rng, &text_centroids[cluster], l, spec.sigma_within);

            let speech_rel = format!("{SHARD_DIR}/{id}.speech.crft");
            let text_rel = format!("{SHARD_DIR}/{id}.text.crft");
            write_shard(&out_dir.join(&speech_rel), &speech)?;
            write_shard(&out_dir.join(&text_rel), &text)?;
            records.push(ManifestRecord {
                id,
                label: labels.labels()[y].clone(),
                speech_path: speech_rel,
                text_path: text_rel,
                split,
            });
            clusters.get_mut(split).push(cluster);
        }
        *counts.get_mut(split) = per_class.iter().map(|&c| c as u64).collect();
        *draws.get_mut(split) = ys;
    }

    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    let metadata = SynthMetadata {
        spec: spec.clone(),
        labels: labels.labels().to_vec(),
        speech_centroids,
        text_centroids,
        draws,
        text_clusters: clusters,
        counts,
    };
    let meta_path = out_dir.join(METADATA_FILE);
    let json = serde_json::to_vec_pretty(&metadata)?;
    fs::write(&meta_path, json).map_err(|e| CrabError::io(&meta_path, e))?;
    Ok(Generated {
        manifest,
        labels,
        metadata,
    })
}
