//! In-memory splits and padded mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::manifest::{LabelMap, Manifest, Split};
use super::shard::read_shard;
use crate::error::{CrabError, Result};
use crate::model::Batch;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub label: usize,
    /// `[F, D_s]`
    pub speech: Tensor,
    /// `[L, D_t]`
    pub text: Tensor,
}

/// One split with every shard decoded, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub items: Vec<Utterance>,
}

impl Dataset {
    /// Reads the shards of `split`. Reads run in parallel; order follows the
    /// manifest.
    pub fn load(manifest: &Manifest, split: Split, labels: &LabelMap) -> Result<Self> {
        let records: Vec<_> = manifest.split(split).collect();
        if records.is_empty() {
            return Err(CrabError::Data(format!("split {split} has no utterances")));
        }
        let items = records
            .par_iter()
            .map(|r| {
                let read = |rel: &str| read_shard(&manifest.resolve(rel)).map_err(|e| CrabError::Data(format!("utterance {:?}: {e}", r.id)));
                Ok(Utterance {
                    id: r.id.clone(),
                    label: labels.index_of(&r.label)?,
                    speech: read(&r.speech_path)?,
                    text: read(&r.text_path)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (ds, dt) = (items[0].speech.shape()[1], items[0].text.shape()[1]);
        if let Some(u) = items.iter().find(|u| u.speech.shape()[1] != ds || u.text.shape()[1] != dt) {
            return Err(CrabError::Data(format!(
                "utterance {:?}: feature dims {}x{} differ from {ds}x{dt}",
                u.id,
                u.speech.shape()[1],
                u.text.shape()[1]
            )));
        }
        Ok(Dataset { split, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|u| u.label).collect()
    }

    pub fn speech_dim(&self) -> usize {
        self.items[0].speech.shape()[1]
    }

    pub fn text_dim(&self) -> usize {
        self.items[0].text.shape()[1]
    }

    /// Splits the dataset into batches of `batch_size` (last one may be
    /// smaller). `shuffle = Some((seed, epoch))` permutes deterministically;
    /// `None` keeps manifest order.
    pub fn batches(&self, batch_size: usize, shuffle: Option<(u64, u64)>) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(CrabError::Config("batch_size must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        if let Some((seed, epoch)) = shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
        }
        order.chunks(batch_size).map(|idx| collate(&idx.iter().map(|&i| &self.items[i]).collect::<Vec<_>>())).collect()
    }
}

fn pad(seqs: &[&Tensor]) -> (Tensor, Tensor) {
    let b = seqs.len();
    let t = seqs.iter().map(|s| s.shape()[0]).max().unwrap_or(1);
    let d = seqs[0].shape()[1];
    let mut data = vec![0.0 as Real; b * t * d];
    let mut mask = vec![0.0 as Real; b * t];
    for (i, s) in seqs.iter().enumerate() {
        let n = s.shape()[0];
        data[i * t * d..i * t * d + n * d].copy_from_slice(s.data());
        mask[i * t..i * t + n].iter_mut().for_each(|m| *m = 1.0);
    }
    (
        Tensor::new(vec![b, t, d], data).expect("padded shape"),
        Tensor::new(vec![b, t], mask).expect("mask shape"),
    )
}

/// Right-pads utterances to the longest in the group; masks mark the valid
/// prefix of each row.
pub fn collate(items: &[&Utterance]) -> Result<Batch> {
    if items.is_empty() {
        return Err(CrabError::Contract("cannot collate an empty batch".into()));
    }
    let (speech, speech_mask) = pad(&items.iter().map(|u| &u.speech).collect::<Vec<_>>());
    let (text, text_mask) = pad(&items.iter().map(|u| &u.text).collect::<Vec<_>>());
    Ok(Batch {
        speech,
        speech_mask,
        text,
        text_mask,
        labels: items.iter().map(|u| u.label).collect(),
        ids: items.iter().map(|u| u.id.clone()).collect(),
    })
}

/// Loads `split` and batches it with a shuffle keyed by `(seed, epoch)`.
pub fn make_batches(manifest: &Manifest, split: Split, labels: &LabelMap, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    Dataset::load(manifest, split, labels)?.batches(batch_size, Some((seed, epoch)))
}
