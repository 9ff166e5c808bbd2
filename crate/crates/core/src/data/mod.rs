//! Feature shards, manifests, synthetic corpora and batching.

pub mod batch;
pub mod manifest;
pub mod shard;
pub mod synth;

pub use batch::{collate, make_batches, Dataset, Utterance};
pub use manifest::{count_labels, LabelMap, Manifest, ManifestRecord, Split};
pub use shard::{decode_shard, encode_shard, read_shard, write_shard};
pub use synth::{generate_synthetic, stratified_counts, Generated, SplitCounts, SynthMetadata, SynthSpec};
