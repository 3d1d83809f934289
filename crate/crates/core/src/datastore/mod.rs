//! Bag files, dataset manifests, stratified splitting, synthetic datasets
//! and checkpoints.

mod bagfile;
mod checkpoint;
mod io;
mod manifest;
mod split;
mod synth;

pub use bagfile::{
    decode_bag, encode_bag, read_bag, read_bag_file, write_bag, BagHeader, BAG_HEADER_LEN, BAG_MAGIC, BAG_VERSION,
};
pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use io::{read_file, write_atomic};
pub use manifest::{manifest_path, Manifest, ManifestEntry, Split, MANIFEST_FILE};
pub use split::{stratified_split, Grouping, SplitSpec};
pub use synth::{
    centroid_probe_accuracy, class_names, synthesize_bags, synthesize_dataset, SynthConfig, SynthReport, SYNTH_TMAS,
};
