//! Feature ingestion, volume pooling, labels, splitting and PoT descriptors.

pub mod labels;
pub mod pot;
pub mod records;
pub mod split;
pub mod volumes;

pub use labels::{apply_normalizer, compute_popularity, fit_normalizer, Normalizer};
pub use pot::{pot_features, pot_from_columns, pot_from_sequence, GradPooling, PotLayout, PotVector};
pub use records::{downsample, load_labels, load_records, save_records, ChannelFrames, LabelLine, RawVideoRecord};
pub use split::{split_dataset, split_indices, SplitIndices, SplitSpec};
pub use volumes::{
    load_pooled, pool_volumes, save_pooled, volume_count, ChannelVolumes, Dataset, PooledMeta, VolumeSequence,
};
