//! Synthetic datasets, PGM images, manifests, group-level splits and config files.

mod config;
mod dataset;
mod manifest;
mod pgm;
mod synth;

pub use config::KeyValues;
pub use dataset::Dataset;
pub use manifest::{
    read_manifest, split_groups, write_manifest, DatasetManifest, ManifestRecord, Split, DEFAULT_FRACTIONS, HEADER,
    MIN_GROUPS,
};
pub use pgm::{decode_pgm, encode_pgm, quantize, read_image, write_image};
pub use synth::{
    gaussian_blur, generate, generate_one, QualityLabel, Sample, SyntheticConfig, SyntheticMode, GROUP_SIZE,
    IMAGE_SIZES,
};
