//! Manifests, PNG decoding, colour normalization, the six-way augmentation
//! set, resizing, dataset splits, batching and synthetic fixtures.

mod augment;
mod batch;
mod color;
mod dataset;
mod image;
mod manifest;
mod resize;
mod sample;
mod split;
mod synth;

use std::path::Path;

pub use augment::{augment, hflip, rot90, vflip, Augmentation};
pub use batch::make_batches;
pub use color::{color_normalize, compute_channel_stats, ChannelStats, MIN_STD};
pub use dataset::{preprocess_dataset, preprocess_image, read_image, variant_path, Dataset};
pub use image::{decode_image, encode_image, Image};
pub use manifest::{load_manifest, write_manifest, MANIFEST_HEADER};
pub use resize::resize;
pub use sample::{split_augmented_name, Label, Magnification, Sample};
pub use split::{parse_ratios, read_split_csv, split_dataset, Split, SplitAssignment, SplitMode};
pub use synth::{generate_synthetic_dataset, generate_synthetic_samples, render_texture, SynthConfig};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },
    #[error("image format: {0}")]
    Format(String),
    #[error("image: {0}")]
    Image(String),
    #[error("split: {0}")]
    Split(String),
    #[error("synthetic data: {0}")]
    Synth(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<std::io::Error> for DataError {
    fn from(source: std::io::Error) -> Self {
        DataError::Io {
            path: String::from("<stream>"),
            source,
        }
    }
}

/// Reads a manifest file from disk.
pub fn load_manifest_file(path: &Path) -> Result<Vec<Sample>, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    load_manifest(std::io::BufReader::new(file))
}
