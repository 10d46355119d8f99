//! Image ingestion, preprocessing, labels, the dataset archive, splitting and
//! the synthetic dataset generator.

mod archive;
mod decode;
mod ingest;
mod preprocess;
mod split;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use archive::{DatasetArchive, Manifest, ARCHIVE_MAGIC};
pub use decode::{decode_image, RawImage};
pub use ingest::{ingest, IngestFailure, IngestReport, IMAGE_EXTENSIONS};
pub use preprocess::{
    center_crop, preprocess, preprocess_u8, resize_bilinear, u8_to_unit, Preprocessing, MIN_SOURCE_SIDE,
};
pub use split::{split, SplitPlan};
pub use synth::synthesize_dataset;

/// Side length of every preprocessed image.
pub const IMAGE_SIDE: usize = 90;
/// Pixels per channel plane of a preprocessed image.
pub const PLANE: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown class {name:?}; valid names are Normal, Pneumonia, Tuberculosis")]
    UnknownClass { name: String },
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("image {width}x{height} is below the {min}x{min} minimum")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("not a dataset archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0:?}")]
    Version(String),
    #[error("archive length mismatch: expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },
    #[error("archive content hash mismatch: manifest says {expected}, payload hashes to {actual}")]
    Hash { expected: String, actual: String },
    #[error("archive manifest invalid: {0}")]
    Manifest(String),
    #[error("no class directories with images under {0}")]
    EmptyRoot(String),
    #[error("validation fraction {0} must lie strictly between 0 and 1")]
    Fraction(f64),
    #[error("{total} samples leave an empty split at validation fraction {fraction}")]
    TooFewSamples { total: usize, fraction: f64 },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// The three diagnostic classes and their fixed ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    Normal = 0,
    Pneumonia = 1,
    Tuberculosis = 2,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Normal, ClassLabel::Pneumonia, ClassLabel::Tuberculosis];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Normal => "Normal",
            ClassLabel::Pneumonia => "Pneumonia",
            ClassLabel::Tuberculosis => "Tuberculosis",
        }
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        assign_label(s)
    }
}

/// Maps a class directory name to its label, case-insensitively.
pub fn assign_label(class_dir_name: &str) -> Result<ClassLabel> {
    ClassLabel::ALL
        .into_iter()
        .find(|c| c.name().eq_ignore_ascii_case(class_dir_name))
        .ok_or_else(|| DataError::UnknownClass {
            name: class_dir_name.to_string(),
        })
}

/// Lowercase hex SHA-256 over the concatenated parts.
pub fn sha256_hex(parts: &[&[u8]]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}
