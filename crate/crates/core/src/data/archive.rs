//! Preprocessed dataset archive.
//!
//! ```text
//! magic        5 bytes  "CXRA1"
//! count        u32 LE
//! channels     u8
//! width        u16 LE
//! height       u16 LE
//! labels       count bytes (class ids)
//! pixels       count * channels * height * width bytes, planar per sample
//! manifest_len u32 LE
//! manifest     UTF-8 JSON (Manifest)
//! ```
//!
//! The manifest hash is SHA-256 over the label bytes followed by the pixel
//! bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{sha256_hex, u8_to_unit, ClassLabel, DataError, Result, IMAGE_SIDE, PLANE};
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 5] = b"CXRA1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_counts: [usize; 3],
    pub source_ids: Vec<String>,
    pub content_sha256: String,
}

/// In-memory dataset of preprocessed `[C, 90, 90]` u8 images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetArchive {
    channels: usize,
    labels: Vec<ClassLabel>,
    pixels: Vec<u8>,
    source_ids: Vec<String>,
}

impl DatasetArchive {
    pub fn new(channels: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(DataError::Channels(channels));
        }
        Ok(DatasetArchive {
            channels,
            labels: Vec::new(),
            pixels: Vec::new(),
            source_ids: Vec::new(),
        })
    }

    pub fn push(&mut self, label: ClassLabel, pixels: &[u8], source_id: impl Into<String>) {
        assert_eq!(pixels.len(), self.sample_len(), "sample has wrong byte count");
        self.labels.push(label);
        self.pixels.extend_from_slice(pixels);
        self.source_ids.push(source_id.into());
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * PLANE
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn sample_u8(&self, i: usize) -> &[u8] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for l in &self.labels {
            counts[l.id()] += 1;
        }
        counts
    }

    /// Stacks the given samples into a `[B, C, 90, 90]` tensor scaled to
    /// `[0, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend(self.sample_u8(i).iter().map(|&v| u8_to_unit(v)));
        }
        Tensor::new(&[indices.len(), self.channels, IMAGE_SIDE, IMAGE_SIDE], data).expect("consistent batch")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i].id()).collect()
    }

    fn label_bytes(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.id() as u8).collect()
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&[&self.label_bytes(), &self.pixels])
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            class_counts: self.class_counts(),
            source_ids: self.source_ids.clone(),
            content_sha256: self.content_hash(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut out = Vec::with_capacity(18 + self.len() + self.pixels.len() + manifest.len());
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.push(self.channels as u8);
        out.extend_from_slice(&(IMAGE_SIDE as u16).to_le_bytes());
        out.extend_from_slice(&(IMAGE_SIDE as u16).to_le_bytes());
        out.extend_from_slice(&self.label_bytes());
        out.extend_from_slice(&self.pixels);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != b"CXRA" {
            return Err(DataError::BadMagic);
        }
        if bytes[4] != ARCHIVE_MAGIC[4] {
            return Err(DataError::Version(String::from_utf8_lossy(&bytes[4..5]).into_owned()));
        }
        const FIXED: usize = 14;
        if bytes.len() < FIXED {
            return Err(DataError::Length {
                expected: FIXED,
                actual: bytes.len(),
            });
        }
        let count = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let channels = bytes[9] as usize;
        let width = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
        let height = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
        if width != IMAGE_SIDE || height != IMAGE_SIDE {
            return Err(DataError::Manifest(format!(
                "image size {width}x{height}, expected {IMAGE_SIDE}x{IMAGE_SIDE}"
            )));
        }
        let mut archive = DatasetArchive::new(channels)?;
        let pixel_len = count * archive.sample_len();
        let manifest_at = FIXED + count + pixel_len;
        if bytes.len() < manifest_at + 4 {
            return Err(DataError::Length {
                expected: manifest_at + 4,
                actual: bytes.len(),
            });
        }
        let manifest_len = u32::from_le_bytes(bytes[manifest_at..manifest_at + 4].try_into().expect("4 bytes")) as usize;
        let total = manifest_at + 4 + manifest_len;
        if bytes.len() != total {
            return Err(DataError::Length {
                expected: total,
                actual: bytes.len(),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[manifest_at + 4..])
            .map_err(|e| DataError::Manifest(e.to_string()))?;

        archive.labels = bytes[FIXED..FIXED + count]
            .iter()
            .map(|&b| {
                ClassLabel::from_id(b as usize).ok_or_else(|| DataError::Manifest(format!("label id {b} out of range")))
            })
            .collect::<Result<_>>()?;
        archive.pixels = bytes[FIXED + count..manifest_at].to_vec();
        archive.source_ids = manifest.source_ids.clone();

        let actual = archive.content_hash();
        if actual != manifest.content_sha256 {
            return Err(DataError::Hash {
                expected: manifest.content_sha256,
                actual,
            });
        }
        if manifest.source_ids.len() != count {
            return Err(DataError::Manifest(format!(
                "{} source ids for {count} samples",
                manifest.source_ids.len()
            )));
        }
        if manifest.class_counts != archive.class_counts() {
            return Err(DataError::Manifest(format!(
                "class counts {:?} disagree with labels {:?}",
                manifest.class_counts,
                archive.class_counts()
            )));
        }
        Ok(archive)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetArchive {
        let mut a = DatasetArchive::new(1).unwrap();
        for i in 0..5u8 {
            let label = ClassLabel::from_id(i as usize % 3).unwrap();
            a.push(label, &vec![i * 40; PLANE], format!("img{i}.png"));
        }
        a
    }

    #[test]
    fn roundtrip_is_exact() {
        let a = sample();
        let bytes = a.encode();
        let b = DatasetArchive::decode(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.class_counts(), [2, 2, 1]);
        assert_eq!(b.encode(), bytes);
    }

    #[test]
    fn tamper_is_detected() {
        let bytes = sample().encode();
        let mut flipped = bytes.clone();
        flipped[14 + 5 + 100] ^= 1;
        assert!(matches!(DatasetArchive::decode(&flipped), Err(DataError::Hash { .. })));
        assert!(matches!(
            DatasetArchive::decode(&bytes[..bytes.len() - 3]),
            Err(DataError::Length { .. })
        ));
        assert!(matches!(DatasetArchive::decode(b"nope!"), Err(DataError::BadMagic)));
        let mut v2 = bytes;
        v2[4] = b'2';
        assert!(matches!(DatasetArchive::decode(&v2), Err(DataError::Version(_))));
    }

    #[test]
    fn batch_scales_to_unit() {
        let a = sample();
        let t = a.batch(&[4, 1]);
        assert_eq!(t.shape(), &[2, 1, 90, 90]);
        assert_eq!(t.data()[0], 160.0 / 255.0);
        assert_eq!(t.data()[PLANE], 40.0 / 255.0);
        assert_eq!(a.batch_labels(&[4, 1]), vec![1, 1]);
    }
}
