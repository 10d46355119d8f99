use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::{assign_label, decode_image, preprocess_u8, ClassLabel, DataError, DatasetArchive, Result};

/// File extensions picked up during ingestion (compared case-insensitively).
pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "pgm"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestFailure {
    pub path: String,
    pub error: String,
}

/// Structured summary of one ingestion run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub root: String,
    pub channels: usize,
    pub class_counts: [usize; 3],
    pub total: usize,
    pub failures: Vec<IngestFailure>,
    pub warnings: Vec<String>,
    pub content_sha256: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn list_candidates(root: &Path) -> Result<(Vec<(String, ClassLabel, PathBuf)>, Vec<String>)> {
    let mut found = Vec::new();
    let mut warnings = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let path = entry.path();
        if name.starts_with('.') {
            continue;
        }
        if !path.is_dir() {
            warnings.push(format!("ignoring non-directory {name}"));
            continue;
        }
        let label = assign_label(&name)?;
        for file in fs::read_dir(&path).map_err(io_err(&path))? {
            let file = file.map_err(io_err(&path))?;
            let fpath = file.path();
            let fname = file.file_name().to_string_lossy().into_owned();
            if fpath.is_file() && has_image_extension(&fpath) {
                found.push((format!("{name}/{fname}"), label, fpath));
            } else if !fname.starts_with('.') {
                warnings.push(format!("skipping {name}/{fname}: not a supported image file"));
            }
        }
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    warnings.sort();
    Ok((found, warnings))
}

/// Walks `root/<Class>/<image>`, preprocesses every image and collects the
/// results in lexicographic path order. Unreadable or undecodable files are
/// reported and skipped; unknown class directories are an error.
pub fn ingest(root: impl AsRef<Path>, channels: usize) -> Result<(DatasetArchive, IngestReport)> {
    let root = root.as_ref();
    let mut archive = DatasetArchive::new(channels)?;
    let (candidates, warnings) = list_candidates(root)?;
    if candidates.is_empty() {
        return Err(DataError::EmptyRoot(root.display().to_string()));
    }
    let processed: Vec<_> = candidates
        .par_iter()
        .map(|(rel, _, path)| {
            let bytes = fs::read(path).map_err(|e| format!("read failed: {e}"))?;
            let raw = decode_image(&bytes).map_err(|e| e.to_string())?;
            preprocess_u8(&raw, channels).map_err(|e| e.to_string()).map(|px| (rel, px))
        })
        .collect();
    let mut failures = Vec::new();
    for ((rel, label, _), result) in candidates.iter().zip(processed) {
        match result {
            Ok((_, px)) => archive.push(*label, &px, rel.clone()),
            Err(error) => failures.push(IngestFailure {
                path: rel.clone(),
                error,
            }),
        }
    }
    if archive.is_empty() {
        return Err(DataError::EmptyRoot(root.display().to_string()));
    }
    let report = IngestReport {
        root: root.display().to_string(),
        channels,
        class_counts: archive.class_counts(),
        total: archive.len(),
        failures,
        warnings,
        content_sha256: archive.content_hash(),
    };
    Ok((archive, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm(w: usize, h: usize, v: u8) -> Vec<u8> {
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend(std::iter::repeat_n(v, w * h));
        out
    }

    #[test]
    fn ingests_in_lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        for (class, files) in [("normal", &["b.pgm", "a.pgm"][..]), ("TUBERCULOSIS", &["z.pgm"][..])] {
            fs::create_dir(dir.path().join(class)).unwrap();
            for (i, f) in files.iter().enumerate() {
                fs::write(dir.path().join(class).join(f), pgm(20, 10, 10 * i as u8 + 5)).unwrap();
            }
        }
        fs::write(dir.path().join("normal/broken.png"), b"\x89PNG\r\n\x1a\nxx").unwrap();
        fs::write(dir.path().join("normal/notes.txt"), b"hi").unwrap();

        let (archive, report) = ingest(dir.path(), 1).unwrap();
        assert_eq!(archive.source_ids(), &["TUBERCULOSIS/z.pgm", "normal/a.pgm", "normal/b.pgm"]);
        assert_eq!(archive.class_counts(), [2, 0, 1]);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].path, "normal/broken.png");
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.content_sha256, archive.content_hash());
        assert_eq!(archive.sample_u8(1)[0], 15);
    }

    #[test]
    fn unknown_class_and_empty_root() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest(dir.path(), 1), Err(DataError::EmptyRoot(_))));
        fs::create_dir(dir.path().join("Covid")).unwrap();
        assert!(matches!(ingest(dir.path(), 1), Err(DataError::UnknownClass { .. })));
    }
}
