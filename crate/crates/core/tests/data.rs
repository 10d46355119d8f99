//! Dataset pipeline checks against independent oracles.

use std::fs;
use std::path::Path;

use cxr_core::data::{ingest, split, synthesize_dataset, DatasetArchive, IMAGE_SIDE};

/// Brute-force 3-nearest-neighbour vote on raw pixels, ties to the nearest.
fn knn3(archive: &DatasetArchive, train: &[usize], query: usize) -> usize {
    let q = archive.sample_u8(query);
    let mut dists: Vec<(u64, usize)> = train
        .iter()
        .map(|&i| {
            let d = archive
                .sample_u8(i)
                .iter()
                .zip(q)
                .map(|(&a, &b)| {
                    let d = a as i64 - b as i64;
                    (d * d) as u64
                })
                .sum();
            (d, i)
        })
        .collect();
    dists.sort_unstable();
    let mut votes = [0usize; 3];
    for &(_, i) in &dists[..3] {
        votes[archive.labels()[i].id()] += 1;
    }
    let top = *votes.iter().max().unwrap();
    if top == 1 {
        return archive.labels()[dists[0].1].id();
    }
    votes.iter().position(|&v| v == top).unwrap()
}

#[test]
fn synthetic_classes_are_separable_by_knn() {
    let archive = synthesize_dataset(60, 21, 1).unwrap();
    let plan = split(archive.labels(), 0.25, 21, true).unwrap();
    let correct = plan
        .val
        .iter()
        .filter(|&&i| knn3(&archive, &plan.train, i) == archive.labels()[i].id())
        .count();
    let acc = correct as f64 / plan.val.len() as f64;
    assert!(acc > 0.80, "3-NN accuracy {acc}");
}

fn write_tree(root: &Path, archive: &DatasetArchive) {
    for (i, label) in archive.labels().iter().enumerate() {
        let dir = root.join(label.name());
        fs::create_dir_all(&dir).unwrap();
        let side = IMAGE_SIDE as u32;
        image::GrayImage::from_raw(side, side, archive.sample_u8(i).to_vec())
            .unwrap()
            .save(dir.join(format!("img_{i:03}.png")))
            .unwrap();
    }
}

#[test]
fn ingest_is_deterministic_and_lossless_at_native_size() {
    let source = synthesize_dataset(4, 8, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), &source);
    fs::write(dir.path().join("Normal").join("broken.png"), b"not an image").unwrap();

    let (a, report) = ingest(dir.path(), 1).unwrap();
    let (b, _) = ingest(dir.path(), 1).unwrap();
    assert_eq!(a.encode(), b.encode());
    assert_eq!(report.class_counts, [4, 4, 4]);
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.content_sha256, a.content_hash());

    // 90x90 sources skip the resize, so pixels survive unchanged.
    for i in 0..a.len() {
        let name = a.source_ids()[i].rsplit('_').next().unwrap().trim_end_matches(".png");
        let src: usize = name.parse().unwrap();
        assert_eq!(a.labels()[i], source.labels()[src]);
        assert_eq!(a.sample_u8(i), source.sample_u8(src));
    }
}

#[test]
fn archive_file_roundtrip_is_byte_identical() {
    let archive = synthesize_dataset(5, 2, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.cxra");
    archive.write(&path).unwrap();
    let back = DatasetArchive::read(&path).unwrap();
    assert_eq!(back.encode(), fs::read(&path).unwrap());
    assert_eq!(back.encode(), archive.encode());
}
