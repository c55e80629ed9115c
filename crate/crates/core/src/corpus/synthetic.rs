use std::fs;
use std::path::Path;

use super::{Dataset, ImageHandle, Label, Sample, Source};
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct SyntheticIngest {
    pub dataset: Dataset,
    /// Files that failed to decode.
    pub skipped: usize,
}

/// Every decodable image file directly inside `dir`, in file-name order, as a
/// synthetic sample with its own subject id. Undecodable files are skipped
/// and counted.
pub fn ingest_synthetic(dir: &Path, label: Label, image_size: usize) -> Result<SyntheticIngest> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDirectory(dir.to_path_buf()));
    }
    let mut samples = Vec::new();
    let mut skipped = 0;
    for path in paths {
        if let Err(e) = image::open(&path) {
            log::warn!("skipping {}: {e}", path.display());
            skipped += 1;
            continue;
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let id = format!("syn-{}-{stem}", label.as_str());
        samples.push(Sample {
            id: id.clone(),
            subject_id: id,
            image: ImageHandle::file(path, image_size),
            caption: None,
            label,
            source: Source::Synthetic,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDirectory(dir.to_path_buf()));
    }
    Ok(SyntheticIngest { dataset: Dataset::new(samples)?, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ImageTensor;

    #[test]
    fn ingests_sorted_with_fresh_subjects() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["b", "a", "c"] {
            ImageTensor::filled(16, 16, [0.9, 0.8, 0.1]).save_png(&dir.path().join(format!("{n}.png"))).unwrap();
        }
        fs::write(dir.path().join("junk.png"), b"garbage").unwrap();
        let a = ingest_synthetic(dir.path(), Label::Infected, 8).unwrap();
        let b = ingest_synthetic(dir.path(), Label::Infected, 8).unwrap();
        assert_eq!(a.skipped, 1);
        assert_eq!(a.dataset.len(), 3);
        assert_eq!(a.dataset.num_subjects(), 3);
        let ids: Vec<_> = a.dataset.samples().iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids, ["syn-infected-a", "syn-infected-b", "syn-infected-c"]);
        assert_eq!(ids, b.dataset.samples().iter().map(|s| s.id.clone()).collect::<Vec<_>>());
        assert!(a.dataset.samples().iter().all(|s| s.source == Source::Synthetic && s.label == Label::Infected));
        assert_eq!(a.dataset.get(0).image.load().unwrap().height(), 8);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest_synthetic(dir.path(), Label::Uninfected, 8), Err(Error::EmptyDirectory(_))));
    }
}
