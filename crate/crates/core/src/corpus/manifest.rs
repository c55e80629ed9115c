use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, ImageHandle, Label, Sample, Source};
use crate::error::{Error, Result};

/// One JSON Lines manifest record. `image_path` is relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub subject_id: String,
    pub image_path: String,
    pub label: String,
    pub caption: Option<String>,
    pub source: Source,
}

/// Reads a JSON Lines manifest. Images are decoded lazily and resized to
/// `image_size × image_size`; only their existence is checked here.
pub fn load_manifest(path: &Path, image_size: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Manifest { path: path.to_path_buf(), line: line_no, message };
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let label: Label = rec.label.parse()?;
        let image_path = base.join(&rec.image_path);
        if !image_path.is_file() {
            return Err(malformed(format!("image {} not found", image_path.display())));
        }
        samples.push(Sample {
            id: rec.id,
            subject_id: rec.subject_id,
            image: ImageHandle::file(image_path, image_size),
            caption: rec.caption,
            label,
            source: rec.source,
        });
    }
    Dataset::new(samples)
}

/// Writes `ds` as a manifest at `path`, saving in-memory images as PNG files
/// under `images/` next to it. File-backed samples keep their original file.
pub fn write_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let image_dir = base.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut out = Vec::new();
    for s in ds.samples() {
        let image_path = match s.image.path() {
            Some(p) => relative_to(p, base),
            None => {
                let file = format!("{}.png", sanitize(&s.id));
                s.image.load()?.save_png(&image_dir.join(&file))?;
                format!("images/{file}")
            }
        };
        let rec = ManifestRecord {
            id: s.id.clone(),
            subject_id: s.subject_id.clone(),
            image_path,
            label: s.label.as_str().to_string(),
            caption: s.caption.clone(),
            source: s.source,
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::json("manifest record", e))?;
        out.write_all(b"\n").expect("writing to a Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub(crate) fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn relative_to(p: &Path, base: &Path) -> String {
    let (Ok(abs), Ok(base)) = (p.canonicalize(), base.canonicalize()) else {
        return p.display().to_string();
    };
    let (a, b): (Vec<_>, Vec<_>) = (abs.components().collect(), base.components().collect());
    let common = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return abs.display().to_string();
    }
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    for c in &a[common..] {
        rel.push(c);
    }
    rel.display().to_string()
}
