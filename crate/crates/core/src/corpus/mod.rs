//! Wound-image datasets: samples, manifests, subject-wise partitioning,
//! support-set sampling, augmentation, synthetic-image ingestion and the
//! procedural toy corpus.

mod augment;
mod manifest;
mod split;
mod synthetic;
mod toy;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use augment::{augment_image, AugmentConfig, AugmentOp};
pub(crate) use manifest::sanitize;
pub use manifest::{load_manifest, write_manifest, ManifestRecord};
pub use split::{k_fold, sample_support_set, subject_wise_split, Fold, Partition, SplitRatios, SplitSpec};
pub use synthetic::{ingest_synthetic, SyntheticIngest};
pub use toy::{
    generate_toy_corpus, toy_caption, Attributes, BoundingBox, SignalChannel, ToyAttrConfig, ToyCorpus, ToyMetadata,
    ToyRecord,
};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

/// Default side length images are resized to.
pub const DEFAULT_IMAGE_SIZE: usize = 224;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Uninfected,
    Infected,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Uninfected, Label::Infected];

    /// On-disk code: 0 = uninfected, 1 = infected.
    pub fn code(self) -> u8 {
        match self {
            Label::Uninfected => 0,
            Label::Infected => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Uninfected),
            1 => Some(Label::Infected),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Uninfected => "uninfected",
            Label::Infected => "infected",
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Uninfected => Label::Infected,
            Label::Infected => Label::Uninfected,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infected" => Ok(Label::Infected),
            "uninfected" => Ok(Label::Uninfected),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
    Toy,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Real => "real",
            Source::Synthetic => "synthetic",
            Source::Toy => "toy",
        }
    }
}

enum ImageInner {
    Memory(ImageTensor),
    File { path: PathBuf, size: usize, cell: OnceLock<ImageTensor> },
}

/// Shared, lazily decoded image. Cloning is cheap.
#[derive(Clone)]
pub struct ImageHandle(Arc<ImageInner>);

impl fmt::Debug for ImageHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            ImageInner::Memory(t) => write!(f, "ImageHandle::Memory({t:?})"),
            ImageInner::File { path, size, .. } => {
                write!(f, "ImageHandle::File({}, {size})", path.display())
            }
        }
    }
}

impl ImageHandle {
    pub fn memory(image: ImageTensor) -> Self {
        Self(Arc::new(ImageInner::Memory(image)))
    }

    /// Decoded on first [`load`](Self::load) and resized to `size × size`.
    pub fn file(path: impl Into<PathBuf>, size: usize) -> Self {
        Self(Arc::new(ImageInner::File { path: path.into(), size, cell: OnceLock::new() }))
    }

    pub fn path(&self) -> Option<&Path> {
        match &*self.0 {
            ImageInner::Memory(_) => None,
            ImageInner::File { path, .. } => Some(path),
        }
    }

    pub fn load(&self) -> Result<&ImageTensor> {
        match &*self.0 {
            ImageInner::Memory(t) => Ok(t),
            ImageInner::File { path, size, cell } => {
                if let Some(t) = cell.get() {
                    return Ok(t);
                }
                let img = ImageTensor::load(path, *size)?;
                Ok(cell.get_or_init(|| img))
            }
        }
    }
}

/// One wound record.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub subject_id: String,
    pub image: ImageHandle,
    pub caption: Option<String>,
    pub label: Label,
    pub source: Source,
}

/// Ordered, immutable collection of samples with a subject index.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
    subject_order: Vec<String>,
    subjects: HashMap<String, Vec<usize>>,
}

impl Dataset {
    /// Fails on duplicate sample ids.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(samples.len());
        let mut subject_order = Vec::new();
        let mut subjects: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            subjects
                .entry(s.subject_id.clone())
                .or_insert_with(|| {
                    subject_order.push(s.subject_id.clone());
                    Vec::new()
                })
                .push(i);
        }
        Ok(Self { samples, subject_order, subjects })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    /// Subject ids in order of first appearance.
    pub fn subject_ids(&self) -> &[String] {
        &self.subject_order
    }

    pub fn num_subjects(&self) -> usize {
        self.subject_order.len()
    }

    /// Sample indices belonging to `subject`.
    pub fn subject_members(&self, subject: &str) -> &[usize] {
        self.subjects.get(subject).map_or(&[], Vec::as_slice)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
            .expect("subset of a valid dataset has unique ids")
    }

    pub fn filter(&self, pred: impl Fn(&Sample) -> bool) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| pred(&self.samples[i])).collect();
        self.subset(&idx)
    }

    /// Pairs usable for caption training: samples that carry a caption.
    pub fn captioned(&self) -> Dataset {
        self.filter(|s| s.caption.is_some())
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Dataset::new(samples)
    }

    pub fn with_captions(&self, captions: &[Option<String>]) -> Dataset {
        assert_eq!(captions.len(), self.len());
        let samples =
            self.samples.iter().zip(captions).map(|(s, c)| Sample { caption: c.clone(), ..s.clone() }).collect();
        Dataset::new(samples).expect("ids unchanged")
    }

    /// `(uninfected, infected)` counts.
    pub fn label_counts(&self) -> (usize, usize) {
        let inf = self.samples.iter().filter(|s| s.label == Label::Infected).count();
        (self.len() - inf, inf)
    }

    /// Decodes every image, surfacing the first unreadable file.
    pub fn preload(&self) -> Result<()> {
        for s in &self.samples {
            s.image.load()?;
        }
        Ok(())
    }

    /// SHA-256 over ids, subjects, labels, captions, sources and pixel data.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for s in &self.samples {
            for field in [s.id.as_str(), s.subject_id.as_str(), s.source.as_str()] {
                h.update((field.len() as u64).to_le_bytes());
                h.update(field.as_bytes());
            }
            h.update([s.label.code()]);
            match &s.caption {
                Some(c) => {
                    h.update([1]);
                    h.update((c.len() as u64).to_le_bytes());
                    h.update(c.as_bytes());
                }
                None => h.update([0]),
            }
            h.update(s.image.load()?.to_le_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }
}
