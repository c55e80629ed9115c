//! Support store and k-nearest-neighbour classification.
//!
//! Store file layout (little-endian):
//!
//! ```text
//! b"SCWD" | u32 version | u32 count | u32 dim
//! count × dim f32 embeddings, row-major
//! count u8 label codes
//! u32 trailer_len | trailer JSON {"ids", "metric", "model_hash"}
//! ```

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::imaging::ImageTensor;

pub const STORE_MAGIC: &[u8; 4] = b"SCWD";
pub const STORE_VERSION: u32 = 1;
pub const METRIC: &str = "euclidean";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

/// Immutable labelled embeddings, stored as f32.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportStore {
    dim: usize,
    embeddings: Vec<f32>,
    labels: Vec<Label>,
    ids: Vec<String>,
    metric: String,
    model_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    ids: Vec<String>,
    metric: String,
    model_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

impl SupportStore {
    /// Rows are rounded to f32 on entry.
    pub fn new(
        embeddings: Vec<Vec<f64>>,
        labels: Vec<Label>,
        ids: Vec<String>,
        model_hash: impl Into<String>,
    ) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Empty("support set"));
        }
        if labels.len() != embeddings.len() || ids.len() != embeddings.len() {
            return Err(Error::Shape(format!(
                "{} embeddings, {} labels, {} ids",
                embeddings.len(),
                labels.len(),
                ids.len()
            )));
        }
        let dim = embeddings[0].len();
        let mut flat = Vec::with_capacity(embeddings.len() * dim);
        for e in &embeddings {
            if e.len() != dim {
                return Err(Error::Shape(format!("embedding of length {} in a store of dim {dim}", e.len())));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("support embedding"));
            }
            flat.extend(e.iter().map(|&v| v as f32));
        }
        Ok(Self { dim, embeddings: flat, labels, ids, metric: METRIC.to_string(), model_hash: model_hash.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn metric(&self) -> &str {
        &self.metric
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    /// The `k` nearest rows by Euclidean distance, ascending, equal
    /// distances ordered by row index.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        if query.len() != self.dim {
            return Err(Error::Shape(format!("query of length {} against store dim {}", query.len(), self.dim)));
        }
        if k == 0 || k > self.len() {
            return Err(Error::KTooLarge { k, size: self.len() });
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query embedding"));
        }
        let mut all: Vec<Neighbor> = (0..self.len())
            .map(|i| {
                let d2: f64 = self.row(i).iter().zip(query).map(|(&s, &q)| (q - s as f64) * (q - s as f64)).sum();
                Neighbor { index: i, distance: d2.sqrt() }
            })
            .collect();
        let order = |a: &Neighbor, b: &Neighbor| {
            a.distance.partial_cmp(&b.distance).unwrap_or(Ordering::Equal).then(a.index.cmp(&b.index))
        };
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, order);
            all.truncate(k);
        }
        all.sort_by(order);
        Ok(all)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.embeddings.len() * 4 + self.len() + 64);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.embeddings {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.labels.iter().map(|l| l.code()));
        let trailer =
            Trailer { ids: self.ids.clone(), metric: self.metric.clone(), model_hash: self.model_hash.clone() };
        let json = serde_json::to_vec(&trailer).expect("store trailer serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |detail: &str| Error::Truncated { path: path.to_path_buf(), detail: detail.to_string() };
        if bytes.len() < 4 || &bytes[..4] != STORE_MAGIC {
            return Err(Error::BadMagic { path: path.to_path_buf() });
        }
        if bytes.len() < 16 {
            return Err(truncated("header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != STORE_VERSION {
            return Err(Error::VersionMismatch { path: path.to_path_buf(), found: version, expected: STORE_VERSION });
        }
        let (count, dim) = (u32_at(8) as usize, u32_at(12) as usize);
        let emb_end = 16 + count * dim * 4;
        let labels_end = emb_end + count;
        if bytes.len() < labels_end + 4 {
            return Err(truncated("embeddings or labels"));
        }
        let embeddings =
            bytes[16..emb_end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let labels = bytes[emb_end..labels_end]
            .iter()
            .map(|&c| Label::from_code(c).ok_or_else(|| Error::UnknownLabel(format!("code {c}"))))
            .collect::<Result<Vec<_>>>()?;
        let trailer_len = u32_at(labels_end) as usize;
        let trailer_start = labels_end + 4;
        if bytes.len() != trailer_start + trailer_len {
            return Err(truncated("trailer"));
        }
        let trailer: Trailer = serde_json::from_slice(&bytes[trailer_start..])
            .map_err(|e| Error::json(format!("{} trailer", path.display()), e))?;
        if trailer.ids.len() != count {
            return Err(Error::Shape(format!("{} ids for {count} rows", trailer.ids.len())));
        }
        Ok(Self { dim, embeddings, labels, ids: trailer.ids, metric: trailer.metric, model_hash: trailer.model_hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Embeds every support sample with `model`, in input order.
pub fn build_store(model: &FusionModel, support: &Dataset) -> Result<SupportStore> {
    if support.is_empty() {
        return Err(Error::Empty("support set"));
    }
    let embeddings = support.samples().iter().map(|s| model.fuse_sample(s)).collect::<Result<Vec<_>>>()?;
    SupportStore::new(
        embeddings,
        support.samples().iter().map(|s| s.label).collect(),
        support.samples().iter().map(|s| s.id.clone()).collect(),
        model.hash(),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteCounts {
    pub infected: usize,
    pub uninfected: usize,
}

/// Most common label; a tie goes to the first (nearest) label.
pub fn vote(labels: &[Label]) -> (Label, VoteCounts) {
    assert!(!labels.is_empty(), "vote over no neighbours");
    let infected = labels.iter().filter(|&&l| l == Label::Infected).count();
    let counts = VoteCounts { infected, uninfected: labels.len() - infected };
    let label = match counts.infected.cmp(&counts.uninfected) {
        Ordering::Greater => Label::Infected,
        Ordering::Less => Label::Uninfected,
        Ordering::Equal => labels[0],
    };
    (label, counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub predicted: Label,
    pub neighbor_indices: Vec<usize>,
    pub neighbor_ids: Vec<String>,
    pub distances: Vec<f64>,
    pub neighbor_labels: Vec<Label>,
    pub votes: VoteCounts,
}

/// Classifies an already computed embedding.
pub fn classify_embedding(
    store: &SupportStore,
    embedding: &[f64],
    cfg: &RetrievalConfig,
) -> Result<ClassificationResult> {
    let nn = store.knn(embedding, cfg.k)?;
    let neighbor_labels: Vec<Label> = nn.iter().map(|n| store.labels[n.index]).collect();
    let (predicted, votes) = vote(&neighbor_labels);
    Ok(ClassificationResult {
        predicted,
        neighbor_indices: nn.iter().map(|n| n.index).collect(),
        neighbor_ids: nn.iter().map(|n| store.ids[n.index].clone()).collect(),
        distances: nn.iter().map(|n| n.distance).collect(),
        neighbor_labels,
        votes,
    })
}

/// Fuses `(image, caption)` and labels it by majority vote over its `k`
/// nearest support items. A missing caption is treated as empty text.
pub fn classify(
    store: &SupportStore,
    model: &FusionModel,
    image: &ImageTensor,
    caption: Option<&str>,
    cfg: &RetrievalConfig,
) -> Result<ClassificationResult> {
    let e = model.fuse(image, caption.unwrap_or(""))?;
    classify_embedding(store, &e, cfg)
}
