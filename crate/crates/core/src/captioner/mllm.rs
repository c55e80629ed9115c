//! Label-guided captions from an external multimodal model, with a JSON
//! Lines cache that doubles as the replay source.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::{build_label_guided_prompt, PromptSpec};
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

/// Environment variable naming the live endpoint.
pub const ENDPOINT_ENV: &str = "SCARWID_MLLM_ENDPOINT";
/// Environment variable holding the live credential.
pub const CREDENTIAL_ENV: &str = "SCARWID_MLLM_API_KEY";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientMode {
    Live,
    Replay,
}

pub struct MllmRequest<'a> {
    pub image_id: &'a str,
    pub image: &'a ImageTensor,
    pub label: Label,
    pub system: &'a str,
    pub user: &'a str,
}

/// Whatever actually talks to the model.
pub trait Transport {
    fn complete(&mut self, request: &MllmRequest<'_>) -> Result<String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub image_id: String,
    pub label: Label,
    pub prompt_hash: String,
    pub caption: String,
    pub mode: ClientMode,
    pub timestamp: u64,
}

pub fn cache_key(image_id: &str, label: Label, prompt_hash: &str) -> String {
    hex::encode(Sha256::digest(format!("{image_id}|{}|{prompt_hash}", label.as_str())))
}

/// In-memory view of a caption cache file. Later lines win on duplicate keys.
#[derive(Debug, Default)]
pub struct CaptionCache {
    path: Option<PathBuf>,
    entries: HashMap<String, CacheEntry>,
}

impl CaptionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Reads `path` if it exists; new entries are appended to it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let e: CacheEntry = serde_json::from_str(line).map_err(|e| Error::Manifest {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                entries.insert(e.key.clone(), e);
            }
        }
        Ok(Self { path: Some(path.to_path_buf()), entries })
    }

    pub fn get(&self, key: &str) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, entry: CacheEntry) -> Result<()> {
        if let Some(path) = &self.path {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let mut line = serde_json::to_vec(&entry).map_err(|e| Error::json("cache entry", e))?;
            line.push(b'\n');
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
            f.write_all(&line).map_err(|e| Error::io(path, e))?;
        }
        self.entries.insert(entry.key.clone(), entry);
        Ok(())
    }
}

pub struct MllmClient {
    mode: ClientMode,
    prompt: PromptSpec,
    cache: CaptionCache,
    transport: Option<Box<dyn Transport>>,
    calls: usize,
}

impl MllmClient {
    pub fn replay(cache: CaptionCache, prompt: PromptSpec) -> Result<Self> {
        prompt.validate()?;
        Ok(Self { mode: ClientMode::Replay, prompt, cache, transport: None, calls: 0 })
    }

    pub fn live(cache: CaptionCache, prompt: PromptSpec, transport: Box<dyn Transport>) -> Result<Self> {
        prompt.validate()?;
        Ok(Self { mode: ClientMode::Live, prompt, cache, transport: Some(transport), calls: 0 })
    }

    pub fn mode(&self) -> ClientMode {
        self.mode
    }

    /// Transport calls issued so far.
    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn cache(&self) -> &CaptionCache {
        &self.cache
    }

    /// Cached caption if present; otherwise a live call (recorded to the
    /// cache) or, in replay mode, [`Error::ReplayMiss`].
    pub fn caption(&mut self, image_id: &str, image: &ImageTensor, label: Label) -> Result<String> {
        let prompt_hash = self.prompt.hash();
        let key = cache_key(image_id, label, &prompt_hash);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.caption.clone());
        }
        let transport = match (self.mode, self.transport.as_mut()) {
            (ClientMode::Live, Some(t)) => t,
            _ => return Err(Error::ReplayMiss { key: format!("{key} (image {image_id}, label {label})") }),
        };
        let (system, user) = build_label_guided_prompt(label, &self.prompt)?;
        self.calls += 1;
        let caption = transport.complete(&MllmRequest { image_id, image, label, system: &system, user: &user })?;
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.cache.insert(CacheEntry {
            key,
            image_id: image_id.to_string(),
            label,
            prompt_hash,
            caption: caption.clone(),
            mode: ClientMode::Live,
            timestamp,
        })?;
        Ok(caption)
    }
}
