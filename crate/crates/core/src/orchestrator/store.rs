//! Content-addressed artifact storage. Artifacts are immutable and keyed by
//! the SHA-256 of their bytes, so concurrent writers of the same content are
//! harmless and replayed runs can be checked byte for byte.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use sha2::{Digest, Sha256};

use super::state::ArtifactRef;
use crate::error::{Error, Result};

pub const MEDIA_PNG: &str = "image/png";
pub const MEDIA_PGM: &str = "image/x-portable-graymap";
pub const MEDIA_JSON: &str = "application/json";
pub const MEDIA_TEXT: &str = "text/plain; charset=utf-8";

/// Lowercase hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Media type implied by an artifact file name.
pub fn media_type_for(name: &str) -> &'static str {
    match Path::new(name).extension().and_then(|e| e.to_str()) {
        Some("png") => MEDIA_PNG,
        Some("pgm") => MEDIA_PGM,
        Some("json") => MEDIA_JSON,
        _ => MEDIA_TEXT,
    }
}

fn is_hash(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

pub trait ArtifactStore: Send + Sync {
    /// Stores `bytes` (idempotent) and returns their hash.
    fn put(&self, bytes: &[u8], media_type: &str) -> Result<String>;

    /// Bytes and media type of an artifact, `None` when absent.
    fn get(&self, hash: &str) -> Result<Option<(Vec<u8>, String)>>;

    fn contains(&self, hash: &str) -> Result<bool> {
        Ok(self.get(hash)?.is_some())
    }

    /// Stores a named artifact and returns its reference.
    fn put_named(&self, name: &str, bytes: &[u8]) -> Result<ArtifactRef> {
        let media_type = media_type_for(name);
        Ok(ArtifactRef {
            name: name.to_string(),
            hash: self.put(bytes, media_type)?,
            media_type: media_type.to_string(),
        })
    }
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    items: RwLock<HashMap<String, (Vec<u8>, String)>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ArtifactStore for MemoryStore {
    fn put(&self, bytes: &[u8], media_type: &str) -> Result<String> {
        let hash = content_hash(bytes);
        self.items
            .write()
            .expect("store lock")
            .entry(hash.clone())
            .or_insert_with(|| (bytes.to_vec(), media_type.to_string()));
        Ok(hash)
    }

    fn get(&self, hash: &str) -> Result<Option<(Vec<u8>, String)>> {
        Ok(self.items.read().expect("store lock").get(hash).cloned())
    }
}

/// Directory-backed store: `<root>/<hash>` holds the bytes and
/// `<root>/<hash>.type` the media type. Files are written to a temporary
/// name and renamed, so readers never observe partial artifacts.
#[derive(Debug)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        let probe = root.join(".write-probe");
        std::fs::write(&probe, b"")?;
        std::fs::remove_file(&probe)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let target = self.root.join(name);
        if target.exists() {
            return Ok(());
        }
        let tmp = self.root.join(format!(".{name}.{}.{:?}.tmp", std::process::id(), std::thread::current().id()));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &target)?;
        Ok(())
    }
}

impl ArtifactStore for DirStore {
    fn put(&self, bytes: &[u8], media_type: &str) -> Result<String> {
        let hash = content_hash(bytes);
        // Type first: an artifact is visible only once its bytes exist.
        self.write_atomic(&format!("{hash}.type"), media_type.as_bytes())?;
        self.write_atomic(&hash, bytes)?;
        Ok(hash)
    }

    fn get(&self, hash: &str) -> Result<Option<(Vec<u8>, String)>> {
        if !is_hash(hash) {
            return Ok(None);
        }
        let path = self.root.join(hash);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if content_hash(&bytes) != hash {
            return Err(Error::invalid(format!("artifact {hash} is corrupt")));
        }
        let media_type = std::fs::read_to_string(self.root.join(format!("{hash}.type")))?;
        Ok(Some((bytes, media_type)))
    }
}
