//! Persistent embedding cache.
//!
//! Layout: `<root>/<backend-id>/manifest.json` plus
//! `<root>/<backend-id>/vectors/<record-id>.f32`. The manifest maps each input
//! key to its record id, length and SHA-256 checksum. Writes are serialized
//! through one lock; lookups only take a read lock.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{BackendKind, EmbeddingVector, Encoder, ImageInput};
use crate::error::{Error, Result};
use crate::store;

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub record_id: String,
    pub len: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub version: u32,
    pub backend: String,
    pub records: BTreeMap<String, CacheRecord>,
}

#[derive(Debug)]
struct Namespace {
    dir: PathBuf,
    manifest: CacheManifest,
    dirty: bool,
}

#[derive(Debug)]
pub struct EmbeddingCache {
    root: PathBuf,
    namespaces: RwLock<HashMap<String, Namespace>>,
    writer: Mutex<()>,
}

impl EmbeddingCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            namespaces: RwLock::new(HashMap::new()),
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn namespace_dir(&self, backend_id: &str) -> PathBuf {
        self.root.join(sanitize(backend_id))
    }

    fn ensure_loaded(&self, backend_id: &str) -> Result<()> {
        if self.namespaces.read().unwrap().contains_key(backend_id) {
            return Ok(());
        }
        let dir = self.namespace_dir(backend_id);
        let path = dir.join("manifest.json");
        let manifest = if path.exists() {
            let m: CacheManifest = store::read_json(&path)?;
            if m.backend != backend_id {
                return Err(Error::CacheIntegrity {
                    key: backend_id.to_string(),
                    reason: format!("manifest belongs to backend '{}'", m.backend),
                });
            }
            m
        } else {
            CacheManifest {
                version: MANIFEST_VERSION,
                backend: backend_id.to_string(),
                records: BTreeMap::new(),
            }
        };
        self.namespaces
            .write()
            .unwrap()
            .entry(backend_id.to_string())
            .or_insert(Namespace {
                dir,
                manifest,
                dirty: false,
            });
        Ok(())
    }

    /// Returns the cached vector for `key`, or encodes, persists and returns it.
    pub fn get_or_encode<F>(&self, backend_id: &str, key: &str, encode: F) -> Result<EmbeddingVector>
    where
        F: FnOnce() -> Result<EmbeddingVector>,
    {
        self.ensure_loaded(backend_id)?;
        let hit = {
            let guard = self.namespaces.read().unwrap();
            let ns = &guard[backend_id];
            ns.manifest
                .records
                .get(key)
                .map(|r| (ns.dir.join("vectors").join(format!("{}.f32", r.record_id)), r.clone()))
        };
        if let Some((path, record)) = hit {
            let values = store::read_f32_checked(&path, record.len, &record.checksum).map_err(
                |reason| Error::CacheIntegrity {
                    key: key.to_string(),
                    reason,
                },
            )?;
            return EmbeddingVector::from_unit(values).map_err(|e| Error::CacheIntegrity {
                key: key.to_string(),
                reason: e.to_string(),
            });
        }

        let vector = encode()?;
        let _write = self.writer.lock().unwrap();
        let mut guard = self.namespaces.write().unwrap();
        let ns = guard.get_mut(backend_id).expect("namespace loaded above");
        if !ns.manifest.records.contains_key(key) {
            let record_id = store::checksum(key.as_bytes())[..24].to_string();
            let path = ns.dir.join("vectors").join(format!("{record_id}.f32"));
            let checksum = store::write_f32(&path, vector.as_slice())?;
            ns.manifest.records.insert(
                key.to_string(),
                CacheRecord {
                    record_id,
                    len: vector.dim(),
                    checksum,
                },
            );
            ns.dirty = true;
        }
        Ok(vector)
    }

    /// Writes every modified manifest to disk.
    pub fn flush(&self) -> Result<()> {
        let _write = self.writer.lock().unwrap();
        let mut guard = self.namespaces.write().unwrap();
        for ns in guard.values_mut() {
            if ns.dirty {
                store::write_json(&ns.dir.join("manifest.json"), &ns.manifest)?;
                ns.dirty = false;
            }
        }
        Ok(())
    }

    pub fn len(&self, backend_id: &str) -> usize {
        self.namespaces
            .read()
            .unwrap()
            .get(backend_id)
            .map_or(0, |ns| ns.manifest.records.len())
    }

    pub fn is_empty(&self, backend_id: &str) -> bool {
        self.len(backend_id) == 0
    }
}

impl Drop for EmbeddingCache {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            log::warn!("failed to flush embedding cache manifest: {e}");
        }
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Any encoder, fronted by an [`EmbeddingCache`].
pub struct CachedEncoder<E> {
    inner: E,
    cache: Arc<EmbeddingCache>,
}

impl<E: Encoder> CachedEncoder<E> {
    pub fn new(inner: E, cache: Arc<EmbeddingCache>) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }
}

impl<E: Encoder> Encoder for CachedEncoder<E> {
    fn identity(&self) -> &str {
        self.inner.identity()
    }

    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn text_dim(&self) -> usize {
        self.inner.text_dim()
    }

    fn image_dim(&self) -> usize {
        self.inner.image_dim()
    }

    fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector> {
        self.cache
            .get_or_encode(self.inner.identity(), &format!("text:{prompt}"), || {
                self.inner.encode_text(prompt)
            })
    }

    fn encode_image(&self, input: &ImageInput) -> Result<EmbeddingVector> {
        self.cache.get_or_encode(
            self.inner.identity(),
            &format!("image:{}", input.cache_key()),
            || self.inner.encode_image(input),
        )
    }
}
