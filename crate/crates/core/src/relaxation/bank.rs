use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::{normalize, EmbeddingVector};
use crate::error::{Error, Result};
use crate::store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub noun: String,
    pub cluster: usize,
    /// Similarity to its cluster center at selection time.
    pub similarity: f64,
    pretrained: EmbeddingVector,
    current: EmbeddingVector,
}

impl BankEntry {
    pub fn new(noun: String, vector: EmbeddingVector, cluster: usize, similarity: f64) -> Self {
        Self {
            noun,
            cluster,
            similarity,
            pretrained: vector.clone(),
            current: vector,
        }
    }

    /// Snapshot taken when the bank was built; never modified afterwards.
    pub fn pretrained(&self) -> &EmbeddingVector {
        &self.pretrained
    }

    pub fn current(&self) -> &EmbeddingVector {
        &self.current
    }
}

/// The filtered relaxed-noun set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NounBank {
    entries: Vec<BankEntry>,
    num_clusters: usize,
    pub learnable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct VectorRef {
    record_id: String,
    len: usize,
    checksum: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryManifest {
    noun: String,
    cluster: usize,
    similarity: f64,
    pretrained: VectorRef,
    current: VectorRef,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankManifest {
    version: u32,
    num_clusters: usize,
    learnable: bool,
    entries: Vec<EntryManifest>,
}

impl NounBank {
    pub fn new(entries: Vec<BankEntry>, num_clusters: usize, learnable: bool) -> Self {
        Self {
            entries,
            num_clusters,
            learnable,
        }
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.current.dim())
    }

    /// Replaces entry `j`'s current vector with `normalize(values)`.
    pub fn set_current(&mut self, j: usize, values: &[f64]) -> Result<()> {
        let entry = self
            .entries
            .get_mut(j)
            .ok_or_else(|| Error::Input(format!("bank entry {j} out of range")))?;
        if values.len() != entry.current.dim() {
            return Err(Error::DimensionMismatch {
                expected: entry.current.dim(),
                actual: values.len(),
            });
        }
        entry.current = normalize(values)?;
        Ok(())
    }

    /// Mean cos(pretrained, current) over the bank.
    pub fn mean_drift_cosine(&self) -> f64 {
        if self.entries.is_empty() {
            return 1.0;
        }
        self.entries
            .iter()
            .map(|e| e.pretrained.cosine(&e.current))
            .sum::<f64>()
            / self.entries.len() as f64
    }

    /// Checksum over every current vector, used to detect mutation.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for e in &self.entries {
            bytes.extend(store::f32_bytes(e.current.as_slice()));
            bytes.extend(store::f32_bytes(e.pretrained.as_slice()));
        }
        store::checksum(&bytes)
    }

    /// Writes `manifest.json` plus `vectors/*.f32` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for (j, e) in self.entries.iter().enumerate() {
            let write = |tag: &str, v: &EmbeddingVector| -> Result<VectorRef> {
                let record_id = format!("{j:05}-{tag}");
                let checksum =
                    store::write_f32(&dir.join("vectors").join(format!("{record_id}.f32")), v.as_slice())?;
                Ok(VectorRef {
                    record_id,
                    len: v.dim(),
                    checksum,
                })
            };
            entries.push(EntryManifest {
                noun: e.noun.clone(),
                cluster: e.cluster,
                similarity: e.similarity,
                pretrained: write("pretrained", &e.pretrained)?,
                current: write("current", &e.current)?,
            });
        }
        store::write_json(
            &dir.join("manifest.json"),
            &BankManifest {
                version: 1,
                num_clusters: self.num_clusters,
                learnable: self.learnable,
                entries,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: BankManifest = store::read_json(&manifest_path)?;
        let read = |r: &VectorRef| -> Result<EmbeddingVector> {
            let path = dir.join("vectors").join(format!("{}.f32", r.record_id));
            let values = store::read_f32_checked(&path, r.len, &r.checksum).map_err(|reason| {
                Error::Format {
                    path: path.clone(),
                    reason,
                }
            })?;
            EmbeddingVector::from_unit(values)
        };
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            if e.cluster >= manifest.num_clusters {
                return Err(Error::Format {
                    path: manifest_path.clone(),
                    reason: format!("entry '{}' has cluster {} ≥ M", e.noun, e.cluster),
                });
            }
            entries.push(BankEntry {
                noun: e.noun.clone(),
                cluster: e.cluster,
                similarity: e.similarity,
                pretrained: read(&e.pretrained)?,
                current: read(&e.current)?,
            });
        }
        Ok(Self {
            entries,
            num_clusters: manifest.num_clusters,
            learnable: manifest.learnable,
        })
    }
}
