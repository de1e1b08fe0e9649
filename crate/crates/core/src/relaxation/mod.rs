//! Relaxed noun bank construction.
//!
//! Candidate nouns are embedded by averaging their template prompts, the
//! training images are clustered with k-means, every noun is attached to its
//! most similar cluster center, and each cluster keeps its `top_k` most
//! similar nouns. The surviving vectors form a [`NounBank`] whose current
//! vectors may be trained while a frozen pretrained copy is kept alongside.

mod bank;
mod kmeans;

pub use bank::{BankEntry, NounBank};
pub use kmeans::{kmeans, ClusterModel};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{normalize, EmbeddingVector, Encoder};
use crate::error::{Error, Result};
use crate::lexicon::{NounCandidateSet, PromptTemplateSet};

pub const DEFAULT_TOP_K: usize = 5;

/// Template-averaged, re-normalized embedding of every candidate noun.
///
/// Prompts are encoded template by template in chunks of `batch_size` nouns;
/// the per-noun sum is accumulated in template order, so the result does not
/// depend on `batch_size`.
pub fn embed_nouns(
    nouns: &NounCandidateSet,
    templates: &PromptTemplateSet,
    backend: &dyn Encoder,
    batch_size: usize,
) -> Result<Vec<(String, EmbeddingVector)>> {
    if nouns.is_empty() {
        return Err(Error::Input("embed_nouns needs at least one noun".into()));
    }
    if templates.is_empty() {
        return Err(Error::Input("embed_nouns needs at least one template".into()));
    }
    let batch_size = batch_size.max(1);
    let dim = backend.text_dim();
    let mut sums = vec![vec![0f64; dim]; nouns.len()];
    for template in templates.templates() {
        for (chunk_idx, chunk) in nouns.nouns.chunks(batch_size).enumerate() {
            for (offset, noun) in chunk.iter().enumerate() {
                let i = chunk_idx * batch_size + offset;
                let encoded = crate::lexicon::apply_templates(
                    &PromptTemplateSet::new([template.as_str()])?,
                    noun,
                )
                .and_then(|p| crate::embeddings::encode_text(backend, &p[0]))
                .map_err(|e| Error::NounEncode {
                    noun: noun.clone(),
                    template: template.clone(),
                    source: Box::new(e),
                })?;
                if encoded.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: encoded.dim(),
                    });
                }
                for (s, &v) in sums[i].iter_mut().zip(encoded.as_slice()) {
                    *s += v as f64;
                }
            }
        }
    }
    let count = templates.len() as f64;
    nouns
        .nouns
        .iter()
        .zip(sums)
        .map(|(noun, sum)| {
            let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
            Ok((noun.clone(), normalize(&mean)?))
        })
        .collect()
}

/// `values[k][i] = ⟨m_k, n_i⟩`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn compute(centers: &[Vec<f64>], nouns: &[(String, EmbeddingVector)]) -> Result<Self> {
        let dim = centers.first().map_or(0, Vec::len);
        if let Some((noun, v)) = nouns.iter().find(|(_, v)| v.dim() != dim) {
            return Err(Error::Input(format!(
                "noun '{noun}' has dimension {} but cluster centers have {dim}",
                v.dim()
            )));
        }
        let values = centers
            .iter()
            .map(|m| nouns.iter().map(|(_, n)| n.dot(m)).collect())
            .collect();
        Ok(Self {
            rows: centers.len(),
            cols: nouns.len(),
            values,
        })
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.values[k][i]
    }

    /// Cluster of maximum similarity for noun `i`; ties go to the lowest id.
    pub fn argmax_cluster(&self, i: usize) -> usize {
        let mut best = 0;
        for k in 1..self.rows {
            if self.values[k][i] > self.values[best][i] {
                best = k;
            }
        }
        best
    }
}

/// One row of the human-readable selection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub noun: String,
    pub cluster: usize,
    pub similarity: f64,
    pub rank: usize,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub selections: Vec<Selection>,
    /// Clusters that received no noun at all.
    pub empty_clusters: Vec<usize>,
}

/// Attaches every noun to its argmax cluster and keeps each cluster's
/// `top_k` nouns by similarity.
///
/// A softmax over one cluster's similarities is strictly increasing in the
/// raw similarity, so ranking on the raw scores selects the same nouns.
/// Equal scores are broken by candidate order.
pub fn assign_and_filter(
    clusters: &ClusterModel,
    noun_embeddings: &[(String, EmbeddingVector)],
    top_k: usize,
) -> Result<(NounBank, FilterReport)> {
    if clusters.num_clusters() == 0 {
        return Err(Error::Input("cluster model has no centers".into()));
    }
    for (noun, v) in noun_embeddings {
        if (v.norm() - 1.0).abs() > 1e-5 {
            return Err(Error::Input(format!("noun embedding for '{noun}' is not unit norm")));
        }
    }
    let s = SimilarityMatrix::compute(&clusters.centers, noun_embeddings)?;
    let m = clusters.num_clusters();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); m];
    for i in 0..noun_embeddings.len() {
        members[s.argmax_cluster(i)].push(i);
    }

    let mut entries = Vec::new();
    let mut selections = Vec::new();
    let mut empty_clusters = Vec::new();
    for (k, idx) in members.iter_mut().enumerate() {
        if idx.is_empty() {
            log::warn!("cluster {k} received no nouns; it contributes no bank entries");
            empty_clusters.push(k);
            continue;
        }
        idx.sort_by(|&a, &b| s.get(k, b).total_cmp(&s.get(k, a)).then(a.cmp(&b)));
        for (rank, &i) in idx.iter().enumerate() {
            let (noun, vec) = &noun_embeddings[i];
            let kept = rank < top_k;
            selections.push(Selection {
                noun: noun.clone(),
                cluster: k,
                similarity: s.get(k, i),
                rank,
                kept,
            });
            if kept {
                let renormalized = normalize(&vec.to_f64())?;
                entries.push(BankEntry::new(noun.clone(), renormalized, k, s.get(k, i)));
            }
        }
    }
    Ok((
        NounBank::new(entries, m, true),
        FilterReport {
            selections,
            empty_clusters,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    #[default]
    NearestInCluster,
    RandomInCluster,
}

/// Picks the bank entry that stands in for one image's text.
///
/// The image's cluster is its nearest center; within it the entry with the
/// largest ⟨image, current⟩ wins (or a seeded uniform pick). Clusters without
/// entries fall back to the globally nearest entry.
pub fn select_relaxed_for_sample(
    bank: &NounBank,
    image_vec: &EmbeddingVector,
    clusters: &ClusterModel,
    mode: SelectionMode,
    seed: u64,
) -> Result<usize> {
    if bank.is_empty() {
        return Err(Error::Input("cannot select from an empty noun bank".into()));
    }
    let image = image_vec.to_f64();
    if image.len() != clusters.dim() {
        return Err(Error::DimensionMismatch {
            expected: clusters.dim(),
            actual: image.len(),
        });
    }
    let k = clusters.nearest(&image);
    let members: Vec<usize> = bank
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.cluster == k)
        .map(|(j, _)| j)
        .collect();
    let nearest_of = |cands: &mut dyn Iterator<Item = usize>| {
        let mut best: Option<(usize, f64)> = None;
        for j in cands {
            let score = bank.entries()[j].current().dot(&image);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        best.map(|(j, _)| j)
    };
    if members.is_empty() {
        return Ok(nearest_of(&mut (0..bank.len())).expect("bank is non-empty"));
    }
    Ok(match mode {
        SelectionMode::NearestInCluster => {
            nearest_of(&mut members.iter().copied()).expect("members non-empty")
        }
        SelectionMode::RandomInCluster => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            members[rng.random_range(0..members.len())]
        }
    })
}
