use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingVector, Encoder};
use crate::error::{Error, Result};
use crate::lexicon::{permutation, ClassCatalog, LexiconSource, NounCandidateSet, PromptTemplateSet};
use crate::relaxation::{
    embed_nouns, select_relaxed_for_sample, ClusterModel, NounBank, SelectionMode,
};
use crate::store::hash_seed;

/// Where a sample's teacher text comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextSource {
    /// Template applied to the annotated class name.
    Gt,
    /// An entry of the relaxed noun bank.
    Wn,
    /// Template applied to a shuffled class name.
    Noise,
}

impl TextSource {
    pub const ALL: [TextSource; 3] = [TextSource::Gt, TextSource::Wn, TextSource::Noise];
}

/// Proportions of ground-truth, relaxed and shuffled-name text.
///
/// Assignment is stratified: samples are ordered by a seeded hash of their
/// id, and the first `n_gt` take ground truth, the next `n_wn` the bank, the
/// rest noise. Counts use largest-remainder rounding, so each realized
/// fraction is within `1/N` of its target. Because the order does not depend
/// on the proportions, raising `p_wn` at the expense of `p_gt` only moves
/// samples from gt to wn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextMixPolicy {
    pub p_gt: f64,
    pub p_wn: f64,
    pub p_noise: f64,
}

impl Default for TextMixPolicy {
    fn default() -> Self {
        Self::pure(TextSource::Gt)
    }
}

impl TextMixPolicy {
    pub fn new(p_gt: f64, p_wn: f64, p_noise: f64) -> Result<Self> {
        let p = Self { p_gt, p_wn, p_noise };
        p.validate()?;
        Ok(p)
    }

    pub fn pure(source: TextSource) -> Self {
        let mut p = Self {
            p_gt: 0.0,
            p_wn: 0.0,
            p_noise: 0.0,
        };
        match source {
            TextSource::Gt => p.p_gt = 1.0,
            TextSource::Wn => p.p_wn = 1.0,
            TextSource::Noise => p.p_noise = 1.0,
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_gt, self.p_wn, self.p_noise];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("mix proportions must lie in [0, 1]: {self:?}")));
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mix proportions sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn proportion(&self, source: TextSource) -> f64 {
        match source {
            TextSource::Gt => self.p_gt,
            TextSource::Wn => self.p_wn,
            TextSource::Noise => self.p_noise,
        }
    }

    /// Per-source counts for `n` samples by largest remainder.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let exact = TextSource::ALL.map(|s| self.proportion(s) * n as f64);
        let mut counts = exact.map(|e| e.floor() as usize);
        let assigned: usize = counts.iter().sum();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(a.cmp(&b))
        });
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }

    /// Source tag for every id in `sample_ids`, in input order.
    pub fn assign(&self, sample_ids: &[u64], seed: u64) -> Vec<TextSource> {
        let mut order: Vec<(u64, usize)> = sample_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (hash_seed(&format!("{seed}:mix:{id}")), i))
            .collect();
        order.sort_unstable();
        let [n_gt, n_wn, _] = self.counts(sample_ids.len());
        let mut out = vec![TextSource::Noise; sample_ids.len()];
        for (rank, &(_, i)) in order.iter().enumerate() {
            out[i] = if rank < n_gt {
                TextSource::Gt
            } else if rank < n_gt + n_wn {
                TextSource::Wn
            } else {
                TextSource::Noise
            };
        }
        out
    }

    /// Trial name such as `"(img, 20%gt 80%wn)"`.
    pub fn trial_name(&self) -> String {
        let mut parts = Vec::new();
        for (p, tag) in [(self.p_gt, "gt"), (self.p_wn, "wn"), (self.p_noise, "noise")] {
            if p > 0.0 || tag == "gt" {
                parts.push(format!("{}%{tag}", (p * 100.0).round()));
            }
        }
        format!("(img, {})", parts.join(" "))
    }
}

/// How shuffled class names are drawn for noise text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// A fresh permutation per sample, so the shown name carries no
    /// information about the label.
    #[default]
    PerSample,
    /// One permutation shared by every sample.
    Global,
}

/// A sample's resolved teacher text.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedText {
    pub source: TextSource,
    pub vector: Vec<f64>,
    /// Bank entry used for wn text.
    pub bank_index: Option<usize>,
}

/// Seeds and modes used by [`TextResolver`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ResolverSettings {
    pub noise_mode: NoiseMode,
    pub noise_seed: u64,
    pub selection: SelectionMode,
    pub selection_seed: u64,
}

/// Turns a source tag into a text embedding for one sample.
#[derive(Debug, Clone)]
pub struct TextResolver {
    class_text: Vec<EmbeddingVector>,
    settings: ResolverSettings,
    clusters: ClusterModel,
}

impl TextResolver {
    /// Encodes every class name under `templates` (averaged and
    /// re-normalized, like the bank nouns).
    pub fn new(
        catalog: &ClassCatalog,
        templates: &PromptTemplateSet,
        backend: &dyn Encoder,
        clusters: ClusterModel,
        settings: ResolverSettings,
    ) -> Result<Self> {
        let names = NounCandidateSet {
            nouns: catalog.names().map(str::to_string).collect(),
            source: LexiconSource::MockLexicon,
        };
        let class_text = embed_nouns(&names, templates, backend, 64)?
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        Ok(Self {
            class_text,
            settings,
            clusters,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_text.len()
    }

    pub fn class_text(&self, class_index: usize) -> &EmbeddingVector {
        &self.class_text[class_index]
    }

    pub fn clusters(&self) -> &ClusterModel {
        &self.clusters
    }

    /// Class whose name is shown as noise text for this sample.
    pub fn noise_class(&self, sample_id: u64, label: usize) -> Result<usize> {
        let seed = match self.settings.noise_mode {
            NoiseMode::PerSample => {
                hash_seed(&format!("{}:noise:{sample_id}", self.settings.noise_seed))
            }
            NoiseMode::Global => self.settings.noise_seed,
        };
        Ok(permutation(self.num_classes(), seed)?.apply(label))
    }

    pub fn resolve(
        &self,
        source: TextSource,
        sample_id: u64,
        label: usize,
        image_vec: &EmbeddingVector,
        bank: &NounBank,
    ) -> Result<ResolvedText> {
        if label >= self.num_classes() {
            return Err(Error::Input(format!("label {label} out of range")));
        }
        Ok(match source {
            TextSource::Gt => ResolvedText {
                source,
                vector: self.class_text[label].to_f64(),
                bank_index: None,
            },
            TextSource::Noise => ResolvedText {
                source,
                vector: self.class_text[self.noise_class(sample_id, label)?].to_f64(),
                bank_index: None,
            },
            TextSource::Wn => {
                let seed = hash_seed(&format!("{}:select:{sample_id}", self.settings.selection_seed));
                let j = select_relaxed_for_sample(
                    bank,
                    image_vec,
                    &self.clusters,
                    self.settings.selection,
                    seed,
                )?;
                ResolvedText {
                    source,
                    vector: bank.entries()[j].current().to_f64(),
                    bank_index: Some(j),
                }
            }
        })
    }
}
