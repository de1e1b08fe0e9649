//! Teacher and student classifiers.

mod checkpoint;
mod mix;

pub use checkpoint::{Checkpoint, CheckpointManifest, ModelRole};
pub use mix::{NoiseMode, ResolvedText, ResolverSettings, TextMixPolicy, TextResolver, TextSource};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpSpec};

/// Where a feature vector was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Image,
    Text,
    Mixed,
}

/// Raw image features. The only input type the student accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures(Vec<f64>);

impl ImageFeatures {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Copy with additive Gaussian jitter of standard deviation `strength`.
    pub fn augmented<R: Rng>(&self, strength: f64, rng: &mut R) -> Self {
        if strength == 0.0 {
            return self.clone();
        }
        Self(
            self.0
                .iter()
                .map(|v| {
                    let g: f64 = StandardNormal.sample(rng);
                    v + strength * g
                })
                .collect(),
        )
    }
}

/// A feature vector tagged with its provenance, for runtime isolation checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    values: Vec<f64>,
    provenance: Provenance,
}

impl Features {
    pub fn image(x: ImageFeatures) -> Self {
        Self {
            values: x.0,
            provenance: Provenance::Image,
        }
    }

    pub fn text(values: Vec<f64>) -> Self {
        Self {
            values,
            provenance: Provenance::Text,
        }
    }

    /// `[image ‖ text]`.
    pub fn concat(image: &[f64], text: &[f64]) -> Self {
        let mut values = Vec::with_capacity(image.len() + text.len());
        values.extend_from_slice(image);
        values.extend_from_slice(text);
        Self {
            values,
            provenance: Provenance::Mixed,
        }
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Feed-forward classifier producing one logit per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub net: Mlp,
}

impl ClassifierHead {
    pub fn new(spec: &MlpSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(spec, seed)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(x)
    }

    /// SHA-256 over the f64 parameters.
    pub fn checksum(&self) -> String {
        let bytes: Vec<u8> = self
            .net
            .params()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        crate::store::checksum(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugPolicy {
    Strong,
    Weak,
}

/// One image-only member of the teacher ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct UnimodalTeacher {
    pub head: ClassifierHead,
    pub policy: AugPolicy,
    /// Jitter σ applied to inputs during training only.
    pub aug_strength: f64,
}

impl UnimodalTeacher {
    /// Eval-mode logits (no augmentation).
    pub fn forward_unimodal(&self, image: &ImageFeatures) -> Result<Vec<f64>> {
        self.head.forward(image.as_slice())
    }
}

/// Element-wise mean of member logits.
pub fn ensemble_logits(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Input("ensemble needs at least one member".into()))?;
    let mut out = vec![0.0; first.len()];
    for m in members {
        if m.len() != first.len() {
            return Err(Error::DimensionMismatch {
                expected: first.len(),
                actual: m.len(),
            });
        }
        out.iter_mut().zip(m).for_each(|(o, v)| *o += v);
    }
    let n = members.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// What the multimodal head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    /// `[image ‖ text]`.
    #[default]
    ImageText,
    /// Text embedding only.
    TextOnly,
}

/// Inputs further than this from unit norm are rejected.
pub const NORM_REJECT_TOL: f64 = 1e-3;
/// Inputs further than this (but within [`NORM_REJECT_TOL`]) are re-normalized.
pub const NORM_SILENT_TOL: f64 = 1e-5;

fn unit_or_fix(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = (n - 1.0).abs();
    if off <= NORM_SILENT_TOL {
        Ok(v.to_vec())
    } else if off <= NORM_REJECT_TOL {
        log::warn!("{what} embedding has norm {n}; re-normalizing");
        Ok(v.iter().map(|x| x / n).collect())
    } else {
        Err(Error::Input(format!("{what} embedding has norm {n}, expected 1")))
    }
}

/// Classifier over image and text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalTeacher {
    pub head: ClassifierHead,
    pub mode: InputMode,
    pub image_dim: usize,
    pub text_dim: usize,
}

impl MultimodalTeacher {
    pub fn new(
        mode: InputMode,
        image_dim: usize,
        text_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let input_dim = match mode {
            InputMode::ImageText => image_dim + text_dim,
            InputMode::TextOnly => text_dim,
        };
        let head = ClassifierHead::new(
            &MlpSpec {
                input_dim,
                hidden,
                output_dim: num_classes,
                zero_last: false,
            },
            seed,
        )?;
        Ok(Self {
            head,
            mode,
            image_dim,
            text_dim,
        })
    }

    /// Head input for the given pair; both parts must be (near) unit norm.
    pub fn input_vector(&self, image_vec: &[f64], text_vec: &[f64]) -> Result<Features> {
        if image_vec.len() != self.image_dim {
            return Err(Error::DimensionMismatch {
                expected: self.image_dim,
                actual: image_vec.len(),
            });
        }
        if text_vec.len() != self.text_dim {
            return Err(Error::DimensionMismatch {
                expected: self.text_dim,
                actual: text_vec.len(),
            });
        }
        let text = unit_or_fix(text_vec, "text")?;
        Ok(match self.mode {
            InputMode::ImageText => Features::concat(&unit_or_fix(image_vec, "image")?, &text),
            InputMode::TextOnly => Features::text(text),
        })
    }

    /// Length of the image block at the start of the head input.
    pub fn image_block(&self) -> usize {
        match self.mode {
            InputMode::ImageText => self.image_dim,
            InputMode::TextOnly => 0,
        }
    }

    pub fn forward_multimodal(&self, image_vec: &[f64], text_vec: &[f64]) -> Result<Vec<f64>> {
        let x = self.input_vector(image_vec, text_vec)?;
        self.head.forward(x.values())
    }
}

/// Image-only classifier trained by distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    pub head: ClassifierHead,
    pub aug_strength: f64,
}

impl Student {
    pub fn forward(&self, image: &ImageFeatures) -> Result<Vec<f64>> {
        self.head.forward(image.as_slice())
    }

    /// Runtime-checked entry point for tagged features.
    pub fn forward_features(&self, x: &Features) -> Result<Vec<f64>> {
        if x.provenance() != Provenance::Image {
            return Err(Error::StudentIsolation(format!(
                "student received {:?}-derived features",
                x.provenance()
            )));
        }
        self.head.forward(x.values())
    }
}
