//! Text and image encoders producing unit-norm embeddings.
//!
//! The [`Encoder`] trait is the only way the rest of the crate obtains
//! embeddings. Two backends exist: [`SemanticMock`], a deterministic test
//! double with controllable class neighborhoods, and [`PretrainedVlm`], the
//! adapter slot for a real vision-language model. [`CachedEncoder`] wraps any
//! backend with a persistent on-disk cache.

mod cache;
mod mock;
mod vlm;

use serde::{Deserialize, Serialize};

pub use cache::{CacheManifest, CacheRecord, CachedEncoder, EmbeddingCache};
pub use mock::{NounKind, RegisteredNoun, SemanticMock, SemanticMockSpec};
pub use vlm::PretrainedVlm;

use crate::error::{Error, Result};

/// Tolerance on the L2 norm of a stored unit vector.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A finite, unit-norm embedding stored as `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wraps values that are already unit norm (within 1e-5, to allow for
    /// float32 round trips through storage).
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("embedding has non-finite entries".into()));
        }
        let norm = l2_norm_f32(&values);
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::Input(format!(
                "embedding is not unit norm (norm = {norm})"
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    pub fn norm(&self) -> f64 {
        l2_norm_f32(&self.0)
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(&a, &b)| a as f64 * b)
            .sum()
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let dot: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        dot / (self.norm() * other.norm())
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::from_unit(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

fn l2_norm_f32(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// `v / ‖v‖₂`. The norm is taken in f64 before rounding to f32.
pub fn normalize(v: &[f64]) -> Result<EmbeddingVector> {
    if v.is_empty() {
        return Err(Error::Degenerate("cannot normalize an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("cannot normalize a non-finite vector".into()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate("cannot normalize the zero vector".into()));
    }
    Ok(EmbeddingVector(
        v.iter().map(|x| (x / norm) as f32).collect(),
    ))
}

pub fn normalize_f32(v: &[f32]) -> Result<EmbeddingVector> {
    let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    normalize(&wide)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    PretrainedVlm,
    SemanticMock,
}

/// What an image encoder consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput {
    /// Raw pixels, row-major `height × width × channels`.
    Pixels {
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    },
    /// Content descriptor understood by the semantic mock: which class the
    /// image depicts and a per-sample key that seeds its noise.
    MockContent { sample_id: u64, class_index: usize },
}

impl ImageInput {
    pub fn cache_key(&self) -> String {
        match self {
            ImageInput::Pixels {
                width,
                height,
                channels,
                data,
            } => format!(
                "pixels:{width}x{height}x{channels}:{}",
                crate::store::checksum(&crate::store::f32_bytes(data))
            ),
            ImageInput::MockContent {
                sample_id,
                class_index,
            } => format!("mock:{sample_id}:{class_index}"),
        }
    }
}

/// Common interface of every text/image encoder.
///
/// Implementations are read-only after construction and may be shared across
/// threads. The same input must always produce bit-identical output for a
/// given [`Encoder::identity`].
pub trait Encoder: Send + Sync {
    /// Stable id, used as the cache namespace.
    fn identity(&self) -> &str;
    fn kind(&self) -> BackendKind;
    fn text_dim(&self) -> usize;
    fn image_dim(&self) -> usize;
    fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector>;
    fn encode_image(&self, input: &ImageInput) -> Result<EmbeddingVector>;
}

impl<E: Encoder + ?Sized> Encoder for Box<E> {
    fn identity(&self) -> &str {
        (**self).identity()
    }
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
    fn text_dim(&self) -> usize {
        (**self).text_dim()
    }
    fn image_dim(&self) -> usize {
        (**self).image_dim()
    }
    fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector> {
        (**self).encode_text(prompt)
    }
    fn encode_image(&self, input: &ImageInput) -> Result<EmbeddingVector> {
        (**self).encode_image(input)
    }
}

impl<E: Encoder + ?Sized> Encoder for std::sync::Arc<E> {
    fn identity(&self) -> &str {
        (**self).identity()
    }
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
    fn text_dim(&self) -> usize {
        (**self).text_dim()
    }
    fn image_dim(&self) -> usize {
        (**self).image_dim()
    }
    fn encode_text(&self, prompt: &str) -> Result<EmbeddingVector> {
        (**self).encode_text(prompt)
    }
    fn encode_image(&self, input: &ImageInput) -> Result<EmbeddingVector> {
        (**self).encode_image(input)
    }
}

/// Checks an encoder call's precondition and forwards it.
pub fn encode_text(backend: &dyn Encoder, prompt: &str) -> Result<EmbeddingVector> {
    if prompt.trim().is_empty() {
        return Err(Error::Input("prompt must be non-empty".into()));
    }
    backend.encode_text(prompt)
}

pub fn encode_image(backend: &dyn Encoder, input: &ImageInput) -> Result<EmbeddingVector> {
    backend.encode_image(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_four() {
        let v = normalize(&[3.0, 4.0]).unwrap();
        assert_eq!(v.as_slice(), &[0.6f32, 0.8]);
    }

    #[test]
    fn normalize_unit_is_identity() {
        let v = normalize(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(v.as_slice(), &[0.0f32, 1.0, 0.0]);
    }

    #[test]
    fn normalize_zero_is_degenerate() {
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn non_unit_values_are_rejected() {
        assert!(EmbeddingVector::from_unit(vec![1.0, 1.0]).is_err());
        assert!(EmbeddingVector::from_unit(vec![f32::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn normalized_vectors_have_unit_norm(v in proptest::collection::vec(-1e3f64..1e3, 1..96)) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
            let e = normalize(&v).unwrap();
            prop_assert!((e.norm() - 1.0).abs() <= UNIT_NORM_TOL);
        }
    }
}
