use std::path::PathBuf;

use super::{BackendKind, EmbeddingVector, Encoder, ImageInput};
use crate::error::{Error, Result};

/// Adapter slot for a pretrained vision-language model.
///
/// No model runtime ships with this crate, so every encode call fails with
/// [`Error::BackendUnavailable`]. It never falls back to the mock.
#[derive(Debug, Clone)]
pub struct PretrainedVlm {
    identity: String,
    model_path: Option<PathBuf>,
    text_dim: usize,
    image_dim: usize,
}

impl PretrainedVlm {
    pub fn new(model_path: Option<PathBuf>, text_dim: usize, image_dim: usize) -> Self {
        let identity = match &model_path {
            Some(p) => format!("vlm-{}", p.display()),
            None => "vlm-unconfigured".to_string(),
        };
        Self {
            identity,
            model_path,
            text_dim,
            image_dim,
        }
    }

    fn unavailable(&self) -> Error {
        let reason = match &self.model_path {
            Some(p) => format!(
                "no inference runtime is linked for model {}",
                p.display()
            ),
            None => "no pretrained model configured".to_string(),
        };
        Error::BackendUnavailable {
            backend: self.identity.clone(),
            reason,
        }
    }
}

impl Encoder for PretrainedVlm {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn kind(&self) -> BackendKind {
        BackendKind::PretrainedVlm
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn image_dim(&self) -> usize {
        self.image_dim
    }

    fn encode_text(&self, _prompt: &str) -> Result<EmbeddingVector> {
        Err(self.unavailable())
    }

    fn encode_image(&self, input: &ImageInput) -> Result<EmbeddingVector> {
        if let ImageInput::MockContent { .. } = input {
            return Err(Error::Input(
                "pretrained backend consumes pixels, not mock content".into(),
            ));
        }
        Err(self.unavailable())
    }
}
