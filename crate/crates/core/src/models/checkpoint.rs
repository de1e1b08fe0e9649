//! Model checkpoints: `manifest.json` plus a float32 parameter record.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AugPolicy, ClassifierHead, InputMode, MultimodalTeacher, Student, UnimodalTeacher};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpSpec};
use crate::store;

const PARAMS_FILE: &str = "params.f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelRole {
    TeacherStrong,
    TeacherWeak,
    TeacherX,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub file: String,
    pub len: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub role: ModelRole,
    /// Layer widths from input to output.
    pub widths: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_mode: Option<InputMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aug_strength: Option<f64>,
    /// Free-form run context: config echo, seeds, metric history.
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub params: ParamRecord,
}

/// A loaded (or about to be saved) checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub head: ClassifierHead,
}

impl Checkpoint {
    fn build(role: ModelRole, head: &ClassifierHead, metadata: serde_json::Value) -> Self {
        Self {
            manifest: CheckpointManifest {
                version: 1,
                role,
                widths: head.net.widths(),
                input_mode: None,
                image_dim: None,
                text_dim: None,
                aug_strength: None,
                metadata,
                params: ParamRecord {
                    file: PARAMS_FILE.into(),
                    len: head.net.param_count(),
                    checksum: String::new(),
                },
            },
            head: head.clone(),
        }
    }

    pub fn from_unimodal(t: &UnimodalTeacher, metadata: serde_json::Value) -> Self {
        let role = match t.policy {
            AugPolicy::Strong => ModelRole::TeacherStrong,
            AugPolicy::Weak => ModelRole::TeacherWeak,
        };
        let mut c = Self::build(role, &t.head, metadata);
        c.manifest.aug_strength = Some(t.aug_strength);
        c
    }

    pub fn from_multimodal(t: &MultimodalTeacher, metadata: serde_json::Value) -> Self {
        let mut c = Self::build(ModelRole::TeacherX, &t.head, metadata);
        c.manifest.input_mode = Some(t.mode);
        c.manifest.image_dim = Some(t.image_dim);
        c.manifest.text_dim = Some(t.text_dim);
        c
    }

    pub fn from_student(s: &Student, metadata: serde_json::Value) -> Self {
        let mut c = Self::build(ModelRole::Student, &s.head, metadata);
        c.manifest.aug_strength = Some(s.aug_strength);
        c
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let values: Vec<f32> = self.head.net.params().iter().map(|&v| v as f32).collect();
        let checksum = store::write_f32(&dir.join(PARAMS_FILE), &values)?;
        let mut manifest = self.manifest.clone();
        manifest.params = ParamRecord {
            file: PARAMS_FILE.into(),
            len: values.len(),
            checksum,
        };
        store::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: CheckpointManifest = store::read_json(&manifest_path)?;
        let format = |reason: String| Error::Format {
            path: manifest_path.clone(),
            reason,
        };
        if manifest.widths.len() < 2 {
            return Err(format("checkpoint needs at least input and output widths".into()));
        }
        let path = dir.join(&manifest.params.file);
        let values = store::read_f32_checked(&path, manifest.params.len, &manifest.params.checksum)
            .map_err(|reason| Error::Format {
                path: path.clone(),
                reason,
            })?;
        let w = &manifest.widths;
        let spec = MlpSpec {
            input_dim: w[0],
            hidden: w[1..w.len() - 1].to_vec(),
            output_dim: w[w.len() - 1],
            zero_last: true,
        };
        let mut net = Mlp::new(&spec, 0).map_err(|e| format(e.to_string()))?;
        let wide: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        net.set_params(&wide).map_err(|e| format(e.to_string()))?;
        Ok(Self {
            manifest,
            head: ClassifierHead { net },
        })
    }

    pub fn into_multimodal(self) -> Result<MultimodalTeacher> {
        let m = &self.manifest;
        match (m.role, m.input_mode, m.image_dim, m.text_dim) {
            (ModelRole::TeacherX, Some(mode), Some(image_dim), Some(text_dim)) => {
                Ok(MultimodalTeacher {
                    head: self.head,
                    mode,
                    image_dim,
                    text_dim,
                })
            }
            _ => Err(Error::Input(format!(
                "checkpoint with role {:?} is not a multimodal teacher",
                m.role
            ))),
        }
    }

    pub fn into_unimodal(self) -> Result<UnimodalTeacher> {
        let policy = match self.manifest.role {
            ModelRole::TeacherStrong => AugPolicy::Strong,
            ModelRole::TeacherWeak => AugPolicy::Weak,
            other => {
                return Err(Error::Input(format!(
                    "checkpoint with role {other:?} is not an ensemble member"
                )))
            }
        };
        Ok(UnimodalTeacher {
            head: self.head,
            policy,
            aug_strength: self.manifest.aug_strength.unwrap_or(0.0),
        })
    }

    pub fn into_student(self) -> Result<Student> {
        if self.manifest.role != ModelRole::Student {
            return Err(Error::Input(format!(
                "checkpoint with role {:?} is not a student",
                self.manifest.role
            )));
        }
        Ok(Student {
            head: self.head,
            aug_strength: self.manifest.aug_strength.unwrap_or(0.0),
        })
    }
}
