use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::embeddings::BackendKind;
use crate::error::{Error, Result};
use crate::lexicon::{CandidateScope, PromptTemplateSet, DEFAULT_PER_CLASS_LIMIT};
use crate::losses::KdConfig;
use crate::models::{InputMode, NoiseMode, TextMixPolicy};
use crate::nn::SgdConfig;
use crate::relaxation::{SelectionMode, DEFAULT_TOP_K};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub anchor_seed: u64,
    pub synonym_noise: f64,
    pub distractor_noise: f64,
    pub image_noise: f64,
    pub text_dim: usize,
    pub image_dim: usize,
    /// Weights location for the pretrained backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    /// Persistent embedding cache directory; none disables caching.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::SemanticMock,
            anchor_seed: 7,
            synonym_noise: 0.3,
            distractor_noise: 2.0,
            image_noise: 1.0,
            text_dim: 32,
            image_dim: 32,
            model_path: None,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelaxConfig {
    pub per_class_limit: usize,
    pub scope: CandidateScope,
    pub templates: PromptTemplateSet,
    /// Number of image clusters; defaults to the class count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_clusters: Option<usize>,
    pub top_k: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub embed_batch_size: usize,
    pub selection: SelectionMode,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        Self {
            per_class_limit: DEFAULT_PER_CLASS_LIMIT,
            scope: CandidateScope::PerClass,
            templates: PromptTemplateSet::default(),
            num_clusters: None,
            top_k: DEFAULT_TOP_K,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
            embed_batch_size: 64,
            selection: SelectionMode::NearestInCluster,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub strong_aug: f64,
    pub weak_aug: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            epochs: 20,
            batch_size: 32,
            sgd: SgdConfig::default(),
            strong_aug: 1.0,
            weak_aug: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherXConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub input_mode: InputMode,
    /// Step size for bank vectors; defaults to the head learning rate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank_lr: Option<f64>,
}

impl Default for TeacherXConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            epochs: 20,
            batch_size: 32,
            sgd: SgdConfig::default(),
            input_mode: InputMode::ImageText,
            bank_lr: None,
        }
    }
}

/// Which teacher logits the student is distilled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherSignal {
    /// Mean of the ensemble and the multimodal teacher.
    #[default]
    Average,
    /// Multimodal teacher only.
    MultimodalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub aug_strength: f64,
    pub signal: TeacherSignal,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            epochs: 20,
            batch_size: 32,
            sgd: SgdConfig::default(),
            aug_strength: 1.0,
            signal: TeacherSignal::Average,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    pub p_gt: f64,
    pub p_wn: f64,
    pub p_noise: f64,
    pub noise_mode: NoiseMode,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            p_gt: 1.0,
            p_wn: 0.0,
            p_noise: 0.0,
            noise_mode: NoiseMode::PerSample,
        }
    }
}

impl MixConfig {
    pub fn policy(&self) -> Result<TextMixPolicy> {
        TextMixPolicy::new(self.p_gt, self.p_wn, self.p_noise)
    }

    pub fn set_policy(&mut self, p: TextMixPolicy) {
        self.p_gt = p.p_gt;
        self.p_wn = p.p_wn;
        self.p_noise = p.p_noise;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankMode {
    #[default]
    Learnable,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub mix: u64,
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            init: 2,
            mix: 3,
            noise: 4,
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub backend: BackendConfig,
    pub relax: RelaxConfig,
    pub teachers: EnsembleConfig,
    pub teacher_x: TeacherXConfig,
    pub student: StudentConfig,
    pub kd: KdConfig,
    pub mix: MixConfig,
    pub bank: BankMode,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            dataset: DatasetSpec::default(),
            backend: BackendConfig::default(),
            relax: RelaxConfig::default(),
            teachers: EnsembleConfig::default(),
            teacher_x: TeacherXConfig::default(),
            student: StudentConfig::default(),
            kd: KdConfig::default(),
            mix: MixConfig::default(),
            bank: BankMode::Learnable,
            seeds: Seeds::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        };
        parsed.map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.kd.validate()?;
        self.mix.policy()?;
        let mut bad = Vec::new();
        if self.backend.text_dim == 0 || self.backend.image_dim == 0 {
            bad.push("backend.text_dim/image_dim must be positive".to_string());
        }
        if self.backend.text_dim != self.backend.image_dim {
            bad.push(format!(
                "backend.text_dim ({}) must equal backend.image_dim ({}) for noun-to-cluster matching",
                self.backend.text_dim, self.backend.image_dim
            ));
        }
        if !(0.0..1.0).contains(&self.backend.synonym_noise) {
            bad.push("backend.synonym_noise must be in [0, 1)".into());
        }
        if self.relax.top_k == 0 {
            bad.push("relax.top_k must be ≥ 1".into());
        }
        if self.relax.num_clusters == Some(0) {
            bad.push("relax.num_clusters must be ≥ 1".into());
        }
        for (name, b) in [
            ("teachers.batch_size", self.teachers.batch_size),
            ("teacher_x.batch_size", self.teacher_x.batch_size),
            ("student.batch_size", self.student.batch_size),
        ] {
            if b == 0 {
                bad.push(format!("{name} must be ≥ 1"));
            }
        }
        for (name, s) in [
            ("teachers.sgd", self.teachers.sgd),
            ("teacher_x.sgd", self.teacher_x.sgd),
            ("student.sgd", self.student.sgd),
        ] {
            if !(s.lr > 0.0) || !(0.0..1.0).contains(&s.momentum) || s.weight_decay < 0.0 {
                bad.push(format!("{name} needs lr > 0, momentum in [0, 1), weight_decay ≥ 0"));
            }
        }
        if self.teacher_x.bank_lr.is_some_and(|lr| !(lr >= 0.0)) {
            bad.push("teacher_x.bank_lr must be ≥ 0".into());
        }
        for (name, a) in [
            ("teachers.strong_aug", self.teachers.strong_aug),
            ("teachers.weak_aug", self.teachers.weak_aug),
            ("student.aug_strength", self.student.aug_strength),
        ] {
            if !(a >= 0.0) {
                bad.push(format!("{name} must be ≥ 0"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.relax.num_clusters.unwrap_or(self.dataset.num_classes)
    }

    /// Same config with every seed (including the encoder's) shifted by `offset`.
    pub fn with_seed_offset(&self, offset: u64) -> Self {
        let mut c = self.clone();
        c.seeds.data = c.seeds.data.wrapping_add(offset);
        c.seeds.init = c.seeds.init.wrapping_add(offset);
        c.seeds.mix = c.seeds.mix.wrapping_add(offset);
        c.seeds.noise = c.seeds.noise.wrapping_add(offset);
        c.backend.anchor_seed = c.backend.anchor_seed.wrapping_add(offset);
        c
    }
}
