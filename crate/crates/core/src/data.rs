//! Seeded synthetic classification data with optional label noise and
//! long-tail class counts.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embeddings::ImageInput;
use crate::error::{Error, Result};
use crate::store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    /// Training samples per class (the head class count in long-tail mode).
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub feature_dim: usize,
    /// Norm of each class mean; features are `mean + N(0, I)`.
    pub separability: f64,
    /// Probability that a training label is replaced by a uniformly drawn
    /// different class. Validation labels are always clean.
    pub label_noise: f64,
    /// Head-to-tail class-count ratio of the training split; 1 means balanced.
    pub imbalance_factor: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 100,
            val_per_class: 50,
            feature_dim: 32,
            separability: 4.0,
            label_noise: 0.0,
            imbalance_factor: 1.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.num_classes < 2 {
            bad.push("num_classes (must be ≥ 2)");
        }
        if self.train_per_class == 0 {
            bad.push("train_per_class (must be ≥ 1)");
        }
        if self.feature_dim == 0 {
            bad.push("feature_dim (must be ≥ 1)");
        }
        if !(self.separability >= 0.0) || !self.separability.is_finite() {
            bad.push("separability (must be finite and ≥ 0)");
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            bad.push("label_noise (must be in [0, 1))");
        }
        if !(self.imbalance_factor >= 1.0) || !self.imbalance_factor.is_finite() {
            bad.push("imbalance_factor (must be ≥ 1)");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid dataset spec: {}", bad.join(", "))))
        }
    }

    /// Training count of class `c`: `n_max · IF^(−c/(C−1))`, at least 1.
    pub fn train_count(&self, class: usize) -> usize {
        if self.imbalance_factor == 1.0 {
            return self.train_per_class;
        }
        let exponent = -(class as f64) / (self.num_classes - 1) as f64;
        let n = self.train_per_class as f64 * self.imbalance_factor.powf(exponent);
        (n.round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: u64,
    /// Annotated class (0-based); may differ from `latent_class` under label noise.
    pub label: usize,
    /// Class that actually generated the features.
    pub latent_class: usize,
    pub features: Vec<f64>,
}

impl Sample {
    /// Input for an image encoder that renders this sample's content.
    pub fn image_input(&self) -> ImageInput {
        ImageInput::MockContent {
            sample_id: self.sample_id,
            class_index: self.latent_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    seed: u64,
    spec: DatasetSpec,
    train: SplitRecord,
    val: SplitRecord,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRecord {
    file: String,
    samples: usize,
    checksum: String,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

impl SyntheticDataset {
    pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means: Vec<Vec<f64>> = (0..spec.num_classes)
            .map(|_| {
                let g = gaussian(&mut rng, spec.feature_dim);
                let n = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                g.into_iter().map(|x| spec.separability * x / n).collect()
            })
            .collect();
        let mut next_id = 0u64;
        let mut draw = |rng: &mut ChaCha8Rng, class: usize, noisy: bool| {
            let features = means[class]
                .iter()
                .zip(gaussian(rng, spec.feature_dim))
                .map(|(m, z)| m + z)
                .collect();
            let mut label = class;
            if noisy && spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
                let other = rng.random_range(0..spec.num_classes - 1);
                label = if other >= class { other + 1 } else { other };
            }
            let s = Sample {
                sample_id: next_id,
                label,
                latent_class: class,
                features,
            };
            next_id += 1;
            s
        };
        let mut train = Vec::new();
        for c in 0..spec.num_classes {
            for _ in 0..spec.train_count(c) {
                train.push(draw(&mut rng, c, true));
            }
        }
        let mut val = Vec::new();
        for c in 0..spec.num_classes {
            for _ in 0..spec.val_per_class {
                val.push(draw(&mut rng, c, false));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            seed,
            train,
            val,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Per-class counts of annotated training labels.
    pub fn train_label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.num_classes];
        for s in &self.train {
            counts[s.label] += 1;
        }
        counts
    }

    /// Writes `manifest.json`, `train.csv` and `val.csv` into `dir`.
    /// Class ids in the files are 1-based.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let split = |name: &str, samples: &[Sample]| -> Result<SplitRecord> {
            let file = format!("{name}.csv");
            let bytes = split_csv(samples, self.spec.feature_dim)?;
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            Ok(SplitRecord {
                file,
                samples: samples.len(),
                checksum: store::checksum(&bytes),
            })
        };
        let manifest = DatasetManifest {
            version: 1,
            seed: self.seed,
            spec: self.spec.clone(),
            train: split("train", &self.train)?,
            val: split("val", &self.val)?,
        };
        store::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = store::read_json(&dir.join("manifest.json"))?;
        manifest.spec.validate()?;
        let read = |rec: &SplitRecord| -> Result<Vec<Sample>> {
            let path = dir.join(&rec.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let format_err = |reason: String| Error::Format {
                path: path.clone(),
                reason,
            };
            if store::checksum(&bytes) != rec.checksum {
                return Err(format_err("checksum mismatch".into()));
            }
            let samples = parse_csv(&bytes, &manifest.spec).map_err(format_err)?;
            if samples.len() != rec.samples {
                return Err(format_err(format!(
                    "expected {} samples, found {}",
                    rec.samples,
                    samples.len()
                )));
            }
            Ok(samples)
        };
        Ok(Self {
            train: read(&manifest.train)?,
            val: read(&manifest.val)?,
            spec: manifest.spec,
            seed: manifest.seed,
        })
    }
}

fn split_csv(samples: &[Sample], dim: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string(), "label".into(), "latent_class".into()];
    header.extend((0..dim).map(|d| format!("f{d}")));
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![
            s.sample_id.to_string(),
            (s.label + 1).to_string(),
            (s.latent_class + 1).to_string(),
        ];
        row.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Input(format!("csv buffer: {e}")))
}

fn parse_csv(bytes: &[u8], spec: &DatasetSpec) -> std::result::Result<Vec<Sample>, String> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        if rec.len() != 3 + spec.feature_dim {
            return Err(format!("row {line}: expected {} columns", 3 + spec.feature_dim));
        }
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let class = |i: usize| -> std::result::Result<usize, String> {
            let id: usize = field(i).parse().map_err(|e| format!("row {line}: {e}"))?;
            if id == 0 || id > spec.num_classes {
                return Err(format!("row {line}: class id {id} outside 1..={}", spec.num_classes));
            }
            Ok(id - 1)
        };
        let features = (3..rec.len())
            .map(|i| field(i).parse::<f64>().map_err(|e| format!("row {line}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        out.push(Sample {
            sample_id: field(0).parse().map_err(|e| format!("row {line}: {e}"))?,
            label: class(1)?,
            latent_class: class(2)?,
            features,
        });
    }
    Ok(out)
}
