//! Integrated-gradients attribution split by modality block.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ClassifierHead, MultimodalTeacher};
use crate::store;

pub const DEFAULT_IG_STEPS: usize = 64;
pub const MIN_IG_STEPS: usize = 8;
/// Relative completeness residual a sample should stay under.
pub const COMPLETENESS_TOL: f64 = 1e-3;

/// A scalar-per-class function with input gradients.
pub trait Differentiable: Sync {
    fn input_dim(&self) -> usize;
    fn value(&self, x: &[f64], target: usize) -> Result<f64>;
    fn gradient(&self, x: &[f64], target: usize) -> Result<Vec<f64>>;
}

impl Differentiable for ClassifierHead {
    fn input_dim(&self) -> usize {
        ClassifierHead::input_dim(self)
    }

    fn value(&self, x: &[f64], target: usize) -> Result<f64> {
        self.forward(x)?
            .get(target)
            .copied()
            .ok_or_else(|| Error::Input(format!("target class {target} out of range")))
    }

    fn gradient(&self, x: &[f64], target: usize) -> Result<Vec<f64>> {
        self.net.input_gradient(x, target)
    }
}

/// `f_c(x) = w_c · x + b_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Differentiable for LinearModel {
    fn input_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn value(&self, x: &[f64], target: usize) -> Result<f64> {
        let w = self
            .weights
            .get(target)
            .ok_or_else(|| Error::Input(format!("target class {target} out of range")))?;
        Ok(self.bias[target] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
    }

    fn gradient(&self, _x: &[f64], target: usize) -> Result<Vec<f64>> {
        self.weights
            .get(target)
            .cloned()
            .ok_or_else(|| Error::Input(format!("target class {target} out of range")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgResult {
    pub attributions: Vec<f64>,
    /// `f(x) − f(baseline)`.
    pub delta: f64,
    /// `|Σ attributions − delta|`.
    pub residual: f64,
}

impl IgResult {
    pub fn relative_residual(&self) -> f64 {
        if self.delta == 0.0 {
            self.residual
        } else {
            self.residual / self.delta.abs()
        }
    }
}

/// Right Riemann sum of the path integral from `baseline` to `input`:
/// `IG_d = (x_d − b_d) · (1/n) Σ_{s=1..n} ∂f/∂x_d(b + (s/n)(x − b))`.
pub fn integrated_gradients(
    model: &dyn Differentiable,
    input: &[f64],
    target: usize,
    baseline: &[f64],
    n_steps: usize,
) -> Result<IgResult> {
    if n_steps < MIN_IG_STEPS {
        return Err(Error::Config(format!(
            "integrated gradients needs n_steps ≥ {MIN_IG_STEPS}, got {n_steps}"
        )));
    }
    if input.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: input.len(),
        });
    }
    if baseline.len() != input.len() {
        return Err(Error::DimensionMismatch {
            expected: input.len(),
            actual: baseline.len(),
        });
    }
    let diff: Vec<f64> = input.iter().zip(baseline).map(|(x, b)| x - b).collect();
    let mut sum = vec![0.0; input.len()];
    let mut point = vec![0.0; input.len()];
    for s in 1..=n_steps {
        let alpha = s as f64 / n_steps as f64;
        for ((p, b), d) in point.iter_mut().zip(baseline).zip(&diff) {
            *p = b + alpha * d;
        }
        let g = model.gradient(&point, target)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { step: s });
        }
        sum.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
    }
    let attributions: Vec<f64> = sum
        .iter()
        .zip(&diff)
        .map(|(g, d)| d * g / n_steps as f64)
        .collect();
    let delta = model.value(input, target)? - model.value(baseline, target)?;
    let residual = (attributions.iter().sum::<f64>() - delta).abs();
    Ok(IgResult {
        attributions,
        delta,
        residual,
    })
}

/// `(Σ_{d<d_img}|a_d|, rest) / Σ|a_d|`.
pub fn modality_shares(attr: &[f64], d_img: usize, d_txt: usize) -> Result<(f64, f64)> {
    if attr.len() != d_img + d_txt {
        return Err(Error::DimensionMismatch {
            expected: d_img + d_txt,
            actual: attr.len(),
        });
    }
    let image: f64 = attr[..d_img].iter().map(|a| a.abs()).sum();
    let text: f64 = attr[d_img..].iter().map(|a| a.abs()).sum();
    let total = image + text;
    if total == 0.0 || !total.is_finite() {
        return Err(Error::Degenerate("modality shares undefined for all-zero attributions".into()));
    }
    let image_share = image / total;
    Ok((image_share, 1.0 - image_share))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// The model's argmax class.
    #[default]
    Predicted,
    /// The sample's label.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAttribution {
    pub sample_id: u64,
    pub target: usize,
    pub image_share: f64,
    pub text_share: f64,
    pub relative_residual: f64,
    pub attributions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub trial: String,
    pub n_steps: usize,
    pub baseline: String,
    pub target_mode: TargetMode,
    pub image_dim: usize,
    pub text_dim: usize,
    /// Mean of per-sample shares.
    pub image_share: f64,
    pub text_share: f64,
    pub max_relative_residual: f64,
    /// Samples skipped because every attribution was zero.
    pub skipped: usize,
    pub samples: Vec<SampleAttribution>,
}

/// Resolved head inputs for attribution, as written next to a trained
/// multimodal teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub trial: String,
    pub sample_ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub inputs: Vec<Vec<f64>>,
}

impl EvalSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: Self = store::read_json(path)?;
        if set.inputs.len() != set.sample_ids.len() || set.inputs.len() != set.labels.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "inputs, sample_ids and labels differ in length".into(),
            });
        }
        Ok(set)
    }

    pub fn trial<'a>(&'a self, teacher: &'a MultimodalTeacher) -> Trial<'a> {
        Trial {
            name: &self.trial,
            teacher,
            inputs: &self.inputs,
            sample_ids: &self.sample_ids,
            labels: &self.labels,
        }
    }
}

/// One trained teacher and the inputs it is evaluated on.
#[derive(Debug, Clone, Copy)]
pub struct Trial<'a> {
    pub name: &'a str,
    pub teacher: &'a MultimodalTeacher,
    /// Head inputs, one per sample.
    pub inputs: &'a [Vec<f64>],
    pub sample_ids: &'a [u64],
    pub labels: &'a [usize],
}

/// Zero-baseline IG over every sample of a trial.
pub fn attribute_trial(trial: &Trial<'_>, n_steps: usize, target_mode: TargetMode) -> Result<AttributionReport> {
    let head = &trial.teacher.head;
    let d_img = trial.teacher.image_block();
    let d_txt = trial.teacher.text_dim;
    if trial.inputs.len() != trial.sample_ids.len() || trial.inputs.len() != trial.labels.len() {
        return Err(Error::Input("trial inputs, ids and labels differ in length".into()));
    }
    let per_sample: Vec<Result<Option<SampleAttribution>>> = trial
        .inputs
        .par_iter()
        .zip(trial.sample_ids.par_iter().zip(trial.labels.par_iter()))
        .map(|(x, (&id, &label))| {
            let target = match target_mode {
                TargetMode::Predicted => {
                    let z = head.forward(x)?;
                    (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b })
                }
                TargetMode::GroundTruth => label,
            };
            let baseline = vec![0.0; x.len()];
            let ig = integrated_gradients(head, x, target, &baseline, n_steps)?;
            match modality_shares(&ig.attributions, d_img, d_txt) {
                Ok((image_share, text_share)) => Ok(Some(SampleAttribution {
                    sample_id: id,
                    target,
                    image_share,
                    text_share,
                    relative_residual: ig.relative_residual(),
                    attributions: ig.attributions,
                })),
                Err(Error::Degenerate(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut samples = Vec::with_capacity(per_sample.len());
    let mut skipped = 0;
    for r in per_sample {
        match r? {
            Some(s) => samples.push(s),
            None => skipped += 1,
        }
    }
    if samples.is_empty() {
        return Err(Error::Degenerate(format!(
            "trial '{}' has no sample with non-zero attributions",
            trial.name
        )));
    }
    let max_relative_residual = samples
        .iter()
        .map(|s| s.relative_residual)
        .fold(0.0, f64::max);
    if max_relative_residual > COMPLETENESS_TOL {
        log::warn!(
            "trial '{}': completeness residual {max_relative_residual:.2e} exceeds {COMPLETENESS_TOL:.0e} at {n_steps} steps",
            trial.name
        );
    }
    let n = samples.len() as f64;
    let image_share = samples.iter().map(|s| s.image_share).sum::<f64>() / n;
    Ok(AttributionReport {
        trial: trial.name.to_string(),
        n_steps,
        baseline: "zero".into(),
        target_mode,
        image_dim: d_img,
        text_dim: d_txt,
        image_share,
        text_share: 1.0 - image_share,
        max_relative_residual,
        skipped,
        samples,
    })
}

/// Per-trial reports; a failing trial is logged and kept as an error.
pub fn attribution_sweep(
    trials: &[Trial<'_>],
    n_steps: usize,
    target_mode: TargetMode,
) -> Vec<Result<AttributionReport>> {
    trials
        .iter()
        .map(|t| {
            let r = attribute_trial(t, n_steps, target_mode);
            if let Err(e) = &r {
                log::error!("attribution for trial '{}' failed: {e}", t.name);
            }
            r
        })
        .collect()
}

/// `trial,image_share,text_share` table.
pub fn shares_csv(reports: &[AttributionReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "image_share", "text_share", "max_relative_residual"])?;
    for r in reports {
        w.write_record([
            r.trial.clone(),
            r.image_share.to_string(),
            r.text_share.to_string(),
            r.max_relative_residual.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Input(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
