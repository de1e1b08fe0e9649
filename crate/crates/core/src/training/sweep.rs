use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{prepare, run_from_ensemble, train_unimodal_teachers, RunOutput, RunRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::models::TextMixPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Replace ground-truth text with relaxed nouns.
    Wn,
    /// Replace ground-truth text with shuffled class names.
    Noise,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wn" => Ok(SweepAxis::Wn),
            "noise" => Ok(SweepAxis::Noise),
            other => Err(Error::Config(format!("unknown sweep axis '{other}' (expected wn or noise)"))),
        }
    }
}

/// Policies `(1 − β, β, 0)` or `(1 − β, 0, β)` for each percentage β.
pub fn sweep_policies(axis: SweepAxis, percents: &[f64]) -> Result<Vec<TextMixPolicy>> {
    percents
        .iter()
        .map(|&pct| {
            let b = pct / 100.0;
            match axis {
                SweepAxis::Wn => TextMixPolicy::new(1.0 - b, b, 0.0),
                SweepAxis::Noise => TextMixPolicy::new(1.0 - b, 0.0, b),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub trial: String,
    pub policy: TextMixPolicy,
    pub teacher_val: Option<f64>,
    pub student_val: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub records: Vec<Option<RunRecord>>,
}

impl SweepResult {
    /// Comparison table: trial, proportions, teacher and student accuracy.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["trial", "p_gt", "p_wn", "p_noise", "teacher_val", "student_val", "error"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.trial.clone(),
                r.policy.p_gt.to_string(),
                r.policy.p_wn.to_string(),
                r.policy.p_noise.to_string(),
                opt(r.teacher_val),
                opt(r.student_val),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Input(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// One full run per policy, sharing the data, bank and image teachers
/// (identical across points) and retraining the multimodal teacher and the
/// student from scratch. Points run in parallel; a failing point is kept as
/// an error and does not stop the others.
pub fn run_sweep_outputs(base: &TrainConfig, points: &[TextMixPolicy]) -> Result<Vec<Result<RunOutput>>> {
    let p = prepare(base)?;
    let ensemble = train_unimodal_teachers(&p, base)?;
    Ok(points
        .par_iter()
        .map(|policy| {
            let mut cfg = base.clone();
            cfg.mix.set_policy(*policy);
            run_from_ensemble(&p, &cfg, &ensemble)
        })
        .collect())
}

pub fn run_sweep(base: &TrainConfig, points: &[TextMixPolicy]) -> Result<SweepResult> {
    let outputs = run_sweep_outputs(base, points)?;
    let mut rows = Vec::with_capacity(points.len());
    let mut records = Vec::with_capacity(points.len());
    for (policy, out) in points.iter().zip(outputs) {
        match out {
            Ok(o) => {
                let m = &o.record.metrics;
                rows.push(SweepRow {
                    trial: policy.trial_name(),
                    policy: *policy,
                    teacher_val: Some(m.teacher_x.final_val_acc),
                    student_val: Some(m.student.final_val_acc),
                    error: None,
                });
                records.push(Some(o.record));
            }
            Err(e) => {
                log::error!("sweep point {} failed: {e}", policy.trial_name());
                rows.push(SweepRow {
                    trial: policy.trial_name(),
                    policy: *policy,
                    teacher_val: None,
                    student_val: None,
                    error: Some(e.to_string()),
                });
                records.push(None);
            }
        }
    }
    Ok(SweepResult { rows, records })
}
