//! Multi-seed reproductions of the leakage, relaxation-proportion, bank and
//! attribution experiments on the shipped synthetic config.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_trial, TargetMode};
use crate::error::{Error, Result};
use crate::models::{InputMode, TextMixPolicy};
use crate::training::{
    prepare, run_from_ensemble, sweep_policies, train_unimodal_teachers, validation_eval_set,
    BankMode, SweepAxis, TrainConfig,
};

pub const LEAKAGE_TOML: &str = include_str!("../configs/leakage.toml");
pub const DEFAULT_SEEDS: usize = 5;
pub const PROPORTIONS: [f64; 5] = [0.0, 20.0, 50.0, 80.0, 100.0];

pub fn leakage_config() -> TrainConfig {
    TrainConfig::from_toml_str(LEAKAGE_TOML).expect("shipped leakage config is valid")
}

/// Leakage config with the multimodal teacher reading text only.
pub fn text_only_variant(base: &TrainConfig) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.name = format!("{}-text-only", base.name);
    cfg.teacher_x.input_mode = InputMode::TextOnly;
    cfg
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation.
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        if values.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on average ranks). NaN when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Outcome of one policy on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointOutcome {
    pub teacher_val: f64,
    pub student_val: f64,
    /// Mean validation image share of the multimodal teacher.
    pub image_share: Option<f64>,
}

/// A policy with per-seed outcomes and their summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub trial: String,
    pub policy: TextMixPolicy,
    pub bank: BankMode,
    pub per_seed: Vec<PointOutcome>,
    pub teacher: Stat,
    pub student: Stat,
    pub image_share: Option<Stat>,
}

impl PointSummary {
    fn new(policy: TextMixPolicy, bank: BankMode, per_seed: Vec<PointOutcome>) -> Self {
        let teacher: Vec<f64> = per_seed.iter().map(|o| o.teacher_val).collect();
        let student: Vec<f64> = per_seed.iter().map(|o| o.student_val).collect();
        let shares: Option<Vec<f64>> = per_seed.iter().map(|o| o.image_share).collect();
        Self {
            trial: policy.trial_name(),
            policy,
            bank,
            teacher: Stat::of(&teacher),
            student: Stat::of(&student),
            image_share: shares.map(|s| Stat::of(&s)),
            per_seed,
        }
    }
}

/// One point of a grid: a mix policy under a bank mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub policy: TextMixPolicy,
    pub bank: BankMode,
}

/// Runs every point on `seeds` seed offsets of `base`. Data, bank and the
/// image teachers are shared across the points of a seed. With
/// `ig_steps`, each multimodal teacher is also attributed on the
/// validation set under its own policy.
pub fn run_grid(
    base: &TrainConfig,
    points: &[GridPoint],
    seeds: usize,
    ig_steps: Option<usize>,
) -> Result<Vec<PointSummary>> {
    if seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let per_seed: Vec<Vec<PointOutcome>> = (0..seeds as u64)
        .into_par_iter()
        .map(|offset| {
            let cfg = base.with_seed_offset(offset);
            let p = prepare(&cfg)?;
            let ensemble = train_unimodal_teachers(&p, &cfg)?;
            points
                .par_iter()
                .map(|pt| {
                    let mut run_cfg = cfg.clone();
                    run_cfg.mix.set_policy(pt.policy);
                    run_cfg.bank = pt.bank;
                    let out = run_from_ensemble(&p, &run_cfg, &ensemble)?;
                    let image_share = match ig_steps {
                        Some(n) => {
                            let eval = validation_eval_set(&p, &out.teacher_x, &pt.policy, &out.bank)?;
                            let report =
                                attribute_trial(&eval.trial(&out.teacher_x), n, TargetMode::Predicted)?;
                            Some(report.image_share)
                        }
                        None => None,
                    };
                    let m = &out.record.metrics;
                    Ok(PointOutcome {
                        teacher_val: m.teacher_x.final_val_acc,
                        student_val: m.student.final_val_acc,
                        image_share,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, pt)| {
            PointSummary::new(pt.policy, pt.bank, per_seed.iter().map(|s| s[i].clone()).collect())
        })
        .collect())
}

/// One directional check and what it compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl TrendCheck {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// Summaries plus the checks applied to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub name: String,
    pub config: TrainConfig,
    pub seeds: usize,
    pub rows: Vec<PointSummary>,
    pub checks: Vec<TrendCheck>,
}

impl Experiment {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&TrendCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// One row per point: trial, proportions, bank, means and stds.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "trial",
            "p_gt",
            "p_wn",
            "p_noise",
            "bank",
            "teacher_mean",
            "teacher_std",
            "student_mean",
            "student_std",
            "image_share_mean",
            "image_share_std",
        ])?;
        for r in &self.rows {
            let (sm, ss) = r
                .image_share
                .map(|s| (s.mean.to_string(), s.std.to_string()))
                .unwrap_or_default();
            w.write_record([
                r.trial.clone(),
                r.policy.p_gt.to_string(),
                r.policy.p_wn.to_string(),
                r.policy.p_noise.to_string(),
                match r.bank {
                    BankMode::Learnable => "learnable".into(),
                    BankMode::Frozen => "frozen".into(),
                },
                r.teacher.mean.to_string(),
                r.teacher.std.to_string(),
                r.student.mean.to_string(),
                r.student.std.to_string(),
                sm,
                ss,
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Input(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn learnable(policies: Vec<TextMixPolicy>) -> Vec<GridPoint> {
    policies
        .into_iter()
        .map(|policy| GridPoint {
            policy,
            bank: BankMode::Learnable,
        })
        .collect()
}

fn find<'a>(rows: &'a [PointSummary], policy: &TextMixPolicy, bank: BankMode) -> &'a PointSummary {
    rows.iter()
        .find(|r| r.policy == *policy && r.bank == bank)
        .expect("requested point is part of the grid")
}

fn pure(p_gt: f64, p_wn: f64, p_noise: f64) -> TextMixPolicy {
    TextMixPolicy::new(p_gt, p_wn, p_noise).expect("valid literal policy")
}

/// Nine rows: wn replacing gt at 20..100%, pure gt, noise replacing gt at
/// 20..100%. Checks that teacher accuracy does not rise with the wn share,
/// that the pure-gt teacher is near perfect, and the student ordering
/// wn ≥ noise ≥ gt at full replacement.
pub fn table2(base: &TrainConfig, seeds: usize) -> Result<Experiment> {
    let mut policies = sweep_policies(SweepAxis::Wn, &[100.0, 80.0, 50.0, 20.0, 0.0])?;
    policies.extend(sweep_policies(SweepAxis::Noise, &[20.0, 50.0, 80.0, 100.0])?);
    let rows = run_grid(base, &learnable(policies), seeds, None)?;

    let mut checks = Vec::new();
    let wn_axis = sweep_policies(SweepAxis::Wn, &PROPORTIONS)?;
    let teacher: Vec<f64> = wn_axis
        .iter()
        .map(|p| find(&rows, p, BankMode::Learnable).teacher.mean)
        .collect();
    checks.push(TrendCheck::new(
        "teacher non-increasing in p_wn",
        teacher.windows(2).all(|w| w[1] <= w[0]),
        format!("teacher means at p_wn {PROPORTIONS:?}: {teacher:.4?}"),
    ));
    checks.push(TrendCheck::new(
        "teacher(100%gt) >= 0.99",
        teacher[0] >= 0.99,
        format!("teacher(100%gt) = {:.4}", teacher[0]),
    ));
    let student = |p: TextMixPolicy| find(&rows, &p, BankMode::Learnable).student.mean;
    let (s_wn, s_noise, s_gt) = (
        student(pure(0.0, 1.0, 0.0)),
        student(pure(0.0, 0.0, 1.0)),
        student(pure(1.0, 0.0, 0.0)),
    );
    checks.push(TrendCheck::new(
        "student(100%wn) >= student(100%noise) >= student(100%gt)",
        s_wn >= s_noise && s_noise >= s_gt,
        format!("wn {s_wn:.4}, noise {s_noise:.4}, gt {s_gt:.4}"),
    ));
    Ok(Experiment {
        name: "table2".into(),
        config: base.clone(),
        seeds,
        rows,
        checks,
    })
}

/// wn proportion sweep with the text-only teacher: teacher accuracy should
/// fall and student accuracy rise (Spearman ρ ≤ −0.7 and ≥ 0.7).
pub fn fig2(base: &TrainConfig, seeds: usize) -> Result<Experiment> {
    let cfg = text_only_variant(base);
    let policies = sweep_policies(SweepAxis::Wn, &PROPORTIONS)?;
    let rows = run_grid(&cfg, &learnable(policies), seeds, None)?;
    let props = PROPORTIONS.to_vec();
    let teacher: Vec<f64> = rows.iter().map(|r| r.teacher.mean).collect();
    let student: Vec<f64> = rows.iter().map(|r| r.student.mean).collect();
    let (rt, rs) = (spearman(&props, &teacher), spearman(&props, &student));
    let checks = vec![
        TrendCheck::new(
            "teacher decreases with p_wn (rho <= -0.7)",
            rt <= -0.7,
            format!("rho = {rt:.3}, teacher means {teacher:.4?}"),
        ),
        TrendCheck::new(
            "student increases with p_wn (rho >= 0.7)",
            rs >= 0.7,
            format!("rho = {rs:.3}, student means {student:.4?}"),
        ),
    ];
    Ok(Experiment {
        name: "fig2".into(),
        config: cfg,
        seeds,
        rows,
        checks,
    })
}

/// Learnable against frozen bank at full wn replacement.
pub fn table3(base: &TrainConfig, seeds: usize) -> Result<Experiment> {
    let policy = pure(0.0, 1.0, 0.0);
    let points = [BankMode::Learnable, BankMode::Frozen].map(|bank| GridPoint { policy, bank });
    let rows = run_grid(base, &points, seeds, None)?;
    let (l, f) = (&rows[0], &rows[1]);
    let checks = vec![
        TrendCheck::new(
            "teacher learnable >= frozen",
            l.teacher.mean >= f.teacher.mean,
            format!("learnable {:.4}, frozen {:.4}", l.teacher.mean, f.teacher.mean),
        ),
        TrendCheck::new(
            "student learnable >= frozen",
            l.student.mean >= f.student.mean,
            format!("learnable {:.4}, frozen {:.4}", l.student.mean, f.student.mean),
        ),
    ];
    Ok(Experiment {
        name: "table3".into(),
        config: base.clone(),
        seeds,
        rows,
        checks,
    })
}

/// Modality shares along the noise and wn axes. Image share should rise
/// strictly with the noise proportion, and at every β > 0 the wn trial
/// should keep at least the noise trial's text share.
pub fn fig3(base: &TrainConfig, seeds: usize, ig_steps: usize) -> Result<Experiment> {
    let noise = sweep_policies(SweepAxis::Noise, &PROPORTIONS)?;
    let wn = sweep_policies(SweepAxis::Wn, &PROPORTIONS[1..])?;
    let policies: Vec<TextMixPolicy> = noise.iter().chain(&wn).copied().collect();
    let rows = run_grid(base, &learnable(policies), seeds, Some(ig_steps))?;
    let share = |p: &TextMixPolicy| {
        find(&rows, p, BankMode::Learnable)
            .image_share
            .expect("attribution requested")
            .mean
    };
    let noise_img: Vec<f64> = noise.iter().map(share).collect();
    let mut checks = vec![TrendCheck::new(
        "image share increases with noise proportion",
        noise_img.windows(2).all(|w| w[1] > w[0]),
        format!("image share at p_noise {PROPORTIONS:?}: {noise_img:.4?}"),
    )];
    let mut ok = true;
    let mut detail = Vec::new();
    for (w, n) in wn.iter().zip(&noise[1..]) {
        let (tw, tn) = (1.0 - share(w), 1.0 - share(n));
        ok &= tw >= tn;
        detail.push(format!("β={:.0}%: wn {tw:.4} vs noise {tn:.4}", w.p_wn * 100.0));
    }
    checks.push(TrendCheck::new(
        "wn text share >= noise text share at matched proportion",
        ok,
        detail.join(", "),
    ));
    Ok(Experiment {
        name: "fig3".into(),
        config: base.clone(),
        seeds,
        rows,
        checks,
    })
}
