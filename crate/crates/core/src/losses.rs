//! Distillation and teacher objectives, with analytic gradients.
//!
//! Every softmax and log-softmax goes through a max-shifted log-sum-exp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    /// Softmax temperature τ.
    pub tau: f64,
    /// Weight of the distillation term in the student objective.
    pub lambda_kd: f64,
    pub lambda_hier: f64,
    pub lambda_cosreg: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            tau: 4.0,
            lambda_kd: 1.0,
            lambda_hier: 0.1,
            lambda_cosreg: 0.01,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda_kd", self.lambda_kd),
            ("lambda_hier", self.lambda_hier),
            ("lambda_cosreg", self.lambda_cosreg),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Input("logit vectors must be non-empty".into()));
    }
    Ok(())
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|&x| x - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

fn scaled(z: &[f64], tau: f64) -> Vec<f64> {
    z.iter().map(|x| x / tau).collect()
}

/// Element-wise mean of the two teacher logit vectors.
pub fn average_logits(z_tm: &[f64], z_tx: &[f64]) -> Result<Vec<f64>> {
    check_len(z_tm, z_tx)?;
    Ok(z_tm.iter().zip(z_tx).map(|(a, b)| (a + b) / 2.0).collect())
}

/// `−τ² Σ_c softmax(z̄/τ)_c · log softmax(z_s/τ)_c`.
pub fn kd_loss(z_s: &[f64], z_bar: &[f64], tau: f64) -> Result<f64> {
    Ok(kd_loss_grad(z_s, z_bar, tau)?.0)
}

/// KD loss with gradients w.r.t. the student and the averaged teacher logits.
pub fn kd_loss_grad(z_s: &[f64], z_bar: &[f64], tau: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_len(z_s, z_bar)?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let log_q = log_softmax(&scaled(z_s, tau));
    let log_p = log_softmax(&scaled(z_bar, tau));
    let p: Vec<f64> = log_p.iter().map(|x| x.exp()).collect();
    let cross: f64 = p.iter().zip(&log_q).map(|(pc, lq)| pc * lq).sum();
    let loss = -tau * tau * cross;
    let grad_s: Vec<f64> = log_q
        .iter()
        .zip(&p)
        .map(|(lq, pc)| tau * (lq.exp() - pc))
        .collect();
    let grad_bar: Vec<f64> = p
        .iter()
        .zip(&log_q)
        .map(|(pc, lq)| -tau * pc * (lq - cross))
        .collect();
    Ok((loss, grad_s, grad_bar))
}

/// Index of the single 1 in a valid one-hot vector.
pub fn onehot_index(y: &[f64]) -> Result<usize> {
    let mut idx = None;
    for (i, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if idx.is_some() {
                return Err(Error::Input("one-hot target has more than one 1".into()));
            }
            idx = Some(i);
        } else if v != 0.0 {
            return Err(Error::Input(format!("one-hot target has entry {v}")));
        }
    }
    idx.ok_or_else(|| Error::Input("one-hot target has no 1".into()))
}

pub fn onehot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// `−log softmax(z)_target` and its gradient `softmax(z) − e_target`.
pub fn cross_entropy_grad(z: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= z.len() {
        return Err(Error::Input(format!(
            "target {target} out of range for {} logits",
            z.len()
        )));
    }
    let log_p = log_softmax(z);
    let mut grad: Vec<f64> = log_p.iter().map(|x| x.exp()).collect();
    grad[target] -= 1.0;
    Ok((-log_p[target], grad))
}

pub fn cross_entropy(z: &[f64], y_onehot: &[f64]) -> Result<f64> {
    check_len(z, y_onehot)?;
    Ok(cross_entropy_grad(z, onehot_index(y_onehot)?)?.0)
}

/// `CE(z_s, y) + λ_kd · KD(z_s, z̄)`.
pub fn student_total(z_s: &[f64], z_bar: &[f64], y_onehot: &[f64], cfg: &KdConfig) -> Result<f64> {
    Ok(student_total_grad(z_s, z_bar, y_onehot, cfg)?.0)
}

/// Student objective and its gradient w.r.t. the student logits.
pub fn student_total_grad(
    z_s: &[f64],
    z_bar: &[f64],
    y_onehot: &[f64],
    cfg: &KdConfig,
) -> Result<(f64, Vec<f64>)> {
    check_len(z_s, y_onehot)?;
    let (ce, mut grad) = cross_entropy_grad(z_s, onehot_index(y_onehot)?)?;
    if cfg.lambda_kd == 0.0 {
        return Ok((ce, grad));
    }
    let (kd, kd_grad, _) = kd_loss_grad(z_s, z_bar, cfg.tau)?;
    grad.iter_mut()
        .zip(&kd_grad)
        .for_each(|(g, k)| *g += cfg.lambda_kd * k);
    Ok((ce + cfg.lambda_kd * kd, grad))
}

/// `1 − cos(anchor, x)` with gradients w.r.t. both arguments.
pub fn cosine_distance_grad(anchor: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_len(anchor, x)?;
    let na = anchor.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nx == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    let dot: f64 = anchor.iter().zip(x).map(|(a, b)| a * b).sum();
    let cos = dot / (na * nx);
    // ∂cos/∂x = a/(‖a‖‖x‖) − cos·x/‖x‖²; the loss gradient is its negative.
    let grad_x = anchor
        .iter()
        .zip(x)
        .map(|(a, b)| -(a / (na * nx) - cos * b / (nx * nx)))
        .collect();
    let grad_anchor = anchor
        .iter()
        .zip(x)
        .map(|(a, b)| -(b / (na * nx) - cos * a / (na * na)))
        .collect();
    Ok((1.0 - cos, grad_anchor, grad_x))
}

/// `1 − cos(n_gt, n_relaxed)`.
pub fn hierarchical_loss(n_gt: &[f64], n_relaxed: &[f64]) -> Result<f64> {
    Ok(cosine_distance_grad(n_gt, n_relaxed)?.0)
}

/// `1 − cos(n_pretrained, n_relaxed)`.
pub fn cosreg_loss(n_pretrained: &[f64], n_relaxed: &[f64]) -> Result<f64> {
    Ok(cosine_distance_grad(n_pretrained, n_relaxed)?.0)
}

/// Text embeddings entering the teacher regularizers for one sample.
#[derive(Debug, Clone, Copy)]
pub struct RelaxedText<'a> {
    pub n_gt: &'a [f64],
    pub n_relaxed: &'a [f64],
    pub n_pretrained: &'a [f64],
}

/// Breakdown of the teacher objective for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLoss {
    pub total: f64,
    pub ce: f64,
    pub hier: f64,
    pub cosreg: f64,
    pub grad_logits: Vec<f64>,
    /// Gradient of the weighted regularizers w.r.t. `n_relaxed`; empty when
    /// no relaxed embedding is in play.
    pub grad_relaxed: Vec<f64>,
}

/// `CE(z_tx, y) + λ_hier·L_hier + λ_cosreg·L_cosreg`.
///
/// Pass `relaxed = None` for samples whose text is a ground-truth or shuffled
/// class name; the regularizers then contribute nothing.
pub fn teacher_total(
    z_tx: &[f64],
    y_onehot: &[f64],
    relaxed: Option<RelaxedText<'_>>,
    cfg: &KdConfig,
) -> Result<f64> {
    Ok(teacher_total_grad(z_tx, y_onehot, relaxed, cfg)?.total)
}

pub fn teacher_total_grad(
    z_tx: &[f64],
    y_onehot: &[f64],
    relaxed: Option<RelaxedText<'_>>,
    cfg: &KdConfig,
) -> Result<TeacherLoss> {
    check_len(z_tx, y_onehot)?;
    let (ce, grad_logits) = cross_entropy_grad(z_tx, onehot_index(y_onehot)?)?;
    let Some(r) = relaxed else {
        return Ok(TeacherLoss {
            total: ce,
            ce,
            hier: 0.0,
            cosreg: 0.0,
            grad_logits,
            grad_relaxed: Vec::new(),
        });
    };
    let (hier, _, g_hier) = cosine_distance_grad(r.n_gt, r.n_relaxed)?;
    let (cosreg, _, g_cos) = cosine_distance_grad(r.n_pretrained, r.n_relaxed)?;
    let grad_relaxed = g_hier
        .iter()
        .zip(&g_cos)
        .map(|(h, c)| cfg.lambda_hier * h + cfg.lambda_cosreg * c)
        .collect();
    Ok(TeacherLoss {
        total: ce + cfg.lambda_hier * hier + cfg.lambda_cosreg * cosreg,
        ce,
        hier,
        cosreg,
        grad_logits,
        grad_relaxed,
    })
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn average_examples() {
        assert_eq!(average_logits(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(average_logits(&[2.0, 0.0], &[0.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        assert!(average_logits(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kd_of_uniform_is_log_two() {
        let l = kd_loss(&[0.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn kd_rejects_non_positive_tau() {
        assert!(matches!(kd_loss(&[0.0], &[0.0], 0.0), Err(Error::Config(_))));
        assert!(matches!(kd_loss(&[0.0], &[0.0], -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn student_without_kd_is_cross_entropy() {
        let cfg = KdConfig {
            lambda_kd: 0.0,
            ..Default::default()
        };
        let z = [1.0, -2.0, 0.5];
        let y = [0.0, 0.0, 1.0];
        assert_eq!(
            student_total(&z, &[9.0, 9.0, -9.0], &y, &cfg).unwrap(),
            cross_entropy(&z, &y).unwrap()
        );
    }

    #[test]
    fn student_rejects_bad_onehot() {
        let cfg = KdConfig::default();
        assert!(student_total(&[0.0, 0.0], &[0.0, 0.0], &[0.5, 0.5], &cfg).is_err());
        assert!(student_total(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], &cfg).is_err());
        assert!(student_total(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn aligned_student_decomposes_into_ce_plus_entropy() {
        let cfg = KdConfig::default();
        let z = [12.0, 0.0, 0.0];
        let y = [1.0, 0.0, 0.0];
        let expected = cross_entropy(&z, &y).unwrap()
            + cfg.lambda_kd * cfg.tau * cfg.tau * entropy(&softmax(&scaled(&z, cfg.tau)));
        assert_abs_diff_eq!(student_total(&z, &z, &y, &cfg).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn cosine_distance_examples() {
        let a = [1.0, 0.0];
        assert_abs_diff_eq!(hierarchical_loss(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(hierarchical_loss(&a, &[0.0, 1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(hierarchical_loss(&a, &[-1.0, 0.0]).unwrap(), 2.0);
        assert_abs_diff_eq!(cosreg_loss(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(cosreg_loss(&a, &[0.0, 3.0]).unwrap(), 1.0);
        assert!(matches!(hierarchical_loss(&a, &[0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn teacher_total_reduces_to_ce() {
        let z = [0.3, -0.1, 2.0];
        let y = [0.0, 1.0, 0.0];
        let ce = cross_entropy(&z, &y).unwrap();
        let zero = KdConfig {
            lambda_hier: 0.0,
            lambda_cosreg: 0.0,
            ..Default::default()
        };
        let n = [0.6, 0.8];
        let drifted = [0.0, 1.0];
        let r = RelaxedText {
            n_gt: &n,
            n_relaxed: &drifted,
            n_pretrained: &n,
        };
        assert_eq!(teacher_total(&z, &y, Some(r), &zero).unwrap(), ce);
        let fresh = RelaxedText {
            n_gt: &n,
            n_relaxed: &n,
            n_pretrained: &n,
        };
        assert_abs_diff_eq!(
            teacher_total(&z, &y, Some(fresh), &KdConfig::default()).unwrap(),
            ce,
            epsilon = 1e-15
        );
        assert_eq!(teacher_total(&z, &y, None, &KdConfig::default()).unwrap(), ce);
    }

    #[test]
    fn default_weights() {
        let cfg = KdConfig::default();
        assert_eq!(cfg.lambda_hier, 0.1);
        assert_eq!(cfg.lambda_cosreg, 0.01);
        assert_eq!(cfg.tau, 4.0);
        assert_eq!(cfg.lambda_kd, 1.0);
        assert!(KdConfig { tau: 0.0, ..cfg }.validate().is_err());
        assert!(KdConfig { lambda_hier: -0.1, ..cfg }.validate().is_err());
    }

    fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-8.0f64..8.0, n)
    }

    proptest! {
        #[test]
        fn kd_self_equals_scaled_entropy(z in logits(6), tau in 0.5f64..10.0) {
            let l = kd_loss(&z, &z, tau).unwrap();
            let h = tau * tau * entropy(&softmax(&scaled(&z, tau)));
            prop_assert!((l - h).abs() <= 1e-9 * (1.0 + h));
        }

        #[test]
        fn losses_are_bounded_below(zs in logits(5), zb in logits(5), tau in 0.5f64..10.0, k in 0usize..5) {
            prop_assert!(kd_loss(&zs, &zb, tau).unwrap() >= 0.0);
            let y = onehot(k, 5);
            prop_assert!(teacher_total(&zs, &y, None, &KdConfig::default()).unwrap() >= 0.0);
            let h = hierarchical_loss(&zs, &zb);
            if let Ok(h) = h {
                prop_assert!((-1e-12..=2.0 + 1e-12).contains(&h));
            }
        }

        #[test]
        fn softmax_losses_are_shift_invariant(zs in logits(5), zb in logits(5), shift in -50.0f64..50.0, k in 0usize..5) {
            let ys = onehot(k, 5);
            let cfg = KdConfig::default();
            let zs2: Vec<f64> = zs.iter().map(|x| x + shift).collect();
            let zb2: Vec<f64> = zb.iter().map(|x| x - 0.5 * shift).collect();
            prop_assert!((kd_loss(&zs, &zb, 4.0).unwrap() - kd_loss(&zs2, &zb2, 4.0).unwrap()).abs() <= 1e-8);
            prop_assert!((student_total(&zs, &zb, &ys, &cfg).unwrap()
                - student_total(&zs2, &zb2, &ys, &cfg).unwrap()).abs() <= 1e-8);
        }

        #[test]
        fn kd_gradient_vanishes_at_the_teacher(zb in logits(7), tau in 0.5f64..10.0, shift in -3.0f64..3.0) {
            let zs: Vec<f64> = zb.iter().map(|x| x + shift).collect();
            let (_, g, _) = kd_loss_grad(&zs, &zb, tau).unwrap();
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm <= 1e-9);
        }
    }
}
