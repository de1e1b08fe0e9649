//! Acceptance gate: runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use astro_float::{BigFloat, Consts, Radix, RoundingMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use xmodal::attribution::{integrated_gradients, LinearModel, DEFAULT_IG_STEPS};
use xmodal::embeddings::{normalize, EmbeddingVector};
use xmodal::experiments::{self, leakage_config, text_only_variant, DEFAULT_SEEDS};
use xmodal::losses::{
    average_logits, cosine_distance_grad, cosreg_loss, cross_entropy_grad, hierarchical_loss,
    kd_loss, kd_loss_grad, onehot, student_total, student_total_grad, teacher_total,
    teacher_total_grad, KdConfig, RelaxedText,
};
use xmodal::models::{Checkpoint, Features, ImageFeatures, InputMode, MultimodalTeacher};
use xmodal::relaxation::{assign_and_filter, kmeans, select_relaxed_for_sample, SelectionMode};
use xmodal::training::{
    prepare, run_pipeline, train_student_baseline, validation_eval_set, RunOutput,
};
use xmodal::Error;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

// ---------------------------------------------------------------------------
// 1. Loss oracles in 256-bit arithmetic

const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

struct Oracle {
    cc: Consts,
}

impl Oracle {
    fn new() -> Self {
        Self {
            cc: Consts::new().expect("astro-float constants"),
        }
    }

    fn num(x: f64) -> BigFloat {
        BigFloat::from_f64(x, PREC)
    }

    fn as_f64(&mut self, x: &BigFloat) -> f64 {
        x.format(Radix::Dec, RM, &mut self.cc)
            .expect("format")
            .parse()
            .expect("decimal parses as f64")
    }

    fn sum(xs: impl IntoIterator<Item = BigFloat>) -> BigFloat {
        xs.into_iter().fold(Self::num(0.0), |a, b| a.add(&b, PREC, RM))
    }

    fn log_softmax(&mut self, z: &[f64], tau: f64) -> Vec<BigFloat> {
        let t = Self::num(tau);
        let scaled: Vec<BigFloat> = z.iter().map(|v| Self::num(*v).div(&t, PREC, RM)).collect();
        let exps: Vec<BigFloat> = scaled.iter().map(|v| v.exp(PREC, RM, &mut self.cc)).collect();
        let lse = Self::sum(exps).ln(PREC, RM, &mut self.cc);
        scaled.iter().map(|v| v.sub(&lse, PREC, RM)).collect()
    }

    fn kd(&mut self, z_s: &[f64], z_bar: &[f64], tau: f64) -> BigFloat {
        let log_q = self.log_softmax(z_s, tau);
        let log_p = self.log_softmax(z_bar, tau);
        let cross = Self::sum(log_p.iter().zip(&log_q).map(|(lp, lq)| {
            lp.exp(PREC, RM, &mut self.cc).mul(lq, PREC, RM)
        }));
        let t = Self::num(tau);
        t.mul(&t, PREC, RM).mul(&cross, PREC, RM).neg()
    }

    fn ce(&mut self, z: &[f64], y: usize) -> BigFloat {
        self.log_softmax(z, 1.0)[y].neg()
    }

    fn cos_dist(&mut self, a: &[f64], b: &[f64]) -> BigFloat {
        let dot = |u: &[f64], v: &[f64]| {
            Self::sum(u.iter().zip(v).map(|(x, y)| Self::num(*x).mul(&Self::num(*y), PREC, RM)))
        };
        let norms = dot(a, a).mul(&dot(b, b), PREC, RM).sqrt(PREC, RM);
        Self::num(1.0).sub(&dot(a, b).div(&norms, PREC, RM), PREC, RM)
    }
}

fn criterion_1() -> Check {
    let mut o = Oracle::new();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut worst_extreme = 0.0f64;
    let mut cases = 0;
    let taus: Vec<(f64, f64)> = (0..200)
        .map(|i| match i % 5 {
            3 => (0.5, 1e-6),
            4 => (10.0, 1e-6),
            _ => (0.0, 1e-10),
        })
        .collect();
    for (fixed_tau, tol) in taus {
        let c = rng.random_range(2..=16);
        let d = rng.random_range(2..=24);
        let tau = if fixed_tau > 0.0 { fixed_tau } else { rng.random_range(1.0..8.0) };
        let cfg = KdConfig {
            tau,
            lambda_kd: rng.random_range(0.1..2.0),
            lambda_hier: rng.random_range(0.0..1.0),
            lambda_cosreg: rng.random_range(0.0..1.0),
        };
        let z_s = gaussian(&mut rng, c, 3.0);
        let z_tm = gaussian(&mut rng, c, 3.0);
        let z_tx = gaussian(&mut rng, c, 3.0);
        let y = rng.random_range(0..c);
        let y1 = onehot(y, c);
        let (n_gt, n_rel, n_pre) = (
            gaussian(&mut rng, d, 1.0),
            gaussian(&mut rng, d, 1.0),
            gaussian(&mut rng, d, 1.0),
        );
        let mut check = |name: &str, got: f64, want: BigFloat, o: &mut Oracle| -> Result<(), String> {
            let want = o.as_f64(&want);
            let err = (got - want).abs();
            if tol < 1e-8 {
                worst = worst.max(err);
            } else {
                worst_extreme = worst_extreme.max(err);
            }
            cases += 1;
            ensure(err <= tol, || {
                format!("{name}: got {got}, oracle {want}, |err| {err:.3e} > {tol:.0e} (tau {tau})")
            })
        };

        let z_bar = average_logits(&z_tm, &z_tx).map_err(|e| e.to_string())?;
        for (i, v) in z_bar.iter().enumerate() {
            let want = Oracle::num(z_tm[i])
                .add(&Oracle::num(z_tx[i]), PREC, RM)
                .div(&Oracle::num(2.0), PREC, RM);
            check("average_logits", *v, want, &mut o)?;
        }
        let kd_want = o.kd(&z_s, &z_bar, tau);
        check("kd_loss", kd_loss(&z_s, &z_bar, tau).map_err(|e| e.to_string())?, kd_want.clone(), &mut o)?;
        let ce = o.ce(&z_s, y);
        let student_want = ce.add(&Oracle::num(cfg.lambda_kd).mul(&kd_want, PREC, RM), PREC, RM);
        check(
            "student_total",
            student_total(&z_s, &z_bar, &y1, &cfg).map_err(|e| e.to_string())?,
            student_want,
            &mut o,
        )?;
        let hier = o.cos_dist(&n_gt, &n_rel);
        check("hierarchical_loss", hierarchical_loss(&n_gt, &n_rel).map_err(|e| e.to_string())?, hier.clone(), &mut o)?;
        let cosreg = o.cos_dist(&n_pre, &n_rel);
        check("cosreg_loss", cosreg_loss(&n_pre, &n_rel).map_err(|e| e.to_string())?, cosreg.clone(), &mut o)?;
        let teacher_want = o
            .ce(&z_tx, y)
            .add(&Oracle::num(cfg.lambda_hier).mul(&hier, PREC, RM), PREC, RM)
            .add(&Oracle::num(cfg.lambda_cosreg).mul(&cosreg, PREC, RM), PREC, RM);
        let relaxed = RelaxedText {
            n_gt: &n_gt,
            n_relaxed: &n_rel,
            n_pretrained: &n_pre,
        };
        check(
            "teacher_total",
            teacher_total(&z_tx, &y1, Some(relaxed), &cfg).map_err(|e| e.to_string())?,
            teacher_want,
            &mut o,
        )?;
    }
    Ok(format!(
        "{cases} comparisons on 200 instances; max |err| {worst:.2e} (tol 1e-10), {worst_extreme:.2e} at tau in {{0.5, 10}} (tol 1e-6)"
    ))
}

// ---------------------------------------------------------------------------
// 2. Gradient checks

const FD_STEP: f64 = 1e-5;

fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += FD_STEP;
            down[i] -= FD_STEP;
            (f(&up) - f(&down)) / (2.0 * FD_STEP)
        })
        .collect()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-8, f64::max);
    diff / scale
}

fn text<'a>(n_gt: &'a [f64], n_relaxed: &'a [f64], n_pretrained: &'a [f64]) -> RelaxedText<'a> {
    RelaxedText {
        n_gt,
        n_relaxed,
        n_pretrained,
    }
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| -> Result<(), String> {
        match worst.iter_mut().find(|(n, _)| *n == name) {
            Some((_, w)) => *w = w.max(err),
            None => worst.push((name, err)),
        }
        ensure(err <= 1e-4, || format!("{name}: relative error {err:.3e} > 1e-4"))
    };
    for _ in 0..100 {
        let c = rng.random_range(2..=12);
        let d = rng.random_range(2..=16);
        let tau = rng.random_range(0.5..10.0);
        let cfg = KdConfig {
            tau,
            lambda_kd: rng.random_range(0.1..2.0),
            lambda_hier: rng.random_range(0.01..1.0),
            lambda_cosreg: rng.random_range(0.01..1.0),
        };
        let z_s = gaussian(&mut rng, c, 2.0);
        let z_bar = gaussian(&mut rng, c, 2.0);
        let y = rng.random_range(0..c);
        let y1 = onehot(y, c);
        let (a, b, p) = (
            gaussian(&mut rng, d, 1.0),
            gaussian(&mut rng, d, 1.0),
            gaussian(&mut rng, d, 1.0),
        );

        let (_, g_s, g_bar) = kd_loss_grad(&z_s, &z_bar, tau).map_err(|e| e.to_string())?;
        record("kd wrt student", rel_err(&g_s, &numeric_grad(&|z| kd_loss(z, &z_bar, tau).unwrap(), &z_s)))?;
        record("kd wrt teacher", rel_err(&g_bar, &numeric_grad(&|z| kd_loss(&z_s, z, tau).unwrap(), &z_bar)))?;

        let (_, g_ce) = cross_entropy_grad(&z_s, y).map_err(|e| e.to_string())?;
        record(
            "cross entropy",
            rel_err(&g_ce, &numeric_grad(&|z| cross_entropy_grad(z, y).unwrap().0, &z_s)),
        )?;

        let (_, g_tot) = student_total_grad(&z_s, &z_bar, &y1, &cfg).map_err(|e| e.to_string())?;
        record(
            "student total",
            rel_err(&g_tot, &numeric_grad(&|z| student_total(z, &z_bar, &y1, &cfg).unwrap(), &z_s)),
        )?;

        let (_, g_anchor, g_x) = cosine_distance_grad(&a, &b).map_err(|e| e.to_string())?;
        record(
            "cosine distance wrt relaxed",
            rel_err(&g_x, &numeric_grad(&|x| hierarchical_loss(&a, x).unwrap(), &b)),
        )?;
        record(
            "cosine distance wrt anchor",
            rel_err(&g_anchor, &numeric_grad(&|x| cosreg_loss(x, &b).unwrap(), &a)),
        )?;


        let t = teacher_total_grad(&z_s, &y1, Some(text(&a, &b, &p)), &cfg).map_err(|e| e.to_string())?;
        record(
            "teacher total wrt logits",
            rel_err(
                &t.grad_logits,
                &numeric_grad(&|z| teacher_total(z, &y1, Some(text(&a, &b, &p)), &cfg).unwrap(), &z_s),
            ),
        )?;
        record(
            "teacher total wrt relaxed text",
            rel_err(
                &t.grad_relaxed,
                &numeric_grad(&|n| teacher_total(&z_s, &y1, Some(text(&a, n, &p)), &cfg).unwrap(), &b),
            ),
        )?;
    }
    let summary: Vec<String> = worst.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect();
    Ok(format!("100 instances; max relative error: {}", summary.join(", ")))
}

// ---------------------------------------------------------------------------
// 3. Noun filtering and selection against exhaustive enumeration

type Partition = BTreeSet<BTreeSet<usize>>;

fn partition_of(labels: &[usize]) -> Partition {
    let mut groups: std::collections::BTreeMap<usize, BTreeSet<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().insert(i);
    }
    groups.into_values().collect()
}

fn centroid(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let d = points[0].len();
    let mut c = vec![0.0; d];
    for &i in members {
        for (a, v) in c.iter_mut().zip(&points[i]) {
            *a += v;
        }
    }
    c.iter().map(|v| v / members.len() as f64).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimum-inertia labeling over every assignment of points to `m`
/// non-empty groups.
fn brute_force_partition(points: &[Vec<f64>], m: usize) -> (Partition, f64) {
    let n = points.len();
    let mut best: Option<(Partition, f64)> = None;
    let mut labels = vec![0usize; n];
    for code in 0..m.pow(n as u32) {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % m;
            c /= m;
        }
        let groups: Vec<Vec<usize>> = (0..m)
            .map(|k| (0..n).filter(|&i| labels[i] == k).collect())
            .collect();
        if groups.iter().any(Vec::is_empty) {
            continue;
        }
        let inertia: f64 = groups
            .iter()
            .map(|g| {
                let c = centroid(points, g);
                g.iter().map(|&i| sq_dist(&points[i], &c)).sum::<f64>()
            })
            .sum();
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((partition_of(&labels), inertia));
        }
    }
    best.expect("at least one labeling")
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let blob_dirs = [
        unit(&[1.0, 0.2, 0.0, 0.0]),
        unit(&[0.0, 1.0, 0.3, 0.0]),
        unit(&[0.0, 0.0, 0.4, 1.0]),
    ];
    // 8 images in blobs of 3, 3 and 2.
    let images: Vec<Vec<f64>> = [0, 0, 0, 1, 1, 1, 2, 2]
        .iter()
        .map(|&b| {
            let g = gaussian(&mut rng, 4, 0.15);
            unit(&blob_dirs[b].iter().zip(&g).map(|(a, e)| a + e).collect::<Vec<_>>())
        })
        .collect();
    // 12 nouns: 4 near each blob direction, at varying distance.
    let nouns: Vec<(String, EmbeddingVector)> = (0..12)
        .map(|i| {
            let g = gaussian(&mut rng, 4, 0.2 + 0.1 * (i / 3) as f64);
            let v: Vec<f64> = blob_dirs[i % 3].iter().zip(&g).map(|(a, e)| a + e).collect();
            (format!("noun{i:02}"), normalize(&v).expect("non-zero"))
        })
        .collect();
    let (m, top_k) = (3, 2);

    let model = kmeans(&images, m, 17, 100, 1e-12).map_err(|e| e.to_string())?;
    let (bank, _report) = assign_and_filter(&model, &nouns, top_k).map_err(|e| e.to_string())?;
    let selected: Vec<usize> = images
        .iter()
        .map(|img| {
            let v = normalize(img).expect("unit image");
            select_relaxed_for_sample(&bank, &v, &model, SelectionMode::NearestInCluster, 0)
        })
        .collect::<xmodal::Result<_>>()
        .map_err(|e| e.to_string())?;

    // Clustering: exhaustive minimum-inertia partition.
    let (best, best_inertia) = brute_force_partition(&images, m);
    let got = partition_of(&model.assignment);
    ensure(got == best, || format!("k-means partition {got:?} differs from optimum {best:?}"))?;
    for k in 0..m {
        let members: Vec<usize> = (0..images.len()).filter(|&i| model.assignment[i] == k).collect();
        let c = centroid(&images, &members);
        ensure(sq_dist(&c, &model.centers[k]) < 1e-24, || format!("center {k} is not its members' mean"))?;
    }

    // Filtering: argmax cluster per noun, then the best top_k-subset per
    // cluster by total similarity.
    let vecs: Vec<Vec<f64>> = nouns.iter().map(|(_, v)| v.to_f64()).collect();
    let home: Vec<usize> = vecs
        .iter()
        .map(|v| {
            (0..m)
                .max_by(|&a, &b| dot(v, &model.centers[a]).total_cmp(&dot(v, &model.centers[b])).then(b.cmp(&a)))
                .expect("m > 0")
        })
        .collect();
    let mut expected: BTreeSet<(String, usize)> = BTreeSet::new();
    for k in 0..m {
        let members: Vec<usize> = (0..nouns.len()).filter(|&i| home[i] == k).collect();
        let keep = top_k.min(members.len());
        let mut best_subset: Option<(Vec<usize>, f64)> = None;
        for mask in 0u32..(1 << members.len()) {
            if mask.count_ones() as usize != keep {
                continue;
            }
            let subset: Vec<usize> = (0..members.len())
                .filter(|b| mask & (1 << b) != 0)
                .map(|b| members[b])
                .collect();
            let score: f64 = subset.iter().map(|&i| dot(&vecs[i], &model.centers[k])).sum();
            if best_subset.as_ref().is_none_or(|(_, s)| score > *s) {
                best_subset = Some((subset, score));
            }
        }
        for i in best_subset.map(|(s, _)| s).unwrap_or_default() {
            expected.insert((nouns[i].0.clone(), k));
        }
    }
    let got_bank: BTreeSet<(String, usize)> =
        bank.entries().iter().map(|e| (e.noun.clone(), e.cluster)).collect();
    ensure(got_bank == expected, || format!("bank {got_bank:?} differs from enumeration {expected:?}"))?;
    for e in bank.entries() {
        let src = &nouns.iter().find(|(n, _)| *n == e.noun).expect("bank noun is a candidate").1;
        let want = normalize(&src.to_f64()).expect("unit");
        ensure(e.pretrained() == &want && e.current() == &want, || {
            format!("bank vector of {} is not the normalized noun embedding", e.noun)
        })?;
        ensure((e.current().norm() - 1.0).abs() < 1e-6, || format!("{} is not unit norm", e.noun))?;
    }

    // Selection: nearest entry (by dot) among the image's cluster members.
    for (i, img) in images.iter().enumerate() {
        let k = (0..m)
            .min_by(|&a, &b| sq_dist(img, &model.centers[a]).total_cmp(&sq_dist(img, &model.centers[b])))
            .expect("m > 0");
        let v = normalize(img).expect("unit").to_f64();
        let want = (0..bank.len())
            .filter(|&j| bank.entries()[j].cluster == k)
            .max_by(|&a, &b| {
                bank.entries()[a].current().dot(&v).total_cmp(&bank.entries()[b].current().dot(&v)).then(b.cmp(&a))
            });
        let want = want.unwrap_or_else(|| {
            (0..bank.len())
                .max_by(|&a, &b| {
                    bank.entries()[a].current().dot(&v).total_cmp(&bank.entries()[b].current().dot(&v)).then(b.cmp(&a))
                })
                .expect("bank non-empty")
        });
        ensure(selected[i] == want, || format!("image {i}: selected {} expected {want}", selected[i]))?;
    }
    Ok(format!(
        "partition optimal (inertia {best_inertia:.4}), {} bank entries and 8 selections match enumeration",
        bank.len()
    ))
}

// ---------------------------------------------------------------------------
// 4. K-means

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let points: Vec<Vec<f64>> = (0..50).map(|_| gaussian(&mut rng, 5, 2.0)).collect();
    let one = kmeans(&points, 1, 9, 100, 1e-12).map_err(|e| e.to_string())?;
    let mean = centroid(&points, &(0..points.len()).collect::<Vec<_>>());
    let err = one.centers[0]
        .iter()
        .zip(&mean)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(err <= 1e-9, || format!("M=1 center differs from the mean by {err:.3e}"))?;

    let blobs = vec![
        vec![0.0, 0.0],
        vec![0.3, 0.1],
        vec![0.1, 0.4],
        vec![5.0, 5.0],
        vec![5.2, 4.7],
        vec![4.8, 5.3],
    ];
    let (best, _) = brute_force_partition(&blobs, 2);
    for seed in 0..10 {
        let model = kmeans(&blobs, 2, seed, 100, 1e-12).map_err(|e| e.to_string())?;
        let got = partition_of(&model.assignment);
        ensure(got == best, || format!("seed {seed}: partition {got:?} differs from optimum {best:?}"))?;
    }
    Ok(format!("M=1 center error {err:.1e}; two-blob partition {best:?} recovered for 10 seeds"))
}

// ---------------------------------------------------------------------------
// 5–8. Trends on the shipped leakage config

fn experiment_check(exp: &experiments::Experiment) -> Check {
    let mut lines = Vec::new();
    for r in &exp.rows {
        let share = r
            .image_share
            .map(|s| format!(", image share {:.4} ± {:.4}", s.mean, s.std))
            .unwrap_or_default();
        lines.push(format!(
            "    {:<24} teacher {:.4} ± {:.4}, student {:.4} ± {:.4}{share}",
            r.trial, r.teacher.mean, r.teacher.std, r.student.mean, r.student.std
        ));
    }
    for c in &exp.checks {
        lines.push(format!("    [{}] {}: {}", if c.passed { "ok" } else { "violated" }, c.name, c.detail));
    }
    let body = lines.join("\n");
    if exp.passed() {
        Ok(format!("{} directional checks hold\n{body}", exp.checks.len()))
    } else {
        Err(format!("{} of {} checks violated\n{body}", exp.failures().len(), exp.checks.len()))
    }
}

fn criterion_5() -> Check {
    let exp = experiments::table2(&leakage_config(), DEFAULT_SEEDS).map_err(|e| e.to_string())?;
    experiment_check(&exp)
}

fn criterion_6() -> Check {
    let exp = experiments::fig2(&leakage_config(), DEFAULT_SEEDS).map_err(|e| e.to_string())?;
    experiment_check(&exp)
}

fn criterion_7() -> Check {
    let exp = experiments::table3(&leakage_config(), DEFAULT_SEEDS).map_err(|e| e.to_string())?;
    experiment_check(&exp)
}

fn criterion_8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut linear_err = 0.0f64;
    for _ in 0..50 {
        let d = rng.random_range(2..=20);
        let model = LinearModel {
            weights: (0..3).map(|_| gaussian(&mut rng, d, 1.0)).collect(),
            bias: gaussian(&mut rng, 3, 1.0),
        };
        let x = gaussian(&mut rng, d, 1.0);
        let b = gaussian(&mut rng, d, 0.5);
        let target = rng.random_range(0..3);
        let ig = integrated_gradients(&model, &x, target, &b, DEFAULT_IG_STEPS).map_err(|e| e.to_string())?;
        for (k, a) in ig.attributions.iter().enumerate() {
            linear_err = linear_err.max((a - model.weights[target][k] * (x[k] - b[k])).abs());
        }
    }
    ensure(linear_err <= 1e-6, || format!("linear closed form off by {linear_err:.3e}"))?;

    // Completeness at 512 steps on random heads and a trained teacher.
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..20u64 {
        let t = MultimodalTeacher::new(InputMode::ImageText, 8, 8, vec![32, 16], 5, seed)
            .map_err(|e| e.to_string())?;
        let x = gaussian(&mut rng, 16, 1.0);
        let target = rng.random_range(0..5);
        let ig = integrated_gradients(&t.head, &x, target, &[0.0; 16], 512).map_err(|e| e.to_string())?;
        if ig.delta.abs() > 1e-8 {
            worst = worst.max(ig.relative_residual());
            checked += 1;
        }
    }
    let cfg = leakage_config();
    let run = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let p = prepare(&cfg).map_err(|e| e.to_string())?;
    let eval = validation_eval_set(&p, &run.teacher_x, &cfg.mix.policy().map_err(|e| e.to_string())?, &run.bank)
        .map_err(|e| e.to_string())?;
    for x in eval.inputs.iter().take(100) {
        let z = run.teacher_x.head.forward(x).map_err(|e| e.to_string())?;
        let target = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
        let ig = integrated_gradients(&run.teacher_x.head, x, target, &vec![0.0; x.len()], 512)
            .map_err(|e| e.to_string())?;
        worst = worst.max(ig.relative_residual());
        checked += 1;
    }
    ensure(worst <= 1e-3, || format!("completeness residual {worst:.3e} > 1e-3 relative at 512 steps"))?;

    let exp = experiments::fig3(&cfg, DEFAULT_SEEDS, DEFAULT_IG_STEPS).map_err(|e| e.to_string())?;
    let trend = experiment_check(&exp)?;
    Ok(format!(
        "linear IG error {linear_err:.1e}; max completeness residual {worst:.1e} over {checked} samples; {trend}"
    ))
}

// ---------------------------------------------------------------------------
// 9. Determinism

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("under root").display().to_string();
                out.push((rel, std::fs::read(&path).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}

fn save_run(run: &RunOutput, dir: &Path) -> xmodal::Result<()> {
    let meta = serde_json::Value::Null;
    Checkpoint::from_unimodal(&run.ensemble.strong, meta.clone()).save(&dir.join("teacher-strong"))?;
    Checkpoint::from_unimodal(&run.ensemble.weak, meta.clone()).save(&dir.join("teacher-weak"))?;
    Checkpoint::from_multimodal(&run.teacher_x, meta.clone()).save(&dir.join("teacher-x"))?;
    Checkpoint::from_student(&run.student, meta).save(&dir.join("student"))?;
    run.bank.save(&dir.join("bank"))
}

fn criterion_9() -> Check {
    let base = leakage_config();
    let mut notes = Vec::new();
    for cfg in [base.clone(), text_only_variant(&base)] {
        let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
        let mut metrics = Vec::new();
        for d in &dirs {
            let run = run_pipeline(&cfg).map_err(|e| e.to_string())?;
            save_run(&run, d.path()).map_err(|e| e.to_string())?;
            metrics.push(run.record.metrics_json().map_err(|e| e.to_string())?);
        }
        ensure(metrics[0] == metrics[1], || format!("{}: run metrics differ between runs", cfg.name))?;
        let (a, b) = (files_under(dirs[0].path()), files_under(dirs[1].path()));
        ensure(!a.is_empty() && a == b, || format!("{}: checkpoint bytes differ between runs", cfg.name))?;
        notes.push(format!("{} ({} files, {} metric bytes)", cfg.name, a.len(), metrics[0].len()));
    }
    Ok(format!("byte-identical metrics and checkpoints: {}", notes.join(", ")))
}

// ---------------------------------------------------------------------------
// 10. Student isolation

fn criterion_10() -> Check {
    let mut cfg = leakage_config();
    let run = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let student = &run.student;
    let p = prepare(&cfg).map_err(|e| e.to_string())?;
    ensure(student.head.input_dim() == cfg.dataset.feature_dim, || {
        format!("student input width {} is not the image feature width", student.head.input_dim())
    })?;
    for s in p.dataset.val.iter().take(50) {
        let img = ImageFeatures::new(s.features.clone());
        let direct = student.forward(&img).map_err(|e| e.to_string())?;
        let via = student.forward_features(&Features::image(img.clone())).map_err(|e| e.to_string())?;
        ensure(direct == via, || "image-provenance path disagrees with the direct path".into())?;
        let text = vec![0.1; cfg.dataset.feature_dim];
        for bad in [Features::text(text.clone()), Features::concat(img.as_slice(), &text)] {
            ensure(
                matches!(student.forward_features(&bad), Err(Error::StudentIsolation(_))),
                || "text-derived features reached the student forward pass".into(),
            )?;
        }
    }

    cfg.kd.lambda_kd = 0.0;
    let mut params = Vec::new();
    for policy in [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)] {
        let mut c = cfg.clone();
        (c.mix.p_gt, c.mix.p_wn, c.mix.p_noise) = policy;
        let out = run_pipeline(&c).map_err(|e| e.to_string())?;
        params.push(out.student.head.net.params());
    }
    let p = prepare(&cfg).map_err(|e| e.to_string())?;
    let (baseline, _) = train_student_baseline(&p, &cfg).map_err(|e| e.to_string())?;
    let base_params = baseline.head.net.params();
    ensure(
        params.iter().all(|q| q.iter().map(|v| v.to_bits()).eq(base_params.iter().map(|v| v.to_bits()))),
        || "lambda_kd = 0 student differs from the cross-entropy baseline".into(),
    )?;
    Ok(format!(
        "text features rejected at the student input; lambda_kd = 0 students under gt/wn/noise text equal the CE baseline bit for bit ({} params)",
        base_params.len()
    ))
}

// ---------------------------------------------------------------------------

type Criterion = (&'static str, fn() -> Check, Duration);

fn main() {
    let criteria: [Criterion; 10] = [
        ("loss oracle equivalence", criterion_1, Duration::from_secs(10)),
        ("gradient checks", criterion_2, Duration::from_secs(30)),
        ("noun filtering and selection equal enumeration", criterion_3, Duration::from_secs(5)),
        ("k-means correctness", criterion_4, Duration::from_secs(5)),
        ("label-leakage ordering", criterion_5, Duration::from_secs(600)),
        ("relaxation-proportion trend", criterion_6, Duration::from_secs(600)),
        ("learnable vs frozen bank", criterion_7, Duration::from_secs(300)),
        ("attribution fidelity", criterion_8, Duration::from_secs(300)),
        ("determinism", criterion_9, Duration::from_secs(600)),
        ("student isolation", criterion_10, Duration::from_secs(600)),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!(
                "over the {}s budget; {detail}",
                budget.as_secs()
            )),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {:>2}: {name} ({:.1}s): {detail}", i + 1, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
