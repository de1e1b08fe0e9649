//! The three-phase pipeline: image teachers, multimodal teacher with a
//! trainable noun bank, and the image-only student.

mod config;
mod sweep;

pub use config::{
    BackendConfig, BankMode, EnsembleConfig, MixConfig, RelaxConfig, Seeds, StudentConfig,
    TeacherSignal, TeacherXConfig, TrainConfig,
};
pub use sweep::{run_sweep, run_sweep_outputs, sweep_policies, SweepAxis, SweepResult, SweepRow};

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::EvalSet;
use crate::data::{Sample, SyntheticDataset};
use crate::embeddings::{
    encode_image, BackendKind, CachedEncoder, EmbeddingCache, EmbeddingVector, Encoder,
    PretrainedVlm, SemanticMock, SemanticMockSpec,
};
use crate::error::{Error, Result};
use crate::lexicon::{harvest_candidates, ClassCatalog, HarvestReport, Lexicon};
use crate::losses::{
    average_logits, cross_entropy_grad, onehot, student_total_grad, teacher_total_grad,
    RelaxedText,
};
use crate::models::{
    ensemble_logits, AugPolicy, ClassifierHead, ImageFeatures, MultimodalTeacher,
    ResolverSettings, Student, TextMixPolicy, TextResolver, TextSource, UnimodalTeacher,
};
use crate::nn::{Grads, Mlp, MlpSpec, Sgd, SgdConfig};
use crate::relaxation::{assign_and_filter, embed_nouns, kmeans, FilterReport, NounBank};
use crate::store::hash_seed;

/// Data, encoder and noun bank shared by every phase of a run.
pub struct Prepared {
    pub cfg: TrainConfig,
    pub dataset: SyntheticDataset,
    pub catalog: ClassCatalog,
    pub backend: Arc<dyn Encoder>,
    pub train_images: Vec<EmbeddingVector>,
    pub val_images: Vec<EmbeddingVector>,
    /// Freshly built bank (current = pretrained).
    pub bank: NounBank,
    pub harvest: HarvestReport,
    pub filter: FilterReport,
    pub resolver: TextResolver,
}

impl std::fmt::Debug for Prepared {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Prepared")
            .field("name", &self.cfg.name)
            .field("backend", &self.backend.identity())
            .field("train", &self.dataset.train.len())
            .field("val", &self.dataset.val.len())
            .field("bank", &self.bank.len())
            .finish()
    }
}

impl Prepared {
    /// Whether `cfg` can reuse this preparation (same data, encoder and bank).
    pub fn compatible(&self, cfg: &TrainConfig) -> bool {
        self.cfg.dataset == cfg.dataset
            && self.cfg.backend == cfg.backend
            && self.cfg.relax == cfg.relax
            && self.cfg.seeds == cfg.seeds
            && self.cfg.mix.noise_mode == cfg.mix.noise_mode
    }

    pub fn samples(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.dataset.train,
            Split::Val => &self.dataset.val,
        }
    }

    pub fn images(&self, split: Split) -> &[EmbeddingVector] {
        match split {
            Split::Train => &self.train_images,
            Split::Val => &self.val_images,
        }
    }

    /// Text source of every sample in `split` under `policy`.
    pub fn sources(&self, split: Split, policy: &TextMixPolicy) -> Vec<TextSource> {
        let ids: Vec<u64> = self.samples(split).iter().map(|s| s.sample_id).collect();
        policy.assign(&ids, self.cfg.seeds.mix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
}

/// Builds the configured encoder, wrapped in the cache when one is set. The
/// mock registers `catalog` and the nouns `lexicon` attaches to it.
pub fn build_backend(
    cfg: &TrainConfig,
    catalog: &ClassCatalog,
    lexicon: &Lexicon,
) -> Result<Arc<dyn Encoder>> {
    let b = &cfg.backend;
    let inner: Arc<dyn Encoder> = match b.kind {
        BackendKind::SemanticMock => Arc::new(SemanticMock::new(
            SemanticMockSpec {
                num_classes: catalog.len(),
                anchor_seed: b.anchor_seed,
                synonym_noise: b.synonym_noise,
                distractor_noise: b.distractor_noise,
                image_noise: b.image_noise,
                text_dim: b.text_dim,
                image_dim: b.image_dim,
            },
            &lexicon.mock_registry(catalog),
        )?),
        BackendKind::PretrainedVlm => Arc::new(PretrainedVlm::new(
            b.model_path.clone(),
            b.text_dim,
            b.image_dim,
        )),
    };
    match &b.cache_dir {
        Some(dir) => {
            let cache = Arc::new(EmbeddingCache::open(dir.clone())?);
            Ok(Arc::new(CachedEncoder::new(inner, cache)))
        }
        None => Ok(inner),
    }
}

/// Generates the dataset, encodes images and builds the noun bank over the
/// built-in catalog and lexicon.
pub fn prepare(cfg: &TrainConfig) -> Result<Prepared> {
    cfg.validate()?;
    let catalog = ClassCatalog::mock_prefix(cfg.dataset.num_classes)?;
    prepare_with(cfg, catalog, &Lexicon::mock())
}

pub fn prepare_with(cfg: &TrainConfig, catalog: ClassCatalog, lexicon: &Lexicon) -> Result<Prepared> {
    let backend = build_backend(cfg, &catalog, lexicon)?;
    prepare_with_backend(cfg, catalog, lexicon, backend)
}

pub fn prepare_with_backend(
    cfg: &TrainConfig,
    catalog: ClassCatalog,
    lexicon: &Lexicon,
    backend: Arc<dyn Encoder>,
) -> Result<Prepared> {
    cfg.validate()?;
    if catalog.len() != cfg.dataset.num_classes {
        return Err(Error::Config(format!(
            "catalog has {} classes but dataset.num_classes is {}",
            catalog.len(),
            cfg.dataset.num_classes
        )));
    }
    let dataset = SyntheticDataset::generate(&cfg.dataset, cfg.seeds.data)?;
    let encode_all = |samples: &[Sample]| -> Result<Vec<EmbeddingVector>> {
        samples
            .iter()
            .map(|s| encode_image(backend.as_ref(), &s.image_input()))
            .collect()
    };
    let train_images = encode_all(&dataset.train)?;
    let val_images = encode_all(&dataset.val)?;

    let (candidates, harvest) = harvest_candidates(
        &catalog,
        lexicon,
        cfg.relax.per_class_limit,
        cfg.relax.scope,
    )?;
    let noun_embeddings = embed_nouns(
        &candidates,
        &cfg.relax.templates,
        backend.as_ref(),
        cfg.relax.embed_batch_size,
    )?;
    let points: Vec<Vec<f64>> = train_images.iter().map(EmbeddingVector::to_f64).collect();
    let clusters = kmeans(
        &points,
        cfg.num_clusters(),
        hash_seed(&format!("{}:kmeans", cfg.seeds.data)),
        cfg.relax.kmeans_max_iter,
        cfg.relax.kmeans_tol,
    )?;
    let (mut bank, filter) = assign_and_filter(&clusters, &noun_embeddings, cfg.relax.top_k)?;
    bank.learnable = cfg.bank == BankMode::Learnable;
    log::info!(
        "noun bank: {} of {} candidates kept over {} clusters",
        bank.len(),
        candidates.len(),
        clusters.num_clusters()
    );
    let resolver = TextResolver::new(
        &catalog,
        &cfg.relax.templates,
        backend.as_ref(),
        clusters,
        ResolverSettings {
            noise_mode: cfg.mix.noise_mode,
            noise_seed: cfg.seeds.noise,
            selection: cfg.relax.selection,
            selection_seed: cfg.seeds.mix,
        },
    )?;
    Ok(Prepared {
        cfg: cfg.clone(),
        dataset,
        catalog,
        backend,
        train_images,
        val_images,
        bank,
        harvest,
        filter,
        resolver,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub final_val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BankStats {
    pub entries: usize,
    pub learnable: bool,
    pub update_steps: usize,
    /// Mean cos(pretrained, current) after training.
    pub mean_drift_cosine: f64,
    pub min_drift_cosine: f64,
    /// Mean cosine-regularization term over the bank after training.
    pub mean_cosreg: f64,
    /// Largest |‖current‖ − 1| seen after any update.
    pub max_norm_error: f64,
    pub fingerprint: String,
}

impl BankStats {
    fn of(bank: &NounBank, update_steps: usize, max_norm_error: f64) -> Self {
        let drifts: Vec<f64> = bank
            .entries()
            .iter()
            .map(|e| {
                if e.pretrained() == e.current() {
                    1.0
                } else {
                    e.pretrained().cosine(e.current())
                }
            })
            .collect();
        let n = drifts.len().max(1) as f64;
        Self {
            entries: bank.len(),
            learnable: bank.learnable,
            update_steps,
            mean_drift_cosine: drifts.iter().sum::<f64>() / n,
            min_drift_cosine: drifts.iter().copied().fold(1.0, f64::min),
            mean_cosreg: drifts.iter().map(|c| 1.0 - c).sum::<f64>() / n,
            max_norm_error,
            fingerprint: bank.fingerprint(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SourceCounts {
    pub gt: usize,
    pub wn: usize,
    pub noise: usize,
}

impl SourceCounts {
    fn of(sources: &[TextSource]) -> Self {
        let mut c = Self::default();
        for s in sources {
            match s {
                TextSource::Gt => c.gt += 1,
                TextSource::Wn => c.wn += 1,
                TextSource::Noise => c.noise += 1,
            }
        }
        c
    }
}

/// Checksums of every teacher parameter and the bank around distillation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeCheck {
    pub before: String,
    pub after: String,
}

impl FreezeCheck {
    pub fn unchanged(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub trial: String,
    pub teacher_strong: PhaseRecord,
    pub teacher_weak: PhaseRecord,
    pub teacher_x: PhaseRecord,
    pub student: PhaseRecord,
    pub bank: BankStats,
    pub train_sources: SourceCounts,
    pub teacher_freeze: FreezeCheck,
}

/// Everything a run reports. Wall-clock time is kept out of `metrics` so
/// that repeated runs compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub metrics: RunMetrics,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn metrics_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.metrics)?)
    }
}

/// The two image-only ensemble members.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEnsemble {
    pub strong: UnimodalTeacher,
    pub weak: UnimodalTeacher,
    pub strong_record: PhaseRecord,
    pub weak_record: PhaseRecord,
}

impl TeacherEnsemble {
    pub fn logits(&self, x: &ImageFeatures) -> Result<Vec<f64>> {
        ensemble_logits(&[
            self.strong.forward_unimodal(x)?,
            self.weak.forward_unimodal(x)?,
        ])
    }
}

fn phase_seed(cfg: &TrainConfig, phase: &str) -> u64 {
    hash_seed(&format!("{}:{phase}", cfg.seeds.init))
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

fn accuracy(predictions: impl Iterator<Item = (usize, usize)>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, y) in predictions {
        n += 1;
        hit += usize::from(p == y);
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Minibatch SGD shared by every phase.
///
/// `step` gets the network, the batch indices and the phase RNG, and must
/// accumulate parameter gradients (already divided by the batch size) into
/// the buffer. It returns the batch loss and the number of correct
/// predictions. `after_step` runs once the parameters have been updated.
struct Phase<'a> {
    name: &'a str,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    sgd: SgdConfig,
}

impl Phase<'_> {
    fn run<S, A, V>(
        &self,
        net: &mut Mlp,
        n: usize,
        mut step: S,
        mut after_step: A,
        mut validate: V,
    ) -> Result<PhaseRecord>
    where
        S: FnMut(&Mlp, &[usize], &mut ChaCha8Rng, &mut Grads) -> Result<(f64, usize)>,
        A: FnMut() -> Result<()>,
        V: FnMut(&Mlp) -> Result<f64>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_seed(&format!("{}:order", self.seed)));
        let mut opt = Sgd::new(self.sgd);
        let mut epochs = Vec::with_capacity(self.epochs);
        let mut order: Vec<usize> = (0..n).collect();
        let mut global_step = 0usize;
        for epoch in 0..self.epochs {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for batch in order.chunks(self.batch_size) {
                let mut grads = Grads::zeros_like(net);
                let (loss, hits) = step(net, batch, &mut rng, &mut grads)?;
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::Divergence {
                        phase: self.name.to_string(),
                        seed: self.seed,
                        step: global_step,
                    });
                }
                opt.step(net, &grads);
                after_step()?;
                loss_sum += loss * batch.len() as f64;
                correct += hits;
                global_step += 1;
            }
            let val_acc = validate(net)?;
            log::debug!(
                "{} epoch {epoch}: loss {:.4} train acc {:.3} val acc {:.3}",
                self.name,
                loss_sum / n.max(1) as f64,
                correct as f64 / n.max(1) as f64,
                val_acc
            );
            epochs.push(EpochMetrics {
                epoch,
                train_loss: loss_sum / n.max(1) as f64,
                train_acc: correct as f64 / n.max(1) as f64,
                val_acc,
            });
        }
        let final_val_acc = match epochs.last() {
            Some(e) => e.val_acc,
            None => validate(net)?,
        };
        Ok(PhaseRecord {
            phase: self.name.to_string(),
            seed: self.seed,
            epochs,
            final_val_acc,
        })
    }
}

fn image_features(s: &Sample) -> ImageFeatures {
    ImageFeatures::new(s.features.clone())
}

fn image_accuracy(head: &ClassifierHead, samples: &[Sample]) -> Result<f64> {
    let preds = samples
        .iter()
        .map(|s| Ok((argmax(&head.forward(&s.features)?), s.label)))
        .collect::<Result<Vec<_>>>()?;
    Ok(accuracy(preds.into_iter()))
}

fn train_member(p: &Prepared, cfg: &TrainConfig, policy: AugPolicy) -> Result<UnimodalTeacherRun> {
    let t = &cfg.teachers;
    let (name, aug) = match policy {
        AugPolicy::Strong => ("teacher-strong", t.strong_aug),
        AugPolicy::Weak => ("teacher-weak", t.weak_aug),
    };
    let seed = phase_seed(cfg, name);
    let mut head = ClassifierHead::new(
        &MlpSpec {
            input_dim: cfg.dataset.feature_dim,
            hidden: t.hidden.clone(),
            output_dim: cfg.dataset.num_classes,
            zero_last: false,
        },
        seed,
    )?;
    let train = &p.dataset.train;
    let val = &p.dataset.val;
    let record = Phase {
        name,
        seed,
        epochs: t.epochs,
        batch_size: t.batch_size,
        sgd: t.sgd,
    }
    .run(
        &mut head.net,
        train.len(),
        |net, batch, rng, grads| {
            let scale = 1.0 / batch.len() as f64;
            let (mut loss, mut hits) = (0.0, 0);
            for &i in batch {
                let x = image_features(&train[i]).augmented(aug, rng);
                let trace = net.forward_trace(x.as_slice())?;
                hits += usize::from(argmax(trace.logits()) == train[i].label);
                let (l, mut g) = cross_entropy_grad(trace.logits(), train[i].label)?;
                g.iter_mut().for_each(|v| *v *= scale);
                net.backward(&trace, &g, Some(grads));
                loss += l * scale;
            }
            Ok((loss, hits))
        },
        || Ok(()),
        |net| image_accuracy(&ClassifierHead { net: net.clone() }, val),
    )?;
    Ok(UnimodalTeacherRun {
        teacher: UnimodalTeacher {
            head,
            policy,
            aug_strength: aug,
        },
        record,
    })
}

struct UnimodalTeacherRun {
    teacher: UnimodalTeacher,
    record: PhaseRecord,
}

/// Trains the strong- and weak-augmentation ensemble members with CE.
pub fn train_unimodal_teachers(p: &Prepared, cfg: &TrainConfig) -> Result<TeacherEnsemble> {
    let (strong, weak) = rayon::join(
        || train_member(p, cfg, AugPolicy::Strong),
        || train_member(p, cfg, AugPolicy::Weak),
    );
    let (strong, weak) = (strong?, weak?);
    Ok(TeacherEnsemble {
        strong: strong.teacher,
        weak: weak.teacher,
        strong_record: strong.record,
        weak_record: weak.record,
    })
}

/// Head inputs `[image ‖ text]` (or text alone) for every sample of `split`,
/// with text resolved under `policy` against `bank`.
pub fn teacher_inputs(
    p: &Prepared,
    teacher: &MultimodalTeacher,
    policy: &TextMixPolicy,
    bank: &NounBank,
    split: Split,
) -> Result<Vec<Vec<f64>>> {
    let sources = p.sources(split, policy);
    p.samples(split)
        .iter()
        .zip(p.images(split))
        .zip(&sources)
        .map(|((s, img), src)| {
            let text = p.resolver.resolve(*src, s.sample_id, s.label, img, bank)?;
            Ok(teacher
                .input_vector(&img.to_f64(), &text.vector)?
                .values()
                .to_vec())
        })
        .collect()
}

/// Validation inputs of `teacher` under `policy`, ready for attribution.
pub fn validation_eval_set(
    p: &Prepared,
    teacher: &MultimodalTeacher,
    policy: &TextMixPolicy,
    bank: &NounBank,
) -> Result<EvalSet> {
    let val = p.samples(Split::Val);
    Ok(EvalSet {
        trial: policy.trial_name(),
        sample_ids: val.iter().map(|s| s.sample_id).collect(),
        labels: val.iter().map(|s| s.label).collect(),
        inputs: teacher_inputs(p, teacher, policy, bank, Split::Val)?,
    })
}

fn multimodal_accuracy(
    p: &Prepared,
    teacher: &MultimodalTeacher,
    policy: &TextMixPolicy,
    bank: &NounBank,
    split: Split,
) -> Result<f64> {
    let inputs = teacher_inputs(p, teacher, policy, bank, split)?;
    let preds = inputs
        .iter()
        .zip(p.samples(split))
        .map(|(x, s)| Ok((argmax(&teacher.head.forward(x)?), s.label)))
        .collect::<Result<Vec<_>>>()?;
    Ok(accuracy(preds.into_iter()))
}

/// Result of training the multimodal teacher.
#[derive(Debug, Clone)]
pub struct MultimodalRun {
    pub teacher: MultimodalTeacher,
    pub bank: NounBank,
    pub record: PhaseRecord,
    pub bank_stats: BankStats,
}

/// Trains the multimodal teacher on resolved text under the teacher
/// objective. With a learnable bank, every wn-sourced entry in a batch moves
/// along its text-slot gradient plus the weighted regularizers (averaged
/// over the batch's wn samples) and is re-normalized after the step.
pub fn train_multimodal_teacher(
    p: &Prepared,
    cfg: &TrainConfig,
    mut bank: NounBank,
) -> Result<MultimodalRun> {
    let policy = cfg.mix.policy()?;
    bank.learnable = cfg.bank == BankMode::Learnable;
    let t = &cfg.teacher_x;
    let seed = phase_seed(cfg, "teacher-x");
    let mut teacher = MultimodalTeacher::new(
        t.input_mode,
        p.backend.image_dim(),
        p.backend.text_dim(),
        t.hidden.clone(),
        cfg.dataset.num_classes,
        seed,
    )?;
    let bank_lr = t.bank_lr.unwrap_or(t.sgd.lr);
    let sources = p.sources(Split::Train, &policy);
    let train = &p.dataset.train;
    let image_block = teacher.image_block();
    let template = teacher.clone();
    let num_classes = cfg.dataset.num_classes;
    let kd = cfg.kd;

    // Bank state lives in a cell so the step and update closures can share it.
    let bank_cell = std::cell::RefCell::new(bank);
    let pending: std::cell::RefCell<BTreeMap<usize, Vec<f64>>> = Default::default();
    let mut update_steps = 0usize;
    let mut max_norm_error = 0f64;

    let record = Phase {
        name: "teacher-x",
        seed,
        epochs: t.epochs,
        batch_size: t.batch_size,
        sgd: t.sgd,
    }
    .run(
        &mut teacher.head.net,
        train.len(),
        |net, batch, _rng, grads| {
            let bank = bank_cell.borrow();
            let mut pending = pending.borrow_mut();
            pending.clear();
            let scale = 1.0 / batch.len() as f64;
            let n_wn = batch.iter().filter(|&&i| sources[i] == TextSource::Wn).count();
            let (mut loss, mut hits) = (0.0, 0);
            for &i in batch {
                let s = &train[i];
                let image = &p.train_images[i];
                let text = p.resolver.resolve(sources[i], s.sample_id, s.label, image, &bank)?;
                let x = template.input_vector(&image.to_f64(), &text.vector)?;
                let trace = net.forward_trace(x.values())?;
                hits += usize::from(argmax(trace.logits()) == s.label);
                let n_gt = p.resolver.class_text(s.label).to_f64();
                let relaxed = text.bank_index.map(|j| {
                    let e = &bank.entries()[j];
                    (j, e.pretrained().to_f64())
                });
                let parts = teacher_total_grad(
                    trace.logits(),
                    &onehot(s.label, num_classes),
                    relaxed.as_ref().map(|(_, pre)| RelaxedText {
                        n_gt: &n_gt,
                        n_relaxed: &text.vector,
                        n_pretrained: pre,
                    }),
                    &kd,
                )?;
                let mut g = parts.grad_logits;
                g.iter_mut().for_each(|v| *v *= scale);
                let g_input = net.backward(&trace, &g, Some(grads));
                loss += parts.ce * scale;
                if let Some((j, _)) = relaxed {
                    let reg_scale = 1.0 / n_wn as f64;
                    loss += (kd.lambda_hier * parts.hier + kd.lambda_cosreg * parts.cosreg) * reg_scale;
                    if bank.learnable {
                        let acc = pending.entry(j).or_insert_with(|| vec![0.0; text.vector.len()]);
                        for (k, a) in acc.iter_mut().enumerate() {
                            *a += g_input[image_block + k] + parts.grad_relaxed[k] * reg_scale;
                        }
                    }
                }
            }
            Ok((loss, hits))
        },
        || {
            let mut bank = bank_cell.borrow_mut();
            if !bank.learnable {
                return Ok(());
            }
            let pending = pending.borrow();
            for (&j, g) in pending.iter() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence {
                        phase: "teacher-x bank".into(),
                        seed,
                        step: update_steps,
                    });
                }
                let next: Vec<f64> = bank.entries()[j]
                    .current()
                    .to_f64()
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| v - bank_lr * gv)
                    .collect();
                bank.set_current(j, &next)?;
                max_norm_error = max_norm_error.max((bank.entries()[j].current().norm() - 1.0).abs());
            }
            update_steps += 1;
            Ok(())
        },
        |net| {
            let bank = bank_cell.borrow();
            let mut probe = template.clone();
            probe.head.net = net.clone();
            multimodal_accuracy(p, &probe, &policy, &bank, Split::Val)
        },
    )?;
    let bank = bank_cell.into_inner();
    let bank_stats = BankStats::of(&bank, update_steps, max_norm_error);
    Ok(MultimodalRun {
        teacher,
        bank,
        record,
        bank_stats,
    })
}

/// Averaged teacher logits for every training sample, computed on clean
/// (unaugmented) inputs with the multimodal teacher's own text policy.
pub fn teacher_targets(
    p: &Prepared,
    cfg: &TrainConfig,
    ensemble: &TeacherEnsemble,
    teacher_x: &MultimodalTeacher,
    bank: &NounBank,
) -> Result<Vec<Vec<f64>>> {
    let policy = cfg.mix.policy()?;
    let inputs = teacher_inputs(p, teacher_x, &policy, bank, Split::Train)?;
    p.dataset
        .train
        .iter()
        .zip(&inputs)
        .map(|(s, x)| {
            let z_tx = teacher_x.head.forward(x)?;
            match cfg.student.signal {
                TeacherSignal::Average => {
                    let z_tm = ensemble.logits(&image_features(s))?;
                    average_logits(&z_tm, &z_tx)
                }
                TeacherSignal::MultimodalOnly => Ok(z_tx),
            }
        })
        .collect()
}

fn train_student(p: &Prepared, cfg: &TrainConfig, targets: Option<&[Vec<f64>]>) -> Result<(Student, PhaseRecord)> {
    let sc = &cfg.student;
    let seed = phase_seed(cfg, "student");
    let mut head = ClassifierHead::new(
        &MlpSpec {
            input_dim: cfg.dataset.feature_dim,
            hidden: sc.hidden.clone(),
            output_dim: cfg.dataset.num_classes,
            zero_last: false,
        },
        seed,
    )?;
    let train = &p.dataset.train;
    let val = &p.dataset.val;
    let num_classes = cfg.dataset.num_classes;
    let kd = cfg.kd;
    let aug = sc.aug_strength;
    let record = Phase {
        name: "student",
        seed,
        epochs: sc.epochs,
        batch_size: sc.batch_size,
        sgd: sc.sgd,
    }
    .run(
        &mut head.net,
        train.len(),
        |net, batch, rng, grads| {
            let scale = 1.0 / batch.len() as f64;
            let (mut loss, mut hits) = (0.0, 0);
            for &i in batch {
                let x = image_features(&train[i]).augmented(aug, rng);
                let trace = net.forward_trace(x.as_slice())?;
                hits += usize::from(argmax(trace.logits()) == train[i].label);
                let (l, mut g) = match targets {
                    Some(t) => student_total_grad(
                        trace.logits(),
                        &t[i],
                        &onehot(train[i].label, num_classes),
                        &kd,
                    )?,
                    None => cross_entropy_grad(trace.logits(), train[i].label)?,
                };
                g.iter_mut().for_each(|v| *v *= scale);
                net.backward(&trace, &g, Some(grads));
                loss += l * scale;
            }
            Ok((loss, hits))
        },
        || Ok(()),
        |net| image_accuracy(&ClassifierHead { net: net.clone() }, val),
    )?;
    Ok((
        Student {
            head,
            aug_strength: aug,
        },
        record,
    ))
}

fn freeze_checksum(ensemble: &TeacherEnsemble, teacher_x: &MultimodalTeacher, bank: &NounBank) -> String {
    crate::store::checksum(
        format!(
            "{}{}{}{}",
            ensemble.strong.head.checksum(),
            ensemble.weak.head.checksum(),
            teacher_x.head.checksum(),
            bank.fingerprint()
        )
        .as_bytes(),
    )
}

/// Distils the frozen teachers into an image-only student.
///
/// With `lambda_kd = 0` the teachers are never queried and the run matches
/// [`train_student_baseline`] exactly.
pub fn distill_student(
    p: &Prepared,
    cfg: &TrainConfig,
    ensemble: &TeacherEnsemble,
    teacher_x: &MultimodalTeacher,
    bank: &NounBank,
) -> Result<(Student, PhaseRecord, FreezeCheck)> {
    let before = freeze_checksum(ensemble, teacher_x, bank);
    let targets = if cfg.kd.lambda_kd == 0.0 {
        None
    } else {
        Some(teacher_targets(p, cfg, ensemble, teacher_x, bank)?)
    };
    let (student, record) = train_student(p, cfg, targets.as_deref())?;
    let after = freeze_checksum(ensemble, teacher_x, bank);
    Ok((student, record, FreezeCheck { before, after }))
}

/// Student trained with cross-entropy alone.
pub fn train_student_baseline(p: &Prepared, cfg: &TrainConfig) -> Result<(Student, PhaseRecord)> {
    train_student(p, cfg, None)
}

/// Models and record of one full run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub ensemble: TeacherEnsemble,
    pub teacher_x: MultimodalTeacher,
    pub bank: NounBank,
    pub student: Student,
}

/// Runs the multimodal teacher and the student on top of a trained ensemble.
pub fn run_from_ensemble(p: &Prepared, cfg: &TrainConfig, ensemble: &TeacherEnsemble) -> Result<RunOutput> {
    if !p.compatible(cfg) {
        return Err(Error::Config(
            "config differs from the prepared run in data, encoder, relaxation or seeds".into(),
        ));
    }
    let start = Instant::now();
    let policy = cfg.mix.policy()?;
    let tx = train_multimodal_teacher(p, cfg, p.bank.clone())?;
    let (student, student_record, freeze) = distill_student(p, cfg, ensemble, &tx.teacher, &tx.bank)?;
    let metrics = RunMetrics {
        trial: policy.trial_name(),
        teacher_strong: ensemble.strong_record.clone(),
        teacher_weak: ensemble.weak_record.clone(),
        teacher_x: tx.record,
        student: student_record,
        bank: tx.bank_stats,
        train_sources: SourceCounts::of(&p.sources(Split::Train, &policy)),
        teacher_freeze: freeze,
    };
    Ok(RunOutput {
        record: RunRecord {
            config: cfg.clone(),
            metrics,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
        ensemble: ensemble.clone(),
        teacher_x: tx.teacher,
        bank: tx.bank,
        student,
    })
}

/// Full pipeline for one config.
pub fn run_pipeline(cfg: &TrainConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let p = prepare(cfg)?;
    let ensemble = train_unimodal_teachers(&p, cfg)?;
    let mut out = run_from_ensemble(&p, cfg, &ensemble)?;
    out.record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(out)
}
