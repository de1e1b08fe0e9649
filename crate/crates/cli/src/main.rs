use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use xmodal::attribution::{attribute_trial, shares_csv, EvalSet, TargetMode};
use xmodal::data::SyntheticDataset;
use xmodal::embeddings::{encode_image, BackendKind};
use xmodal::experiments::{self, Experiment, DEFAULT_SEEDS};
use xmodal::lexicon::{
    harvest_candidates, CandidateScope, ClassCatalog, Lexicon, LexiconSource,
};
use xmodal::models::Checkpoint;
use xmodal::relaxation::embed_nouns;
use xmodal::training::{
    self, prepare_with, run_pipeline, run_sweep, sweep_policies, train_multimodal_teacher,
    train_unimodal_teachers, validation_eval_set, PhaseRecord, Prepared, SweepAxis, TrainConfig,
};
use xmodal::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUN: u8 = 3;
const EXIT_TREND: u8 = 4;

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Crossmodal distillation with relaxed noun text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Vlm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    PerClass,
    FullVocabulary,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Wn,
    Noise,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Predicted,
    GroundTruth,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reproduce {
    Fig2,
    Table2,
    Table3,
    Fig3,
}

/// Where the class names and the noun snapshot come from.
#[derive(clap::Args)]
struct Sources {
    /// Class list, one name per line; defaults to the built-in catalog.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Offline noun snapshot (TSV); defaults to the built-in lexicon.
    #[arg(long)]
    snapshot: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Encode class and noun prompts (and dataset images) into the cache.
    Embed {
        /// Run config; defaults to the shipped leakage config.
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "mock")]
        backend: Backend,
        #[arg(long)]
        cache_dir: PathBuf,
        /// Also encode every train and validation image.
        #[arg(long)]
        images: bool,
        #[command(flatten)]
        sources: Sources,
    },
    /// Harvest relaxed noun candidates for a class catalog.
    Lexicon {
        #[command(flatten)]
        sources: Sources,
        #[arg(long, default_value_t = xmodal::lexicon::DEFAULT_PER_CLASS_LIMIT)]
        per_class_limit: usize,
        #[arg(long, value_enum, default_value = "per-class")]
        scope: Scope,
        /// Write the candidate set and report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster image embeddings and build the filtered noun bank.
    Relax {
        /// Run config; defaults to the shipped leakage config.
        config: Option<PathBuf>,
        #[command(flatten)]
        sources: Sources,
        #[arg(long, value_enum)]
        backend: Option<Backend>,
        /// Number of image clusters.
        #[arg(long = "M", alias = "clusters")]
        clusters: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Data seed (also seeds k-means).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "bank")]
        out: PathBuf,
    },
    /// Train the strong- and weak-augmentation image teachers.
    TrainTeachers {
        config: PathBuf,
        #[arg(long, default_value = "out/teachers")]
        out: PathBuf,
    },
    /// Train the multimodal teacher and its noun bank.
    TrainTeacherX {
        config: PathBuf,
        #[arg(long, default_value = "out/teacher-x")]
        out: PathBuf,
    },
    /// Run the full pipeline and distill the image-only student.
    Distill {
        config: PathBuf,
        #[arg(long, default_value = "out/distill")]
        out: PathBuf,
    },
    /// Sweep the share of ground-truth text replaced along one axis.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Replacement percentages.
        #[arg(long, value_delimiter = ',', default_value = "0,20,50,80,100")]
        points: Vec<f64>,
        #[arg(long, default_value = "out/sweep")]
        out: PathBuf,
    },
    /// Integrated-gradients modality shares of a multimodal teacher.
    Attribute {
        /// Multimodal teacher checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Eval set JSON written by train-teacher-x or distill.
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, default_value_t = xmodal::attribution::DEFAULT_IG_STEPS)]
        n_steps: usize,
        #[arg(long, value_enum, default_value = "predicted")]
        target: Target,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Generate and persist the synthetic dataset of a config.
    GenData {
        config: PathBuf,
        #[arg(long, default_value = "out/data")]
        out: PathBuf,
    },
    /// Multi-seed experiment on the shipped leakage config with trend checks.
    Reproduce {
        #[arg(value_enum)]
        experiment: Reproduce,
        /// Use this config instead of the shipped one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
        /// Integrated-gradients steps (fig3).
        #[arg(long, default_value_t = xmodal::attribution::DEFAULT_IG_STEPS)]
        n_steps: usize,
        #[arg(long, default_value = "out/reproduce")]
        out: PathBuf,
    },
}

/// Outcome that maps onto an exit code.
enum Failure {
    Trend(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Trend(msg)) => {
            eprintln!("trend check failed:\n{msg}");
            ExitCode::from(EXIT_TREND)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
            ExitCode::from(if config { EXIT_CONFIG } else { EXIT_RUN })
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Embed {
            config,
            backend,
            cache_dir,
            images,
            sources,
        } => embed(config, backend, cache_dir, images, &sources),
        Command::Lexicon {
            sources,
            per_class_limit,
            scope,
            out,
        } => lexicon(&sources, per_class_limit, scope, out),
        Command::Relax {
            config,
            sources,
            backend,
            clusters,
            top_k,
            seed,
            out,
        } => relax(config, &sources, backend, clusters, top_k, seed, &out),
        Command::TrainTeachers { config, out } => train_teachers(&load_config(&config)?, &out),
        Command::TrainTeacherX { config, out } => train_teacher_x(&load_config(&config)?, &out),
        Command::Distill { config, out } => distill(&load_config(&config)?, &out),
        Command::Sweep {
            config,
            axis,
            points,
            out,
        } => sweep(&load_config(&config)?, axis, &points, &out),
        Command::Attribute {
            checkpoint,
            eval,
            n_steps,
            target,
            out,
        } => attribute(&checkpoint, &eval, n_steps, target, &out),
        Command::GenData { config, out } => gen_data(&load_config(&config)?, &out),
        Command::Reproduce {
            experiment,
            config,
            seeds,
            n_steps,
            out,
        } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => experiments::leakage_config(),
            };
            reproduce(experiment, &cfg, seeds, n_steps, &out)
        }
    }
}

fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    Ok(TrainConfig::load(path)?)
}

fn config_or_shipped(path: Option<PathBuf>) -> Result<TrainConfig, Failure> {
    match path {
        Some(p) => load_config(&p),
        None => Ok(experiments::leakage_config()),
    }
}

fn load_sources(sources: &Sources, num_classes: Option<usize>) -> Result<(ClassCatalog, Lexicon), Failure> {
    let catalog = match (&sources.catalog, num_classes) {
        (Some(p), _) => ClassCatalog::load(p)?,
        (None, Some(n)) => ClassCatalog::mock_prefix(n)?,
        (None, None) => ClassCatalog::mock(),
    };
    let lexicon = match &sources.snapshot {
        Some(p) => Lexicon::load(LexiconSource::OfflineSnapshot, Some(p))?,
        None => Lexicon::mock(),
    };
    Ok((catalog, lexicon))
}

fn backend_kind(b: Backend) -> BackendKind {
    match b {
        Backend::Mock => BackendKind::SemanticMock,
        Backend::Vlm => BackendKind::PretrainedVlm,
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Two-column whitespace-separated numeric series.
fn write_series(path: &Path, points: impl IntoIterator<Item = (f64, f64)>) -> anyhow::Result<()> {
    let mut s = String::new();
    for (x, y) in points {
        writeln!(s, "{x}\t{y}")?;
    }
    write(path, &s)
}

fn epoch_series(path: &Path, record: &PhaseRecord) -> anyhow::Result<()> {
    write_series(path, record.epochs.iter().map(|e| (e.epoch as f64, e.val_acc)))
}

fn embed(
    config: Option<PathBuf>,
    backend: Backend,
    cache_dir: PathBuf,
    images: bool,
    sources: &Sources,
) -> CmdResult {
    let mut cfg = config_or_shipped(config)?;
    cfg.backend.kind = backend_kind(backend);
    cfg.backend.cache_dir = Some(cache_dir.clone());
    let (catalog, lexicon) = load_sources(sources, Some(cfg.dataset.num_classes))?;
    let encoder = training::build_backend(&cfg, &catalog, &lexicon)?;
    let (candidates, _) = harvest_candidates(&catalog, &lexicon, cfg.relax.per_class_limit, cfg.relax.scope)?;
    let class_names = xmodal::lexicon::NounCandidateSet {
        nouns: catalog.names().map(str::to_string).collect(),
        source: candidates.source,
    };
    let nouns = embed_nouns(&candidates, &cfg.relax.templates, encoder.as_ref(), cfg.relax.embed_batch_size)?;
    embed_nouns(&class_names, &cfg.relax.templates, encoder.as_ref(), cfg.relax.embed_batch_size)?;
    let mut image_count = 0;
    if images {
        let data = SyntheticDataset::generate(&cfg.dataset, cfg.seeds.data)?;
        for s in data.train.iter().chain(&data.val) {
            encode_image(encoder.as_ref(), &s.image_input())?;
            image_count += 1;
        }
    }
    drop(encoder);
    println!(
        "encoded {} class names, {} nouns, {} images into {}",
        catalog.len(),
        nouns.len(),
        image_count,
        cache_dir.display()
    );
    Ok(())
}

fn lexicon(sources: &Sources, per_class_limit: usize, scope: Scope, out: Option<PathBuf>) -> CmdResult {
    let (catalog, lexicon) = load_sources(sources, None)?;
    let scope = match scope {
        Scope::PerClass => CandidateScope::PerClass,
        Scope::FullVocabulary => CandidateScope::FullVocabulary,
    };
    let (candidates, report) = harvest_candidates(&catalog, &lexicon, per_class_limit, scope)?;
    for (class, n) in &report.per_class {
        println!("{class}\t{n}");
    }
    for (missing, used) in &report.fallbacks {
        println!("fallback: {missing} -> {used}");
    }
    println!("{} candidates", candidates.len());
    if let Some(path) = out {
        write_json(
            &path,
            &serde_json::json!({ "candidates": candidates, "report": report }),
        )?;
    }
    Ok(())
}

fn relax(
    config: Option<PathBuf>,
    sources: &Sources,
    backend: Option<Backend>,
    clusters: Option<usize>,
    top_k: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> CmdResult {
    let mut cfg = config_or_shipped(config)?;
    if let Some(b) = backend {
        cfg.backend.kind = backend_kind(b);
    }
    if clusters.is_some() {
        cfg.relax.num_clusters = clusters;
    }
    if let Some(k) = top_k {
        cfg.relax.top_k = k;
    }
    if let Some(s) = seed {
        cfg.seeds.data = s;
    }
    let (catalog, lexicon) = load_sources(sources, Some(cfg.dataset.num_classes))?;
    if sources.catalog.is_some() {
        cfg.dataset.num_classes = catalog.len();
    }
    let p = prepare_with(&cfg, catalog, &lexicon)?;
    p.bank.save(out)?;
    let mut report = String::from("noun\tcluster\tsimilarity\trank\tkept\n");
    for s in &p.filter.selections {
        writeln!(report, "{}\t{}\t{:.6}\t{}\t{}", s.noun, s.cluster, s.similarity, s.rank, s.kept)
            .expect("writing to a string");
    }
    write(&out.join("selection.tsv"), &report)?;
    print!("{report}");
    if !p.filter.empty_clusters.is_empty() {
        println!("clusters without nouns: {:?}", p.filter.empty_clusters);
    }
    println!("bank: {} entries over {} clusters -> {}", p.bank.len(), p.bank.num_clusters(), out.display());
    Ok(())
}

fn save_ensemble(out: &Path, ensemble: &training::TeacherEnsemble) -> anyhow::Result<()> {
    for (dir, member) in [("teacher-strong", &ensemble.strong), ("teacher-weak", &ensemble.weak)] {
        Checkpoint::from_unimodal(member, serde_json::Value::Null).save(&out.join(dir))?;
    }
    epoch_series(&out.join("teacher-strong.series.tsv"), &ensemble.strong_record)?;
    epoch_series(&out.join("teacher-weak.series.tsv"), &ensemble.weak_record)?;
    Ok(())
}

fn train_teachers(cfg: &TrainConfig, out: &Path) -> CmdResult {
    let p = training::prepare(cfg)?;
    let ensemble = train_unimodal_teachers(&p, cfg)?;
    create_dir(out)?;
    save_ensemble(out, &ensemble)?;
    write_json(
        &out.join("record.json"),
        &serde_json::json!({
            "config": cfg,
            "teacher_strong": ensemble.strong_record,
            "teacher_weak": ensemble.weak_record,
        }),
    )?;
    println!(
        "strong teacher val acc {:.4}, weak teacher val acc {:.4}",
        ensemble.strong_record.final_val_acc, ensemble.weak_record.final_val_acc
    );
    Ok(())
}

fn save_eval(out: &Path, p: &Prepared, cfg: &TrainConfig, teacher: &xmodal::models::MultimodalTeacher, bank: &xmodal::relaxation::NounBank) -> anyhow::Result<()> {
    let eval = validation_eval_set(p, teacher, &cfg.mix.policy()?, bank)?;
    eval.save(&out.join("eval.json"))?;
    Ok(())
}

fn train_teacher_x(cfg: &TrainConfig, out: &Path) -> CmdResult {
    let p = training::prepare(cfg)?;
    let run = train_multimodal_teacher(&p, cfg, p.bank.clone())?;
    create_dir(out)?;
    let meta = serde_json::json!({ "trial": cfg.mix.policy()?.trial_name() });
    Checkpoint::from_multimodal(&run.teacher, meta).save(&out.join("teacher-x"))?;
    run.bank.save(&out.join("bank"))?;
    save_eval(out, &p, cfg, &run.teacher, &run.bank)?;
    epoch_series(&out.join("teacher-x.series.tsv"), &run.record)?;
    write_json(
        &out.join("record.json"),
        &serde_json::json!({ "config": cfg, "teacher_x": run.record, "bank": run.bank_stats }),
    )?;
    println!("multimodal teacher val acc {:.4}", run.record.final_val_acc);
    Ok(())
}

fn distill(cfg: &TrainConfig, out: &Path) -> CmdResult {
    let run = run_pipeline(cfg)?;
    create_dir(out)?;
    save_ensemble(out, &run.ensemble)?;
    let trial = serde_json::json!({ "trial": run.record.metrics.trial });
    Checkpoint::from_multimodal(&run.teacher_x, trial.clone()).save(&out.join("teacher-x"))?;
    Checkpoint::from_student(&run.student, trial).save(&out.join("student"))?;
    run.bank.save(&out.join("bank"))?;
    // Rebuilding the preparation is deterministic and cheap next to training.
    let p = training::prepare(cfg)?;
    save_eval(out, &p, cfg, &run.teacher_x, &run.bank)?;
    write_json(&out.join("run_record.json"), &run.record)?;
    write(&out.join("metrics.json"), &run.record.metrics_json()?)?;
    epoch_series(&out.join("teacher-x.series.tsv"), &run.record.metrics.teacher_x)?;
    epoch_series(&out.join("student.series.tsv"), &run.record.metrics.student)?;
    let m = &run.record.metrics;
    println!(
        "{}: teacher-x val acc {:.4}, student val acc {:.4}",
        m.trial, m.teacher_x.final_val_acc, m.student.final_val_acc
    );
    Ok(())
}

fn sweep(cfg: &TrainConfig, axis: Axis, points: &[f64], out: &Path) -> CmdResult {
    let axis = match axis {
        Axis::Wn => SweepAxis::Wn,
        Axis::Noise => SweepAxis::Noise,
    };
    let policies = sweep_policies(axis, points)?;
    let result = run_sweep(cfg, &policies)?;
    create_dir(out)?;
    let csv = result.to_csv()?;
    write(&out.join("sweep.csv"), &csv)?;
    write_json(&out.join("records.json"), &result.records)?;
    let series = |f: fn(&training::SweepRow) -> Option<f64>| {
        points
            .iter()
            .zip(&result.rows)
            .filter_map(move |(x, r)| f(r).map(|y| (*x, y)))
            .collect::<Vec<_>>()
    };
    write_series(&out.join("teacher.series.tsv"), series(|r| r.teacher_val))?;
    write_series(&out.join("student.series.tsv"), series(|r| r.student_val))?;
    print!("{csv}");
    let failed: Vec<&str> = result
        .rows
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.trial.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(anyhow::anyhow!("sweep points failed: {}", failed.join(", "))))
    }
}

fn attribute(checkpoint: &Path, eval: &Path, n_steps: usize, target: Target, out: &Path) -> CmdResult {
    let teacher = Checkpoint::load(checkpoint)?.into_multimodal()?;
    let set = EvalSet::load(eval)?;
    let mode = match target {
        Target::Predicted => TargetMode::Predicted,
        Target::GroundTruth => TargetMode::GroundTruth,
    };
    let report = attribute_trial(&set.trial(&teacher), n_steps, mode)?;
    write_json(out, &report)?;
    let csv = shares_csv(std::slice::from_ref(&report))?;
    write(&out.with_extension("csv"), &csv)?;
    write_series(
        &out.with_extension("series.tsv"),
        report.samples.iter().map(|s| (s.sample_id as f64, s.image_share)),
    )?;
    println!(
        "{}: image share {:.4}, text share {:.4}, max relative residual {:.2e}",
        report.trial, report.image_share, report.text_share, report.max_relative_residual
    );
    Ok(())
}

fn gen_data(cfg: &TrainConfig, out: &Path) -> CmdResult {
    let data = SyntheticDataset::generate(&cfg.dataset, cfg.seeds.data)?;
    data.save(out)?;
    println!(
        "{} train / {} val samples -> {}; train label counts {:?}",
        data.train.len(),
        data.val.len(),
        out.display(),
        data.train_label_counts()
    );
    Ok(())
}

fn experiment_series(exp: &Experiment, out: &Path) -> anyhow::Result<()> {
    let by_axis = |wn: bool| {
        exp.rows
            .iter()
            .filter(|r| if wn { r.policy.p_noise == 0.0 } else { r.policy.p_wn == 0.0 })
            .map(|r| (100.0 * if wn { r.policy.p_wn } else { r.policy.p_noise }, r))
            .collect::<Vec<_>>()
    };
    let sorted = |wn: bool| {
        let mut v = by_axis(wn);
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    match exp.name.as_str() {
        "fig2" => {
            let rows = sorted(true);
            write_series(&out.join("fig2_teacher.series.tsv"), rows.iter().map(|(x, r)| (*x, r.teacher.mean)))?;
            write_series(&out.join("fig2_student.series.tsv"), rows.iter().map(|(x, r)| (*x, r.student.mean)))?;
        }
        "fig3" => {
            for (name, wn) in [("noise", false), ("wn", true)] {
                let rows = sorted(wn);
                write_series(
                    &out.join(format!("fig3_{name}.series.tsv")),
                    rows.iter()
                        .filter_map(|(x, r)| r.image_share.map(|s| (*x, s.mean))),
                )?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn reproduce(which: Reproduce, cfg: &TrainConfig, seeds: usize, n_steps: usize, out: &Path) -> CmdResult {
    let exp = match which {
        Reproduce::Table2 => experiments::table2(cfg, seeds)?,
        Reproduce::Fig2 => experiments::fig2(cfg, seeds)?,
        Reproduce::Table3 => experiments::table3(cfg, seeds)?,
        Reproduce::Fig3 => experiments::fig3(cfg, seeds, n_steps)?,
    };
    create_dir(out)?;
    let csv = exp.to_csv()?;
    write(&out.join(format!("{}.csv", exp.name)), &csv)?;
    write_json(&out.join(format!("{}.json", exp.name)), &exp)?;
    experiment_series(&exp, out)?;
    let mut summary = format!("{} ({} seeds)\n", exp.name, exp.seeds);
    for r in &exp.rows {
        let share = r
            .image_share
            .map(|s| format!("  image share {:.4} ± {:.4}", s.mean, s.std))
            .unwrap_or_default();
        writeln!(
            summary,
            "{:<26} {:<9} teacher {:.4} ± {:.4}  student {:.4} ± {:.4}{share}",
            r.trial,
            format!("{:?}", r.bank).to_lowercase(),
            r.teacher.mean,
            r.teacher.std,
            r.student.mean,
            r.student.std
        )
        .expect("writing to a string");
    }
    for c in &exp.checks {
        writeln!(summary, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)
            .expect("writing to a string");
    }
    write(&out.join(format!("{}.summary.txt", exp.name)), &summary)?;
    print!("{summary}");
    if exp.passed() {
        Ok(())
    } else {
        let lines: Vec<String> = exp
            .failures()
            .iter()
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        Err(Failure::Trend(lines.join("\n")))
    }
}
