//! Command-line surface: train, eval-retrieval, eval-zeroshot, and the
//! gradcheck / sample-audit / make-toy diagnostics.
//!
//! Every subcommand takes an `--out` directory and writes `run.json`
//! there with the fully resolved configuration, so a run can be
//! reproduced with `--config run.json`. All artifacts are JSON or JSON
//! lines with no timestamps; identical flags and seed give byte-identical
//! files.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error,
//! 3 numeric abort. `GLAP_THREADS` caps internal parallelism.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::sampler::{group_counts, SamplerState, SamplingStrategy};
use crate::data::{
    parse_manifest_file, synth, Domain, FeatureRef, FeatureStore, Group, ManifestRecord,
};
use crate::embedding::{cosine_similarity_matrix, Matrix};
use crate::error::{GlapError, Result};
use crate::eval::{
    accuracy, multilabel_map, retrieval_report, zero_shot_classify, Direction, RelevanceMap,
    ZeroShotReport, ZeroShotTask,
};
use crate::loss::{gradcheck, GradCheckTarget, LogitForm};
use crate::model::checkpoint::load_checkpoint;
use crate::model::encoder::{EncoderKind, EncoderSpec};
use crate::model::projection::ProjectionKind;
use crate::model::{embed_audio, forward_pair_batch, load_examples, ModelConfig};
use crate::train::{train, LossKind, Schedule, ScheduleConfig, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "glap", version, about = "Contrastive language-audio training at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dual-tower model on a manifest.
    Train(TrainArgs),
    /// Score audio-text retrieval in both directions from a checkpoint.
    EvalRetrieval(EvalRetrievalArgs),
    /// Zero-shot classification from a checkpoint, a label list, and
    /// domain prompts.
    EvalZeroshot(EvalZeroshotArgs),
    /// Compare analytic loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Draw batches and audit per-group frequencies.
    SampleAudit(SampleAuditArgs),
    /// Generate a synthetic toy dataset (features + manifest).
    MakeToy(MakeToyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Re-run from a previously written run.json instead of flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training manifest (JSON lines). Required unless --config is given.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory for run.json, metrics.jsonl and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    /// Optimizer steps per epoch.
    #[arg(long = "steps", alias = "steps-per-epoch", default_value_t = 100)]
    pub steps_per_epoch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = LossKind::Sigmoid)]
    pub loss: LossKind,
    #[arg(long, value_enum, default_value_t = LogitForm::SiglipConsistent)]
    pub logit_form: LogitForm,
    #[arg(long, default_value_t = 1.0)]
    pub loss_param_lr_scale: f64,
    #[arg(long, value_enum, default_value_t = SamplingStrategy::PerExampleUniform)]
    pub strategy: SamplingStrategy,
    /// Use a flat learning rate instead of the warmup-cosine schedule.
    #[arg(long, conflicts_with_all = ["peak_lr", "floor_lr", "warmup_steps", "total_steps"])]
    pub flat_lr: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub peak_lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub floor_lr: f64,
    #[arg(long, default_value_t = 20_000)]
    pub warmup_steps: u64,
    #[arg(long, default_value_t = 200_000)]
    pub total_steps: u64,
    /// Optional global-norm gradient clip.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long, default_value_t = 256)]
    pub embed_dim: usize,
    /// Encoder output width; defaults to --embed-dim.
    #[arg(long)]
    pub encoder_dim: Option<usize>,
    /// Audio feature dimension; probed from the first record if omitted.
    #[arg(long)]
    pub audio_dim: Option<usize>,
    /// Text hash-bucket count for the trigram encoder.
    #[arg(long, default_value_t = 4096)]
    pub text_buckets: usize,
    #[arg(long, value_enum, default_value_t = EncoderKind::MeanpoolLinear)]
    pub audio_encoder: EncoderKind,
    #[arg(long, value_enum, default_value_t = EncoderKind::ByteTrigramHash)]
    pub text_encoder: EncoderKind,
    #[arg(long, value_enum, default_value_t = ProjectionKind::Mlp)]
    pub projection: ProjectionKind,
}

#[derive(Debug, Args)]
pub struct EvalRetrievalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalZeroshotArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Label list, one label per line. A record's caption is its true
    /// label (single-label) or a ';'-separated label list (multi-label).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub domain: Option<Domain>,
    #[arg(long, default_value_t = false)]
    pub multi_label: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Batch size of the random similarity grid.
    #[arg(long = "B", default_value_t = 8)]
    pub b: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleAuditArgs {
    /// Manifest to audit; defaults to a built-in skewed population with
    /// group sizes 1000/100/10/5.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Minimum number of example draws; rounded up to whole batches.
    #[arg(long, default_value_t = 4000)]
    pub draws: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = SamplingStrategy::PerExampleUniform)]
    pub strategy: SamplingStrategy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 8)]
    pub feat_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses argv and runs one subcommand, translating errors to exit codes.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    init_threads()?;
    match command {
        Command::Train(args) => cmd_train(args),
        Command::EvalRetrieval(args) => cmd_eval_retrieval(args),
        Command::EvalZeroshot(args) => cmd_eval_zeroshot(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::SampleAudit(args) => cmd_sample_audit(args),
        Command::MakeToy(args) => cmd_make_toy(args),
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("GLAP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        GlapError::Config(format!("GLAP_THREADS must be a positive integer, got {raw:?}"))
    })?;
    if n == 0 {
        return Err(GlapError::Config("GLAP_THREADS must be at least 1".into()));
    }
    // Fails only if a pool was already installed (e.g. in-process tests);
    // the cap is then whatever that pool used.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = std::fs::read_to_string(path).map_err(|e| GlapError::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| {
        GlapError::Config(format!("{}: invalid config: {e}", path.display()))
    })
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|e| GlapError::Config(format!("serialize {}: {e}", path.display())))?;
    body.push('\n');
    std::fs::write(path, body).map_err(|e| GlapError::io(path, e))
}

fn prepare_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| GlapError::io(out, e))
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| GlapError::Config(format!("{flag} is required (or use --config)")))
}

fn load_manifest_records(path: &Path) -> Result<(Vec<ManifestRecord>, FeatureStore)> {
    if !path.exists() {
        return Err(GlapError::Config(format!(
            "manifest {} does not exist",
            path.display()
        )));
    }
    let records = parse_manifest_file(path)?;
    if records.is_empty() {
        return Err(GlapError::Config(format!(
            "manifest {} has no records",
            path.display()
        )));
    }
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    Ok((records, FeatureStore::new(root)))
}

/// run.json body for `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRunFile {
    command: String,
    manifest: PathBuf,
    out: PathBuf,
    train: TrainConfig,
}

fn expect_command(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(GlapError::Config(format!(
            "config file is for command {found:?}, expected {expected:?}"
        )));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let (manifest_path, train_cfg) = if let Some(config) = &args.config {
        let file: TrainRunFile = read_json(config)?;
        expect_command(&file.command, "train")?;
        (file.manifest, file.train)
    } else {
        let manifest = require(args.manifest.clone(), "--manifest")?;
        let cfg = train_config_from_flags(&args, &manifest)?;
        (manifest, cfg)
    };

    let (records, store) = load_manifest_records(&manifest_path)?;
    train_cfg.validate()?;
    prepare_out_dir(&args.out)?;
    write_json_file(
        &args.out.join("run.json"),
        &TrainRunFile {
            command: "train".into(),
            manifest: manifest_path.clone(),
            out: args.out.clone(),
            train: train_cfg.clone(),
        },
    )?;

    let outcome = train(&records, &store, &train_cfg, &args.out)?;
    println!(
        "trained {} steps; final loss {}; checkpoint {}",
        outcome.steps_run,
        outcome
            .final_loss
            .map(|l| format!("{l:.6}"))
            .unwrap_or_else(|| "n/a".into()),
        outcome.final_checkpoint.display()
    );
    Ok(0)
}

fn train_config_from_flags(args: &TrainArgs, manifest: &Path) -> Result<TrainConfig> {
    let audio_dim = match args.audio_dim {
        Some(d) => d,
        None => probe_audio_dim(manifest)?,
    };
    let encoder_dim = args.encoder_dim.unwrap_or(args.embed_dim);
    let schedule = match args.flat_lr {
        Some(lr) => Schedule::Constant { lr },
        None => Schedule::WarmupCosine(ScheduleConfig {
            peak_lr: args.peak_lr,
            floor_lr: args.floor_lr,
            warmup_steps: args.warmup_steps,
            total_steps: args.total_steps,
        }),
    };
    let text_input = match args.text_encoder {
        EncoderKind::ByteTrigramHash => args.text_buckets,
        _ => encoder_dim,
    };
    let model = ModelConfig {
        audio: EncoderSpec {
            kind: args.audio_encoder,
            input_dim: if args.audio_encoder == EncoderKind::Passthrough {
                encoder_dim
            } else {
                audio_dim
            },
            output_dim: encoder_dim,
            trainable: args.audio_encoder != EncoderKind::Passthrough,
        },
        text: EncoderSpec {
            kind: args.text_encoder,
            input_dim: text_input,
            output_dim: encoder_dim,
            trainable: args.text_encoder != EncoderKind::Passthrough,
        },
        projection: args.projection,
        embed_dim: args.embed_dim,
    };
    Ok(TrainConfig {
        batch_size: args.batch_size,
        epochs: args.epochs,
        steps_per_epoch: args.steps_per_epoch,
        seed: args.seed,
        loss: args.loss,
        logit_form: args.logit_form,
        loss_param_lr_scale: args.loss_param_lr_scale,
        strategy: args.strategy,
        schedule,
        clip_norm: args.clip_norm,
        model,
    })
}

/// Feature width of the first manifest record, for defaulting the audio
/// encoder input dimension.
fn probe_audio_dim(manifest: &Path) -> Result<usize> {
    let (records, store) = load_manifest_records(manifest)?;
    let features = store
        .features(&records[0].feature_ref)
        .map_err(|e| GlapError::record(&records[0].id, e))?;
    Ok(features.cols())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRetrievalRunFile {
    command: String,
    manifest: PathBuf,
    checkpoint: PathBuf,
    out: PathBuf,
}

fn cmd_eval_retrieval(args: EvalRetrievalArgs) -> Result<i32> {
    let (manifest_path, checkpoint) = if let Some(config) = &args.config {
        let file: EvalRetrievalRunFile = read_json(config)?;
        expect_command(&file.command, "eval-retrieval")?;
        (file.manifest, file.checkpoint)
    } else {
        (
            require(args.manifest.clone(), "--manifest")?,
            require(args.checkpoint.clone(), "--checkpoint")?,
        )
    };

    let (records, store) = load_manifest_records(&manifest_path)?;
    let loaded = load_checkpoint(&checkpoint)?;
    prepare_out_dir(&args.out)?;
    write_json_file(
        &args.out.join("run.json"),
        &EvalRetrievalRunFile {
            command: "eval-retrieval".into(),
            manifest: manifest_path.clone(),
            checkpoint: checkpoint.clone(),
            out: args.out.clone(),
        },
    )?;

    let examples = load_examples(&records, &store)?;
    let (audio, text) = forward_pair_batch(&examples, &loaded.params)?;
    let s = cosine_similarity_matrix(&audio, &text)?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let rel = RelevanceMap::from_ids(&ids, &ids)?;
    let reports = [
        retrieval_report(&s, &rel, Direction::AudioToText)?,
        retrieval_report(&s.transposed(), &rel, Direction::TextToAudio)?,
    ];
    write_json_file(&args.out.join("retrieval.json"), &reports)?;
    for r in &reports {
        println!("{}", serde_json::to_string(r).expect("report serializes"));
    }
    Ok(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalZeroshotRunFile {
    command: String,
    manifest: PathBuf,
    checkpoint: PathBuf,
    labels: PathBuf,
    domain: Domain,
    multi_label: bool,
    out: PathBuf,
}

fn cmd_eval_zeroshot(args: EvalZeroshotArgs) -> Result<i32> {
    let file = if let Some(config) = &args.config {
        let file: EvalZeroshotRunFile = read_json(config)?;
        expect_command(&file.command, "eval-zeroshot")?;
        file
    } else {
        EvalZeroshotRunFile {
            command: "eval-zeroshot".into(),
            manifest: require(args.manifest.clone(), "--manifest")?,
            checkpoint: require(args.checkpoint.clone(), "--checkpoint")?,
            labels: require(args.labels.clone(), "--labels")?,
            domain: require(args.domain, "--domain")?,
            multi_label: args.multi_label,
            out: args.out.clone(),
        }
    };

    let labels = read_label_file(&file.labels)?;
    let task = ZeroShotTask::new(labels, file.domain, file.multi_label)?;
    let (records, store) = load_manifest_records(&file.manifest)?;
    let loaded = load_checkpoint(&file.checkpoint)?;
    prepare_out_dir(&args.out)?;
    write_json_file(
        &args.out.join("run.json"),
        &EvalZeroshotRunFile { out: args.out.clone(), ..file.clone() },
    )?;

    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let mut features = Vec::with_capacity(records.len());
    for r in &records {
        features.push(
            store
                .features(&r.feature_ref)
                .map_err(|e| GlapError::record(&r.id, e))?,
        );
    }
    let audio = embed_audio(&loaded.params, ids, &features)?;
    let scored = zero_shot_classify(&audio, &task, &loaded.params)?;

    let label_index: BTreeMap<&str, usize> = task
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let report = if file.multi_label {
        let mut truth = Matrix::filled(records.len(), task.labels.len(), false);
        for (i, r) in records.iter().enumerate() {
            for part in r.caption.split(';') {
                let name = part.trim();
                if name.is_empty() {
                    continue;
                }
                let &j = label_index.get(name).ok_or_else(|| {
                    GlapError::Config(format!(
                        "record {:?} has label {name:?} not present in the label file",
                        r.id
                    ))
                })?;
                truth.set(i, j, true);
            }
        }
        let mm = multilabel_map(scored.scores.matrix(), &truth)?;
        if mm.n_classes_skipped > 0 {
            eprintln!(
                "warning: {} of {} classes have no positives and were skipped",
                mm.n_classes_skipped,
                task.labels.len()
            );
        }
        ZeroShotReport {
            task: format!("zeroshot-{}", file.domain.name()),
            accuracy: None,
            map: Some(mm.map),
            n_items: records.len(),
            n_labels: task.labels.len(),
        }
    } else {
        let mut truth = Vec::with_capacity(records.len());
        for r in &records {
            let &j = label_index.get(r.caption.trim()).ok_or_else(|| {
                GlapError::Config(format!(
                    "record {:?} has caption {:?} not present in the label file",
                    r.id, r.caption
                ))
            })?;
            truth.push(j);
        }
        let preds = scored.predictions.expect("single-label mode has predictions");
        ZeroShotReport {
            task: format!("zeroshot-{}", file.domain.name()),
            accuracy: Some(accuracy(&preds, &truth)?),
            map: None,
            n_items: records.len(),
            n_labels: task.labels.len(),
        }
    };

    write_json_file(&args.out.join("zeroshot.json"), &report)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(0)
}

fn read_label_file(path: &Path) -> Result<Vec<String>> {
    let body = std::fs::read_to_string(path).map_err(|e| GlapError::io(path, e))?;
    let labels: Vec<String> = body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if labels.is_empty() {
        return Err(GlapError::Config(format!(
            "label file {} has no labels",
            path.display()
        )));
    }
    Ok(labels)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckRunFile {
    command: String,
    b: usize,
    seed: u64,
    tol: f64,
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct GradcheckResult {
    target: &'static str,
    max_rel_err: f64,
    grad_s_err: f64,
    grad_u_err: f64,
    grad_beta_err: f64,
}

#[derive(Debug, Serialize)]
struct GradcheckReportFile {
    b: usize,
    seed: u64,
    tol: f64,
    results: Vec<GradcheckResult>,
    worst: f64,
    pass: bool,
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    prepare_out_dir(&args.out)?;
    write_json_file(
        &args.out.join("run.json"),
        &GradcheckRunFile {
            command: "gradcheck".into(),
            b: args.b,
            seed: args.seed,
            tol: args.tol,
            out: args.out.clone(),
        },
    )?;

    let targets: [(&'static str, GradCheckTarget); 3] = [
        (
            "sigmoid_siglip_consistent",
            GradCheckTarget::Sigmoid(LogitForm::SiglipConsistent),
        ),
        (
            "sigmoid_paper_literal",
            GradCheckTarget::Sigmoid(LogitForm::PaperLiteral),
        ),
        ("infonce", GradCheckTarget::InfoNce),
    ];
    let mut results = Vec::new();
    let mut worst = 0.0f64;
    for (name, target) in targets {
        let r = gradcheck(args.b, args.seed, target)?;
        println!(
            "gradcheck {name} B={} seed={} max_rel_err={:.3e}",
            args.b, args.seed, r.max_rel_err
        );
        worst = worst.max(r.max_rel_err);
        results.push(GradcheckResult {
            target: name,
            max_rel_err: r.max_rel_err,
            grad_s_err: r.grad_s_err,
            grad_u_err: r.grad_u_err,
            grad_beta_err: r.grad_beta_err,
        });
    }
    let pass = worst <= args.tol;
    println!("gradcheck worst={worst:.3e} tol={:.1e} => {}", args.tol, if pass { "pass" } else { "FAIL" });
    write_json_file(
        &args.out.join("gradcheck.json"),
        &GradcheckReportFile {
            b: args.b,
            seed: args.seed,
            tol: args.tol,
            results,
            worst,
            pass,
        },
    )?;
    Ok(if pass { 0 } else { 1 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleAuditRunFile {
    command: String,
    manifest: Option<PathBuf>,
    draws: usize,
    batch_size: usize,
    strategy: SamplingStrategy,
    seed: u64,
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct SampleAuditReport {
    strategy: SamplingStrategy,
    batches: usize,
    examples: usize,
    counts: [usize; 4],
    freqs: [f64; 4],
    pass: bool,
}

/// Frequency window for the uniform strategy: each group must land
/// within this distance of 0.25.
const AUDIT_TOLERANCE: f64 = 0.03;

/// A population with deliberately skewed group sizes; the audit shows the
/// sampler flattens it anyway.
fn audit_population() -> Vec<ManifestRecord> {
    let sizes = [1000usize, 100, 10, 5];
    let mut records = Vec::new();
    for (g, &n) in Group::ALL.iter().zip(&sizes) {
        let domain = match g {
            Group::SoundMusic => Domain::Sound,
            _ => Domain::Speech,
        };
        let language = match g {
            Group::SpeechZh => "zh",
            Group::SpeechOther => "de",
            _ => "en",
        };
        for i in 0..n {
            records.push(ManifestRecord {
                id: format!("{}-{i:04}", g.name().to_ascii_lowercase()),
                group: *g,
                domain,
                language: language.to_string(),
                caption: format!("audit record {i}"),
                feature_ref: FeatureRef { path: "unused.gt".into(), row: i },
            });
        }
    }
    records
}

fn cmd_sample_audit(args: SampleAuditArgs) -> Result<i32> {
    if args.draws == 0 {
        return Err(GlapError::Config("--draws must be at least 1".into()));
    }
    let records = match &args.manifest {
        Some(path) => load_manifest_records(path)?.0,
        None => audit_population(),
    };
    prepare_out_dir(&args.out)?;
    write_json_file(
        &args.out.join("run.json"),
        &SampleAuditRunFile {
            command: "sample-audit".into(),
            manifest: args.manifest.clone(),
            draws: args.draws,
            batch_size: args.batch_size,
            strategy: args.strategy,
            seed: args.seed,
            out: args.out.clone(),
        },
    )?;

    let mut sampler = SamplerState::new(&records, args.strategy, args.seed)?;
    let batches = args.draws.div_ceil(args.batch_size);
    let mut totals = [0usize; 4];
    let mut stratified_ok = true;
    let base = args.batch_size / 4;
    let rem = args.batch_size % 4;
    for _ in 0..batches {
        let batch = sampler.sample_batch(args.batch_size)?;
        let counts = group_counts(&records, &batch);
        if args.strategy == SamplingStrategy::PerBatchStratified {
            let bumped = counts.iter().filter(|&&c| c == base + 1).count();
            let exact = counts.iter().all(|&c| c == base || c == base + 1) && bumped == rem;
            if !exact {
                stratified_ok = false;
            }
        }
        for g in 0..4 {
            totals[g] += counts[g];
        }
    }
    let examples = batches * args.batch_size;
    let freqs = totals.map(|c| c as f64 / examples as f64);
    let pass = match args.strategy {
        SamplingStrategy::PerExampleUniform => freqs
            .iter()
            .all(|f| (f - 0.25).abs() <= AUDIT_TOLERANCE),
        SamplingStrategy::PerBatchStratified => stratified_ok,
    };
    for (g, (&count, &freq)) in Group::ALL.iter().zip(totals.iter().zip(&freqs)) {
        println!("group {} count={count} freq={freq:.4}", g.name());
    }
    println!("sample-audit => {}", if pass { "pass" } else { "FAIL" });
    write_json_file(
        &args.out.join("audit.json"),
        &SampleAuditReport {
            strategy: args.strategy,
            batches,
            examples,
            counts: totals,
            freqs,
            pass,
        },
    )?;
    Ok(if pass { 0 } else { 1 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MakeToyRunFile {
    command: String,
    out: PathBuf,
    n: usize,
    frames: usize,
    feat_dim: usize,
    seed: u64,
}

fn cmd_make_toy(args: MakeToyArgs) -> Result<i32> {
    let cfg = synth::ToyConfig {
        n: args.n,
        frames: args.frames,
        feat_dim: args.feat_dim,
        seed: args.seed,
    };
    let manifest = synth::write_toy_dataset(&args.out, &cfg)?;
    write_json_file(
        &args.out.join("run.json"),
        &MakeToyRunFile {
            command: "make-toy".into(),
            out: args.out.clone(),
            n: args.n,
            frames: args.frames,
            feat_dim: args.feat_dim,
            seed: args.seed,
        },
    )?;
    println!("wrote {}", manifest.display());
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn train_flags_parse_into_config() {
        let cli = Cli::try_parse_from([
            "glap",
            "train",
            "--manifest",
            "toy.jsonl",
            "--out",
            "runs/x",
            "--steps",
            "10",
            "--batch-size",
            "8",
            "--seed",
            "1",
            "--loss",
            "infonce",
            "--audio-dim",
            "8",
            "--flat-lr",
            "1e-3",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else {
            panic!("expected train");
        };
        assert_eq!(args.steps_per_epoch, 10);
        assert_eq!(args.batch_size, 8);
        assert_eq!(args.seed, 1);
        assert_eq!(args.loss, LossKind::Infonce);
        let cfg = train_config_from_flags(&args, Path::new("toy.jsonl")).unwrap();
        assert_eq!(cfg.schedule, Schedule::Constant { lr: 1e-3 });
        assert_eq!(cfg.model.audio.input_dim, 8);
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["glap", "train", "--bogus", "1"]).is_err());
    }

    #[test]
    fn gradcheck_uses_capital_b_flag() {
        let cli = Cli::try_parse_from([
            "glap", "gradcheck", "--B", "8", "--seed", "0", "--out", "runs/g",
        ])
        .unwrap();
        let Command::Gradcheck(args) = cli.command else {
            panic!("expected gradcheck");
        };
        assert_eq!(args.b, 8);
        assert_eq!(args.seed, 0);
    }

    #[test]
    fn steps_per_epoch_alias_works() {
        let cli = Cli::try_parse_from([
            "glap",
            "train",
            "--manifest",
            "m.jsonl",
            "--out",
            "o",
            "--steps-per-epoch",
            "7",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else {
            panic!("expected train");
        };
        assert_eq!(args.steps_per_epoch, 7);
    }

    #[test]
    fn audit_population_is_skewed_but_complete() {
        let records = audit_population();
        let mut sizes = [0usize; 4];
        for r in &records {
            sizes[r.group.index()] += 1;
            r.validate().unwrap();
        }
        assert_eq!(sizes, [1000, 100, 10, 5]);
    }
}
