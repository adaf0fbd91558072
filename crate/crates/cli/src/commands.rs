//! Subcommand implementations: resolve settings (flag > config file >
//! default), call into yt8m-core, report. Progress notes go to stderr;
//! machine-readable result lines go to stdout.

use std::error::Error;
use std::fs;
use std::io::Write;
use std::path::Path;

use yt8m_core::bench;
use yt8m_core::datamodel::{DatasetSchema, Example, PredictionList};
use yt8m_core::ensemble::{self, EnsembleKind, EnsembleSpec, MemberSource};
use yt8m_core::ingest::{
    encode_video_example, write_native, DatasetHandle, SyntheticConfig, TfRecordWriter,
};
use yt8m_core::metrics;
use yt8m_core::modelzoo::{self, ArchitectureSpec, OutputActivation};
use yt8m_core::nncore::{load_checkpoint, ModelGraph, OptimizerConfig, RegConfig, Scalar};
use yt8m_core::rng;
use yt8m_core::submission::{parse_submission, write_submission};
use yt8m_core::training::{self, LossKind, TrainConfig};

use crate::config::{pick, pick_opt, FileConfig, TrainSection};
use crate::members::{MemberEntry, MembersFile, MetaEntry};
use crate::{
    AvgFilesArgs, AvgModelsArgs, BenchArgs, BenchOp, DataFormat, EvalArgs, GenDataArgs, InferArgs,
    SchemaArgs, StackArgs, TrainArgs,
};

pub type CmdResult = Result<(), Box<dyn Error>>;

// Defaults keyed to the desk-scale teacher experiment; real-dataset
// dimensions are a flag away.
const DEFAULT_VIDEOS: u64 = 1000;
const DEFAULT_CLASSES: u32 = 25;
const DEFAULT_RGB_DIM: usize = 64;
const DEFAULT_AUDIO_DIM: usize = 16;
const DEFAULT_SPARSITY: f64 = 0.3;
const DEFAULT_NOISE: f64 = 0.1;
const DEFAULT_K: usize = 20;
const DEFAULT_EVAL_EVERY: u64 = 100;
const SCORE_BATCH: usize = 256;
const BENCH_ROWS: usize = 700_640;
const BENCH_FILES: usize = 3;

/// Resolved global flags.
pub struct Ctx {
    pub seed: u64,
    pub float32: bool,
    pub quiet: bool,
}

impl Ctx {
    fn note(&self, msg: std::fmt::Arguments<'_>) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

/// Fallback schema for TFRecord inputs (native files self-describe).
fn schema_from(args: &SchemaArgs, file: &FileConfig) -> Result<DatasetSchema, Box<dyn Error>> {
    let g = &file.gen_data;
    let classes = pick(args.classes, g.classes, DEFAULT_CLASSES);
    if classes == 0 {
        return Err("--classes must be ≥ 1".into());
    }
    Ok(DatasetSchema::new(
        classes,
        pick(args.rgb_dim, g.rgb_dim, DEFAULT_RGB_DIM),
        pick(args.audio_dim, g.audio_dim, DEFAULT_AUDIO_DIM),
    ))
}

fn load_dataset(
    path: &Path,
    schema_args: &SchemaArgs,
    file: &FileConfig,
) -> Result<(DatasetSchema, Vec<Example>), Box<dyn Error>> {
    let handle = DatasetHandle::open_auto(path, schema_from(schema_args, file)?)?;
    let schema = handle.schema();
    Ok((schema, handle.load()?))
}

fn loss_for(activation: OutputActivation) -> LossKind {
    match activation {
        OutputActivation::Softmax => LossKind::SoftmaxCe,
        OutputActivation::Sigmoid => LossKind::SigmoidCe,
    }
}

/// Optimizer settings shared by every training path.
struct TrainOpts {
    lr: f64,
    batch: usize,
    steps: u64,
    eval_every: u64,
}

impl TrainOpts {
    fn resolve(
        lr: Option<f64>,
        batch: Option<usize>,
        steps: Option<u64>,
        eval_every: Option<u64>,
        t: &TrainSection,
    ) -> TrainOpts {
        let d = OptimizerConfig::default();
        TrainOpts {
            lr: pick(lr, t.lr, d.base_learning_rate),
            batch: pick(batch, t.batch, d.batch_size),
            steps: pick(steps, t.steps, d.max_steps),
            eval_every: pick(eval_every, t.eval_every, DEFAULT_EVAL_EVERY),
        }
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            base_learning_rate: self.lr,
            batch_size: self.batch,
            max_steps: self.steps,
            ..OptimizerConfig::default()
        }
    }
}

pub fn gen_data(args: &GenDataArgs, file: &FileConfig, ctx: &Ctx) -> CmdResult {
    let g = &file.gen_data;
    let videos = pick(args.videos, g.videos, DEFAULT_VIDEOS);
    // Each video is generated from a stream derived off its index, so a
    // skipped window is identical to the tail of a longer run.
    let skip = pick(args.skip, g.skip, 0);
    let cfg = SyntheticConfig {
        num_videos: skip + videos,
        num_classes: pick(args.classes, g.classes, DEFAULT_CLASSES),
        rgb_dim: pick(args.rgb_dim, g.rgb_dim, DEFAULT_RGB_DIM),
        audio_dim: pick(args.audio_dim, g.audio_dim, DEFAULT_AUDIO_DIM),
        seed: ctx.seed,
        teacher_sparsity: pick(args.sparsity, g.sparsity, DEFAULT_SPARSITY),
        noise_std: pick(args.noise, g.noise, DEFAULT_NOISE),
    };
    cfg.validate()?;
    let format = match args.format {
        Some(f) => f,
        None => match g.format.as_deref() {
            None | Some("native") => DataFormat::Native,
            Some("tfrecord") => DataFormat::Tfrecord,
            Some(other) => return Err(format!("unknown format {other:?} in config").into()),
        },
    };
    let window = cfg.iter().skip(skip as usize);
    let n = match format {
        DataFormat::Native => write_native(&args.out, cfg.schema(), window)?,
        DataFormat::Tfrecord => {
            let mut w = TfRecordWriter::create(&args.out)?;
            let mut n = 0u64;
            for ex in window {
                w.write_record(&encode_video_example(&ex))?;
                n += 1;
            }
            w.finish()?;
            n
        }
    };
    ctx.note(format_args!(
        "wrote {n} examples ({} classes, {}+{} features, seed {}) to {}",
        cfg.num_classes,
        cfg.rgb_dim,
        cfg.audio_dim,
        cfg.seed,
        args.out.display()
    ));
    if format == DataFormat::Tfrecord {
        ctx.note(format_args!(
            "note: TFRecord carries no schema; read it back with --classes {} --rgb-dim {} --audio-dim {}",
            cfg.num_classes, cfg.rgb_dim, cfg.audio_dim
        ));
    }
    Ok(())
}

pub fn train_cmd<E: Scalar>(args: &TrainArgs, file: &FileConfig, ctx: &Ctx) -> CmdResult {
    let t = &file.train;
    let model = match pick_opt(args.model.clone(), t.model.clone()) {
        Some(m) => m,
        None => return Err("train needs --model (or [train] model in the config file)".into()),
    };
    let mut spec = ArchitectureSpec::new(model.parse()?);
    if let Some(m) = pick_opt(args.mixtures, t.mixtures) {
        spec.num_mixtures = m;
    }
    if let Some(q) = pick_opt(args.keep_prob, t.keep_prob) {
        spec.keep_prob = q;
    }
    // clap rejects --l1 with --l2; a config file could still smuggle both.
    match (pick_opt(args.l1, t.l1), pick_opt(args.l2, t.l2)) {
        (Some(_), Some(_)) => return Err("choose one of --l1 / --l2, not both".into()),
        (Some(p), None) => spec.reg = RegConfig::l1(p),
        (None, Some(p)) => spec.reg = RegConfig::l2(p),
        (None, None) => {}
    }

    let (schema, data) = load_dataset(&args.data, &args.schema, file)?;
    let val = match &args.val {
        Some(p) => Some(load_dataset(p, &args.schema, file)?.1),
        None => None,
    };
    let input_dim = schema.feature_dim();
    let classes = schema.vocab.num_classes as usize;

    let opts = TrainOpts::resolve(args.lr, args.batch, args.steps, args.eval_every, t);
    let mut graph = modelzoo::build::<E>(&spec, input_dim, classes, ctx.seed)?;
    ctx.note(format_args!(
        "training {model} on {} examples ({input_dim} features, {classes} classes, \
         {} parameters, lr {}, batch {}, {} steps)",
        data.len(),
        graph.param_count(),
        opts.lr,
        opts.batch,
        opts.steps
    ));

    let cfg = TrainConfig {
        optimizer: opts.optimizer(),
        loss: loss_for(spec.output_activation),
        include_validation: args.include_validation,
        eval_every: opts.eval_every,
        shuffle_seed: ctx.seed,
        checkpoint_path: Some(args.checkpoint.clone()),
    };
    let report = training::train(&mut graph, &data, val.as_deref(), &cfg)?;

    if let Some(path) = &args.report {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    let final_loss = report.loss_curve.last().map(|&(_, l)| l);
    let final_gap = report.train_gap_curve.last().map(|&(_, g)| g);
    ctx.note(format_args!(
        "done: {} steps, final loss {}, train GAP {}; checkpoint -> {}",
        report.steps_run,
        final_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
        final_gap.map_or("n/a".into(), |g| format!("{g:.5}")),
        args.checkpoint.display()
    ));

    // Held-out GAP, unless --include-validation folded the split in.
    if let (Some(val), false) = (&val, args.include_validation) {
        let preds = training::score_examples(&graph, val, DEFAULT_K, SCORE_BATCH)?;
        let gap = metrics::gap_at_k(&preds, &training::truth_map(val), DEFAULT_K)?.gap;
        ctx.note(format_args!("held-out GAP@{DEFAULT_K} {gap:.5}"));
    }
    Ok(())
}

pub fn infer_cmd<E: Scalar>(args: &InferArgs, file: &FileConfig, ctx: &Ctx) -> CmdResult {
    let k = pick(args.k, file.infer.k, DEFAULT_K);
    if k == 0 {
        return Err("--k must be ≥ 1".into());
    }
    let graph: ModelGraph<E> = load_checkpoint(&args.checkpoint)?;
    let (_, data) = load_dataset(&args.data, &args.schema, file)?;
    let preds = training::score_examples(&graph, &data, k, SCORE_BATCH)?;
    let rows = write_submission(&args.out, &preds, args.round6)?;
    ctx.note(format_args!(
        "wrote {rows} rows x top-{k} to {}",
        args.out.display()
    ));
    Ok(())
}

pub fn eval_cmd(args: &EvalArgs, file: &FileConfig, ctx: &Ctx) -> CmdResult {
    let k = pick(args.k, file.eval.k, DEFAULT_K);
    if k == 0 {
        return Err("--k must be ≥ 1".into());
    }
    let (schema, truth_examples) = load_dataset(&args.truth, &args.schema, file)?;
    let truth = training::truth_map(&truth_examples);
    let preds: Vec<PredictionList> =
        parse_submission(&args.pred, Some(schema.vocab))?.collect::<Result<_, _>>()?;
    let n = preds.len();
    let report = metrics::gap_at_k(&preds, &truth, k)?;
    ctx.note(format_args!(
        "pooled {} predictions over {} positives at k={k}",
        report.num_predictions_pooled, report.total_positives
    ));
    println!("RESULT gap={} n={n}", report.gap);
    Ok(())
}

pub fn avg_files_cmd(args: &AvgFilesArgs, file: &FileConfig, ctx: &Ctx) -> CmdResult {
    let k = pick(args.k, file.ensemble.k, DEFAULT_K);
    let spec = EnsembleSpec {
        kind: EnsembleKind::AverageFiles,
        members: args.files.iter().cloned().map(MemberSource::File).collect(),
        meta: None,
        k,
    };
    spec.validate()?;
    let report = ensemble::average_files(&args.files, k, &args.out)?;
    if report.video_set_mismatch {
        ctx.note(format_args!(
            "warning: inputs do not cover the same video set; absent labels averaged as zero"
        ));
    }
    ctx.note(format_args!(
        "averaged {} files -> {} rows -> {}",
        report.files,
        report.rows_written,
        args.out.display()
    ));
    Ok(())
}

/// Load checkpoint members and build architecture members. Fresh members
/// are trained here when `train_fresh` is set (model averaging); stacking
/// leaves them untrained and lets the fused graph train end to end.
#[allow(clippy::too_many_arguments)]
fn prepare_members<E: Scalar>(
    entries: &[MemberEntry],
    train_data: &[Example],
    input_dim: usize,
    classes: usize,
    opts: &TrainOpts,
    ctx: &Ctx,
    train_fresh: bool,
) -> Result<Vec<ModelGraph<E>>, Box<dyn Error>> {
    let mut graphs = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        match entry {
            MemberEntry::Checkpoint { checkpoint } => {
                ctx.note(format_args!(
                    "member {}/{}: loading {}",
                    i + 1,
                    entries.len(),
                    checkpoint.display()
                ));
                graphs.push(load_checkpoint::<E>(checkpoint)?);
            }
            MemberEntry::Architecture { model, .. } => {
                let spec = entry.architecture()?.expect("architecture member");
                // Distinct derived seeds keep fresh members from being
                // clones of each other.
                let seed = entry
                    .seed()
                    .unwrap_or_else(|| rng::derive(ctx.seed, 100 + i as u64));
                let mut g = modelzoo::build::<E>(&spec, input_dim, classes, seed)?;
                if train_fresh {
                    ctx.note(format_args!(
                        "member {}/{}: training {model} (seed {seed}, {} steps)",
                        i + 1,
                        entries.len(),
                        opts.steps
                    ));
                    let cfg = TrainConfig {
                        optimizer: opts.optimizer(),
                        loss: loss_for(spec.output_activation),
                        include_validation: false,
                        eval_every: opts.eval_every,
                        shuffle_seed: ctx.seed,
                        checkpoint_path: None,
                    };
                    training::train(&mut g, train_data, None, &cfg)?;
                } else {
                    ctx.note(format_args!(
                        "member {}/{}: built {model} (seed {seed})",
                        i + 1,
                        entries.len()
                    ));
                }
                graphs.push(g);
            }
        }
    }
    Ok(graphs)
}

fn read_members_file(path: &Path) -> Result<MembersFile, Box<dyn Error>> {
    let text = fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("members {}: {e}", path.display())))?;
    let mf: MembersFile =
        serde_json::from_str(&text).map_err(|e| format!("members {}: {e}", path.display()))?;
    Ok(mf)
}

fn validate_ensemble(mf: &MembersFile, kind: EnsembleKind, k: usize) -> CmdResult {
    let mut sources = Vec::with_capacity(mf.members.len());
    for m in &mf.members {
        sources.push(match m {
            MemberEntry::Checkpoint { checkpoint } => MemberSource::File(checkpoint.clone()),
            e => MemberSource::Architecture(e.architecture()?.expect("architecture member")),
        });
    }
    let meta = match &mf.meta {
        Some(MetaEntry::Architecture { model, .. }) => Some(ArchitectureSpec::new(model.parse()?)),
        // The default head is not a zoo architecture; presence is checked
        // against the kind below.
        Some(MetaEntry::Head { .. }) if kind != EnsembleKind::StackModels => {
            return Err("only stacking uses a meta network".into())
        }
        _ => None,
    };
    EnsembleSpec {
        kind,
        members: sources,
        meta,
        k,
    }
    .validate()?;
    Ok(())
}

pub fn avg_models_cmd<E: Scalar>(args: &AvgModelsArgs, file: &FileConfig, ctx: &Ctx) -> CmdResult {
    let mf = read_members_file(&args.members)?;
    let k = pick(args.k, mf.k.or(file.ensemble.k), DEFAULT_K);
    validate_ensemble(&mf, EnsembleKind::AverageModels, k)?;

    let (schema, data) = load_dataset(&args.data, &args.schema, file)?;
    let opts = TrainOpts::resolve(args.lr, args.batch, args.steps, None, &file.train);
    let graphs = prepare_members::<E>(
        &mf.members,
        &data,
        schema.feature_dim(),
        schema.vocab.num_classes as usize,
        &opts,
        ctx,
        true,
    )?;

    let score_data = match &args.score {
        Some(p) => load_dataset(p, &args.schema, file)?.1,
        None => data,
    };
    let preds = ensemble::score_averaged(&graphs, &score_data, k, SCORE_BATCH)?;
    let rows = write_submission(&args.out, &preds, false)?;
    ctx.note(format_args!(
        "averaged {} members -> {rows} rows -> {}",
        graphs.len(),
        args.out.display()
    ));
    Ok(())
}

pub fn stack_cmd<E: Scalar>(args: &StackArgs, file: &FileConfig, ctx: &Ctx) -> CmdResult {
    let mf = read_members_file(&args.members)?;
    let k = pick(args.k, mf.k.or(file.ensemble.k), DEFAULT_K);
    validate_ensemble(&mf, EnsembleKind::StackModels, k)?;

    let (schema, data) = load_dataset(&args.data, &args.schema, file)?;
    let classes = schema.vocab.num_classes as usize;
    let opts = TrainOpts::resolve(args.lr, args.batch, args.steps, None, &file.train);
    let members = prepare_members::<E>(
        &mf.members,
        &data,
        schema.feature_dim(),
        classes,
        &opts,
        ctx,
        false,
    )?;
    let concat: usize = members.iter().map(|m| m.output_dim()).sum();

    let (meta, loss): (ModelGraph<E>, LossKind) = match &mf.meta {
        Some(MetaEntry::Architecture { model, seed }) => {
            let spec = ArchitectureSpec::new(model.parse()?);
            let seed = seed.unwrap_or_else(|| rng::derive(ctx.seed, 9999));
            (
                modelzoo::build(&spec, concat, classes, seed)?,
                loss_for(spec.output_activation),
            )
        }
        Some(MetaEntry::Head {
            hidden,
            keep_prob,
            seed,
        }) => {
            let seed = seed.unwrap_or_else(|| rng::derive(ctx.seed, 9999));
            (
                ensemble::default_meta_with(
                    concat,
                    classes,
                    hidden.unwrap_or(2048),
                    keep_prob.unwrap_or(0.5),
                    seed,
                )?,
                LossKind::SigmoidCe,
            )
        }
        None => (
            ensemble::default_meta(concat, classes, rng::derive(ctx.seed, 9999))?,
            LossKind::SigmoidCe,
        ),
    };

    let mut fused = ensemble::stack_graphs(&members, &meta, args.freeze_members)?;
    ctx.note(format_args!(
        "stack: {} members -> {concat} meta inputs, {} parameters{}",
        members.len(),
        fused.param_count(),
        if args.freeze_members {
            ", members frozen"
        } else {
            ""
        }
    ));

    let cfg = TrainConfig {
        optimizer: opts.optimizer(),
        loss,
        include_validation: false,
        eval_every: opts.eval_every,
        shuffle_seed: ctx.seed,
        checkpoint_path: args.checkpoint.clone(),
    };
    let report = training::train(&mut fused, &data, None, &cfg)?;
    ctx.note(format_args!(
        "trained stack for {} steps, final loss {}",
        report.steps_run,
        report
            .loss_curve
            .last()
            .map_or("n/a".into(), |&(_, l)| format!("{l:.6}"))
    ));

    let score_data = match &args.score {
        Some(p) => load_dataset(p, &args.schema, file)?.1,
        None => data,
    };
    let preds = training::score_examples(&fused, &score_data, k, SCORE_BATCH)?;
    let rows = write_submission(&args.out, &preds, false)?;
    ctx.note(format_args!("wrote {rows} rows -> {}", args.out.display()));
    Ok(())
}

pub fn bench_cmd(args: &BenchArgs, file: &FileConfig, ctx: &Ctx) -> CmdResult {
    let b = &file.bench;
    let rows = pick(args.rows, b.rows, BENCH_ROWS);
    let k = pick(args.k, b.k, DEFAULT_K);
    if rows == 0 || k == 0 {
        return Err("bench needs --rows ≥ 1 and --k ≥ 1".into());
    }
    let result = match args.op {
        BenchOp::Eval => bench::bench_eval(rows, k, ctx.seed)?,
        BenchOp::AvgFiles => {
            let files = pick(args.files, b.files, BENCH_FILES);
            if files < 2 {
                return Err("--files must be ≥ 2 for avg-files".into());
            }
            bench::bench_avg_files(rows, k, files, ctx.seed)?
        }
    };
    println!("{result}");
    if let Some(path) = &args.csv {
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        if fresh {
            writeln!(f, "{}", bench::BenchResult::CSV_HEADER)?;
        }
        writeln!(f, "{}", result.csv_row())?;
    }
    Ok(())
}
