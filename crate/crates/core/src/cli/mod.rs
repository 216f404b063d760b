//! The `sscl` command line: data generation, training, evaluation,
//! diagnostics, probing and sweeps, each writing CSV outputs plus a
//! `key=value` manifest beside them.
//!
//! [`run`] takes the argument list and output streams explicitly so the
//! whole interface can be exercised in-process.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::contrastive::NegativeStrategy;
use crate::data::{
    known_token_fraction, probing_datasets, read_corpus, read_probe, read_sts, synth_corpus,
    synth_sts, write_probe, write_sts, ProbeKind,
};
use crate::diagnostics::{
    curves_for_sentences, token_matrix, write_curves_csv, write_matrix_csv, TaggedCurve,
};
use crate::encoder::Pooling;
use crate::error::{Error, Result};
use crate::evaluation::{probe_task, sts_eval, write_report_csv};
use crate::trainer::{
    diagnostic_sentences, load_checkpoint, manifest_text, save_checkpoint, sha256_hex, summarize,
    sweep, train, weights_digest, write_sweep_csv, DataConfig, PreparedData, RunConfig, SweepKind,
    TrainedModel, CHECKPOINT_VERSION, PACKAGE_VERSION, RECOVERY_CLIP_NORM,
};

pub const EXIT_OK: i32 = 0;
/// Runtime failures: IO, corrupt files, degenerate inputs.
pub const EXIT_FAILURE: i32 = 1;
/// Bad flags or configuration values.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_UNDEFINED_CORRELATION: i32 = 4;

/// Name of the manifest written into output directories.
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Exit status for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::UndefinedCorrelation(_) => EXIT_UNDEFINED_CORRELATION,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "sscl",
    version,
    about = "Contrastive sentence encoders with intermediate-layer negatives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus, STS pair file or probing dataset.
    GenData(GenDataArgs),
    /// Train an encoder; accepts `--<dotted.key> <value>` config overrides.
    Train(TrainArgs),
    /// Spearman correlation of a checkpoint on an STS file.
    Eval(EvalArgs),
    /// Layer-wise SetSim/TokSim curves and token similarity matrices.
    Diagnose(DiagnoseArgs),
    /// Train one model per (value, seed) and tabulate the results.
    Sweep(SweepArgs),
    /// Linear probe on frozen sentence embeddings.
    Probe(ProbeArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Corpus,
    Sts,
    Probe,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    /// Number of sentences, pairs or labelled rows.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probing task for `--kind probe`.
    #[arg(long, default_value = "sentlen")]
    task: String,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum LossKind {
    /// In-batch negatives only.
    Tcm,
    /// Adds intermediate-layer negatives.
    Sscl,
}

/// Config source shared by `train` and `sweep`.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// `key = value` config file; a run manifest works too.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    loss: Option<LossKind>,
    /// Layer whose pooled output supplies the negatives (implies sscl).
    #[arg(long, conflicts_with = "stack")]
    neg_layer: Option<usize>,
    /// Use the `c` layers below the last as negatives (implies sscl).
    #[arg(long)]
    stack: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Clip the gradient norm at 5 (divergence recovery).
    #[arg(long)]
    clip: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tab-separated `sentence_a, sentence_b, score` file.
    #[arg(long)]
    sts_file: PathBuf,
    /// Layer to pool (default: last).
    #[arg(long)]
    layer: Option<usize>,
    /// Report CSV; a manifest is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sentences, one per line (default: the synthetic test set's first sentences).
    #[arg(long, conflicts_with = "sts_file")]
    data: Option<PathBuf>,
    /// Take the distinct first sentences of an STS file instead.
    #[arg(long)]
    sts_file: Option<PathBuf>,
    /// Output directory for the curve CSV, matrices and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Layers to export token matrices for (default: all).
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Number of sentences to export token matrices for.
    #[arg(long, default_value_t = 3)]
    matrices: usize,
    /// Include the CLS token in TokSim and the matrices.
    #[arg(long)]
    include_cls: bool,
    /// Model label in the curve CSV (default: checkpoint file stem).
    #[arg(long)]
    tag: Option<String>,
    /// Seed label in the curve CSV.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    kind: SweepKind,
    /// Comma-separated values (default: the standard grid for the kind).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Result CSV; a manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// sentlen, treedepth or coordinv.
    #[arg(long)]
    task: ProbeKind,
    /// Labelled training rows (default: generated).
    #[arg(long, requires = "test_file")]
    train_file: Option<PathBuf>,
    #[arg(long, requires = "train_file")]
    test_file: Option<PathBuf>,
    /// Generated rows when no files are given; 80% train, 20% test.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

/// Default grid per sweep kind.
pub fn default_sweep_values(kind: SweepKind) -> Vec<f64> {
    match kind {
        SweepKind::Layer | SweepKind::Progressive => vec![0.0, 1.0, 2.0, 3.0],
        SweepKind::Tau => crate::contrastive::TEMPERATURE_SWEEP.to_vec(),
        SweepKind::Dim => vec![16.0, 32.0, 64.0],
        SweepKind::Batch => vec![64.0, 128.0],
    }
}

/// Splits `--<dotted.key> value` / `--<dotted.key>=value` config overrides
/// from the remaining arguments. Unknown dotted keys are rejected.
/// Dotted `key = value` config overrides.
type Overrides = Vec<(String, String)>;

fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let known = RunConfig::keys();
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg
            .strip_prefix("--")
            .filter(|f| f.split('=').next().is_some_and(|k| k.contains('.')))
        else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                (flag.to_string(), v)
            }
        };
        if !known.contains(&key) {
            return Err(Error::Config(format!("unknown flag --{key}")));
        }
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run(args: Vec<String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let (args, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    return EXIT_OK;
                }
                _ => EXIT_USAGE,
            };
            let _ = write!(err, "{e}");
            return code;
        }
    };
    let takes_overrides = matches!(cli.command, Command::Train(_) | Command::Sweep(_));
    if !overrides.is_empty() && !takes_overrides {
        let _ = writeln!(
            err,
            "error: config overrides like --{} apply only to train and sweep",
            overrides[0].0
        );
        return EXIT_USAGE;
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train_cmd(a, &overrides, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Diagnose(a) => diagnose_cmd(a, out),
        Command::Sweep(a) => sweep_cmd(a, &overrides, out),
        Command::Probe(a) => probe_cmd(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// `<file>.manifest` for file outputs.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

fn ensure_file_free(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

/// Creates `dir`; an existing non-empty directory needs `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Manifest for commands without a training config: `run.*` metadata plus
/// the command's own arguments, hashed the same way as configs.
fn command_manifest(command: &str, args: &[(&str, String)]) -> String {
    let body: String = args
        .iter()
        .map(|(k, v)| format!("run.arg.{k}={v}\n"))
        .collect();
    let hash = sha256_hex(body.as_bytes());
    let mut out = format!(
        "run.package={}\nrun.version={PACKAGE_VERSION}\nrun.checkpoint_version={CHECKPOINT_VERSION}\nrun.command={command}\nrun.config_hash={hash}\n",
        env!("CARGO_PKG_NAME")
    );
    out.push_str(&body);
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let task: ProbeKind = a.task.parse()?;
    ensure_file_free(&a.out, a.force)?;
    let mut bytes = Vec::new();
    match a.kind {
        DataKind::Corpus => bytes.extend_from_slice(synth_corpus(a.n, a.seed).as_bytes()),
        DataKind::Sts => write_sts(&mut bytes, &synth_sts(a.n, a.seed))?,
        DataKind::Probe => write_probe(&mut bytes, &probing_datasets(task, a.n, a.seed))?,
    }
    write_file(&a.out, &bytes)?;
    let kind = format!("{:?}", a.kind).to_lowercase();
    let mut args = vec![
        ("kind", kind.clone()),
        ("n", a.n.to_string()),
        ("seed", a.seed.to_string()),
    ];
    if a.kind == DataKind::Probe {
        args.push(("task", task.to_string()));
    }
    write_file(
        &manifest_path_for(&a.out),
        command_manifest("gen-data", &args).as_bytes(),
    )?;
    writeln!(out, "wrote {} {kind} rows to {}", a.n, a.out.display())?;
    Ok(())
}

/// Config file, then dotted overrides, then the named shortcut flags.
fn resolve_config(a: &ConfigArgs, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_text(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    cfg.apply(overrides)?;
    let t = &mut cfg.train;
    let num_layers = t.encoder.num_layers;
    let wants_layers = a.neg_layer.is_some() || a.stack.is_some();
    match (a.loss, wants_layers) {
        (Some(LossKind::Tcm), true) => {
            return Err(Error::Config("--neg-layer/--stack need --loss sscl".into()));
        }
        (Some(LossKind::Tcm), false) => t.loss.strategy = NegativeStrategy::none(),
        (Some(LossKind::Sscl), _) | (None, true) => {
            t.loss.strategy = match (a.neg_layer, a.stack) {
                (Some(m), _) => NegativeStrategy::single_layer(m),
                (None, Some(c)) => NegativeStrategy::progressive(c, num_layers)?,
                // The penultimate layer is the default intermediate negative.
                (None, None) => NegativeStrategy::single_layer(num_layers - 1),
            };
            if t.loss.strategy.is_empty() {
                return Err(Error::Config(
                    "--loss sscl needs at least one negative layer".into(),
                ));
            }
        }
        (None, false) => {}
    }
    if let Some(tau) = a.tau {
        t.loss.temperature = tau;
    }
    if a.clip {
        t.clip_norm = Some(RECOVERY_CLIP_NORM);
    }
    Ok(cfg)
}

fn train_cmd(a: TrainArgs, overrides: &[(String, String)], out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(&a.config, overrides)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.train.validate()?;
    prepare_dir(&a.out_dir, a.force)?;
    let data = PreparedData::from_config(&cfg.data)?;
    let outcome = train(&cfg.train, &data.corpus, &data.vocab, &data.dev)?;
    let summary = summarize(&outcome.best, &data)?;

    let dir = &a.out_dir;
    let best = TrainedModel::new(outcome.best, data.vocab.clone())?;
    save_checkpoint(&best, &dir.join("model.ckpt"))?;
    let last = TrainedModel::new(outcome.last, data.vocab.clone())?;
    save_checkpoint(&last, &dir.join("last.ckpt"))?;
    let mut log = Vec::new();
    outcome.log.write_csv(&mut log)?;
    write_file(&dir.join("runlog.csv"), &log)?;

    let hash = cfg.hash();
    let mut rows = vec![
        (
            "best_step",
            outcome.log.best_step.map_or(f64::NAN, |s| s as f64),
        ),
        ("dev_spearman", outcome.log.best_dev.unwrap_or(f64::NAN)),
        ("test_spearman", summary.test.spearman),
        ("setsim_last", summary.setsim_last()),
        ("toksim_last", summary.toksim_last()),
    ];
    if let Some(l) = outcome.log.final_loss() {
        rows.push(("final_train_loss", l));
    }
    let mut report = Vec::new();
    write_report_csv(&mut report, &rows, &hash, cfg.train.seed)?;
    write_file(&dir.join("report.csv"), &report)?;
    let extra = [("run.weights_sha256", weights_digest(&best.encoder))];
    write_file(
        &dir.join(MANIFEST_FILE),
        manifest_text(&cfg, "train", &extra).as_bytes(),
    )?;

    writeln!(
        out,
        "trained {} steps ({}): best dev spearman {:.4} at step {}, test spearman {:.4}",
        cfg.train.steps,
        cfg.train.loss.strategy,
        outcome.log.best_dev.unwrap_or(f64::NAN),
        outcome
            .log
            .best_step
            .map_or_else(|| "-".to_string(), |s| s.to_string()),
        summary.test.spearman
    )?;
    writeln!(out, "outputs in {}", dir.display())?;
    Ok(())
}

fn checkpoint_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(o) = &a.out {
        ensure_file_free(o, a.force)?;
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let pairs = read_sts(&a.sts_file)?;
    let report = sts_eval(&model.encoder, &model.vocab, &pairs, a.layer)?;
    writeln!(
        out,
        "spearman {:.6} over {} pairs (layer {}, {} pooling)",
        report.spearman, report.n_pairs, report.layer, report.pooling
    )?;
    if let Some(o) = &a.out {
        let args = [
            ("checkpoint", a.checkpoint.display().to_string()),
            ("checkpoint_sha256", checkpoint_digest(&a.checkpoint)?),
            ("sts_file", a.sts_file.display().to_string()),
            ("layer", report.layer.to_string()),
        ];
        let manifest = command_manifest("eval", &args);
        let hash = manifest_hash(&manifest);
        let mut csv = Vec::new();
        write_report_csv(&mut csv, &report.csv_rows(), &hash, 0)?;
        write_file(o, &csv)?;
        write_file(&manifest_path_for(o), manifest.as_bytes())?;
    }
    Ok(())
}

fn manifest_hash(manifest: &str) -> String {
    manifest
        .lines()
        .find_map(|l| l.strip_prefix("run.config_hash="))
        .unwrap_or_default()
        .to_string()
}

/// Maximum share of out-of-vocabulary tokens before diagnose refuses the data.
const MAX_OOV_FRACTION: f64 = 0.5;

fn diagnose_cmd(a: DiagnoseArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let sentences: Vec<String> = match (&a.data, &a.sts_file) {
        (Some(p), _) => read_corpus(p)?,
        (None, Some(p)) => diagnostic_sentences(&read_sts(p)?)
            .into_iter()
            .map(str::to_string)
            .collect(),
        (None, None) => {
            let d = DataConfig::default();
            diagnostic_sentences(&synth_sts(d.test_size, d.test_seed))
                .into_iter()
                .map(str::to_string)
                .collect()
        }
    };
    let known = known_token_fraction(&sentences, &model.vocab);
    if known < 1.0 - MAX_OOV_FRACTION {
        return Err(Error::Config(format!(
            "only {:.0}% of the data's tokens are in the checkpoint vocabulary; data and checkpoint do not match",
            known * 100.0
        )));
    }
    let num_layers = model.encoder.config().num_layers;
    let layers = a
        .layers
        .clone()
        .unwrap_or_else(|| (0..=num_layers).collect());
    if let Some(&bad) = layers.iter().find(|&&l| l > num_layers) {
        return Err(Error::Config(format!(
            "--layers {bad} exceeds the last layer {num_layers}"
        )));
    }
    prepare_dir(&a.out, a.force)?;
    let tag = a.tag.clone().unwrap_or_else(|| {
        a.checkpoint
            .file_stem()
            .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
    });
    // Curves for both pooling modes; the summary line reports the training one.
    let train_pooling = model.encoder.config().pooling;
    let mut headline = (f64::NAN, f64::NAN);
    for pooling in [Pooling::Avg, Pooling::Cls] {
        let (setsim, toksim) = curves_for_sentences(
            &model.encoder,
            &model.vocab,
            &sentences,
            pooling,
            a.include_cls,
        )?;
        if pooling == train_pooling {
            headline = (
                setsim.last().unwrap_or(f64::NAN),
                toksim.last().unwrap_or(f64::NAN),
            );
        }
        let mut curves = Vec::new();
        write_curves_csv(
            &mut curves,
            &[
                TaggedCurve {
                    curve: &setsim,
                    model_tag: &tag,
                    seed: a.seed,
                },
                TaggedCurve {
                    curve: &toksim,
                    model_tag: &tag,
                    seed: a.seed,
                },
            ],
        )?;
        write_file(&a.out.join(format!("curves_{pooling}.csv")), &curves)?;
    }
    let mut written = 0;
    for (i, s) in sentences.iter().take(a.matrices).enumerate() {
        for &l in &layers {
            let m = token_matrix(&model.encoder, &model.vocab, s, l, a.include_cls)?;
            let mut csv = Vec::new();
            write_matrix_csv(&mut csv, &m)?;
            write_file(&a.out.join(format!("matrix_s{i}_l{l}.csv")), &csv)?;
            written += 1;
        }
    }
    let mut args = vec![
        ("checkpoint", a.checkpoint.display().to_string()),
        ("checkpoint_sha256", checkpoint_digest(&a.checkpoint)?),
        (
            "layers",
            layers
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("matrices", a.matrices.to_string()),
        ("include_cls", a.include_cls.to_string()),
        ("tag", tag.clone()),
        ("seed", a.seed.to_string()),
    ];
    if let Some(p) = &a.data {
        args.push(("data", p.display().to_string()));
    }
    if let Some(p) = &a.sts_file {
        args.push(("sts_file", p.display().to_string()));
    }
    write_file(
        &a.out.join(MANIFEST_FILE),
        command_manifest("diagnose", &args).as_bytes(),
    )?;
    writeln!(
        out,
        "{} sentences ({train_pooling} pooling): setsim(last pair) {:.4}, toksim(last layer) {:.4}; {written} matrices in {}",
        sentences.len(),
        headline.0,
        headline.1,
        a.out.display()
    )?;
    Ok(())
}

fn sweep_cmd(a: SweepArgs, overrides: &[(String, String)], out: &mut dyn Write) -> Result<()> {
    ensure_file_free(&a.out, a.force)?;
    let base = resolve_config(&a.config, overrides)?;
    base.train.validate()?;
    let values = a
        .values
        .clone()
        .unwrap_or_else(|| default_sweep_values(a.kind));
    let data = PreparedData::from_config(&base.data)?;
    let table = sweep(a.kind, &values, &base, &a.seeds, &data)?;
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &table)?;
    write_file(&a.out, &csv)?;
    let extra = [
        ("run.sweep_kind", a.kind.to_string()),
        (
            "run.sweep_values",
            values
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        ),
        (
            "run.sweep_seeds",
            a.seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        ),
    ];
    write_file(
        &manifest_path_for(&a.out),
        manifest_text(&base, "sweep", &extra).as_bytes(),
    )?;
    let failed = table.cells.iter().filter(|c| !c.ok()).count();
    writeln!(
        out,
        "{} cells ({failed} failed) written to {}",
        table.cells.len(),
        a.out.display()
    )?;
    for c in table.cells.iter().filter(|c| !c.ok()) {
        writeln!(
            out,
            "  failed: {}={} seed {}: {}",
            c.kind,
            c.value,
            c.seed,
            c.error.as_deref().unwrap_or("")
        )?;
    }
    Ok(())
}

/// Fraction of generated probe rows used for training.
const PROBE_TRAIN_FRACTION: f64 = 0.8;

fn probe_cmd(a: ProbeArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(o) = &a.out {
        ensure_file_free(o, a.force)?;
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let (train_rows, test_rows) = match (&a.train_file, &a.test_file) {
        (Some(tr), Some(te)) => (read_probe(tr)?, read_probe(te)?),
        _ => {
            if a.n < 2 {
                return Err(Error::Config("--n must be at least 2".into()));
            }
            let mut rows = probing_datasets(a.task, a.n, a.seed);
            let n_train = ((a.n as f64 * PROBE_TRAIN_FRACTION).round() as usize).clamp(1, a.n - 1);
            let test = rows.split_off(n_train);
            (rows, test)
        }
    };
    let report = probe_task(
        &model.encoder,
        &model.vocab,
        a.task,
        &train_rows,
        &test_rows,
    )?;
    writeln!(
        out,
        "{} accuracy {:.4} (train {:.4}, {} train / {} test rows)",
        a.task, report.accuracy, report.train_accuracy, report.n_train, report.n_test
    )?;
    if let Some(o) = &a.out {
        let mut args = vec![
            ("checkpoint", a.checkpoint.display().to_string()),
            ("checkpoint_sha256", checkpoint_digest(&a.checkpoint)?),
            ("task", a.task.to_string()),
        ];
        match (&a.train_file, &a.test_file) {
            (Some(tr), Some(te)) => {
                args.push(("train_file", tr.display().to_string()));
                args.push(("test_file", te.display().to_string()));
            }
            _ => {
                args.push(("n", a.n.to_string()));
                args.push(("seed", a.seed.to_string()));
            }
        }
        let manifest = command_manifest("probe", &args);
        let mut csv = Vec::new();
        write_report_csv(
            &mut csv,
            &report.csv_rows(),
            &manifest_hash(&manifest),
            a.seed,
        )?;
        write_file(o, &csv)?;
        write_file(&manifest_path_for(o), manifest.as_bytes())?;
    }
    Ok(())
}
