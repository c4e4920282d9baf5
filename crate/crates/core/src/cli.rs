//! Command-line front end: `gen`, `train`, `score`, `eval`, `ablate` and
//! `export`. Every command writes a `manifest.json` next to its outputs
//! with the resolved configuration and the SHA-256 of each input.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_jsonl, save_jsonl, split_records, SyntheticSpec};
use crate::error::{QamoError, Result};
use crate::model::{write_atomic, Checkpoint};
use crate::numerics::SeededRng;
use crate::scoring::{
    export_distributions, export_embeddings, load_inference_jsonl, score_dataset,
    write_embeddings_csv, write_histogram_csv, InferenceRecord, ScoreReport, ScoreStrategy, Scorer,
    POLARITY,
};
use crate::training::{train, write_training_outputs, LossKind, TrainConfig, TrainReport};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "QAMO_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_DIVERGENCE: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "qamo",
    version,
    about = "Quality-aware multi-centroid one-class learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and split it into train/test JSONL.
    Gen(GenArgs),
    /// Train a model and write checkpoint, report and metrics.
    Train(TrainArgs),
    /// Score a JSONL dataset with a checkpoint.
    Score(ScoreArgs),
    /// Compute EER from a score CSV.
    Eval(EvalArgs),
    /// Run the loss/inference ablation matrix on one dataset.
    Ablate(AblateArgs),
    /// Export score histograms and embeddings as CSV.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Output directory (default: $QAMO_OUT_DIR/<command> or ./qamo-out/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config value, e.g. `--set hyper.lambda=0` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Synthetic dataset spec (JSON); defaults to the built-in four-cluster layout.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training config (JSON); every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// labeled | max | ensemble | head
    #[arg(long, default_value = "ensemble")]
    strategy: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Score CSV written by `score`.
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Base training config shared by all arms.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ensemble")]
    strategy: String,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[command(flatten)]
    common: Common,
}

/// Exit code for an error category.
pub fn exit_code(err: &QamoError) -> i32 {
    match err {
        QamoError::Config(_) | QamoError::InvalidPolicy(_) | QamoError::InvalidScheme(_) => {
            EXIT_CONFIG
        }
        QamoError::Io { .. } => EXIT_IO,
        QamoError::DivergenceDetected { .. } => EXIT_DIVERGENCE,
        QamoError::Record { source, .. } => exit_code(source),
        _ => EXIT_FAILURE,
    }
}

fn category(code: i32) -> &'static str {
    match code {
        EXIT_CONFIG => "config error",
        EXIT_IO => "io error",
        EXIT_DIVERGENCE => "divergence",
        _ => "error",
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("qamo: {}: {e}", category(code));
            code
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Export(a) => cmd_export(a),
    }
}

fn out_dir(common: &Common, command: &str) -> Result<PathBuf> {
    let dir = match &common.out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("qamo-out"))
            .join(command),
    };
    fs::create_dir_all(&dir).map_err(|e| QamoError::io(&dir, e))?;
    Ok(dir)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| QamoError::io(path, e))
}

/// Loads a JSON config (or the type's default), applies `key=value`
/// overrides on dotted paths, and deserializes strictly.
pub fn resolve_config<T>(path: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: DeserializeOwned + Serialize + Default,
{
    let mut value: Value = match path {
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| QamoError::Config(format!("{}: {e}", p.display())))?,
        None => serde_json::to_value(T::default())?,
    };
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    serde_json::from_value(value).map_err(|e| QamoError::Config(e.to_string()))
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| QamoError::Config(format!("override `{spec}` is not KEY=VALUE")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            QamoError::Config(format!("`{key}`: `{part}` is not inside an object"))
        })?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_owned(), parsed);
            return Ok(());
        }
        node = obj
            .entry((*part).to_owned())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| QamoError::io(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: Value,
    inputs: &[&Path],
    args: Value,
) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| Ok(json!({ "path": p.display().to_string(), "sha256": sha256_file(p)? })))
        .collect::<Result<Vec<_>>>()?;
    let manifest = json!({
        "command": command,
        "qamo_version": env!("CARGO_PKG_VERSION"),
        "prng": SeededRng::ALGORITHM,
        "polarity": POLARITY,
        "args": args,
        "config": config,
        "inputs": inputs,
    });
    write_json(&dir.join("manifest.json"), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_scores(path: &Path, report: &ScoreReport) -> Result<()> {
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_atomic(path, &buf)
}

fn summary_json(report: &ScoreReport) -> Value {
    json!({
        "strategy": report.strategy,
        "records": report.entries.len(),
        "polarity": POLARITY,
        "summary": report.summary,
    })
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let dir = out_dir(&a.common, "gen")?;
    let mut overrides = a.common.overrides.clone();
    if let Some(seed) = a.common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let spec: SyntheticSpec = match &a.spec {
        Some(p) => resolve_config_with(p, &overrides)?,
        None => {
            let mut v = serde_json::to_value(SyntheticSpec::four_cluster(0, 200))?;
            for ov in &overrides {
                apply_override(&mut v, ov)?;
            }
            serde_json::from_value(v).map_err(|e| QamoError::Config(e.to_string()))?
        }
    };
    spec.validate()
        .map_err(|e| QamoError::Config(e.to_string()))?;
    let records = generate_synthetic(&spec)?;
    let (train_set, test_set) = split_records(
        &records,
        a.test_fraction,
        &mut SeededRng::new(spec.seed).fork(1),
    )
    .map_err(|e| QamoError::Config(e.to_string()))?;
    save_jsonl(dir.join("train.jsonl"), &train_set)?;
    save_jsonl(dir.join("test.jsonl"), &test_set)?;
    write_json(&dir.join("spec.json"), &spec)?;
    let inputs: Vec<&Path> = a.spec.iter().map(PathBuf::as_path).collect();
    write_manifest(
        &dir,
        "gen",
        serde_json::to_value(&spec)?,
        &inputs,
        json!({ "test_fraction": a.test_fraction }),
    )?;
    println!(
        "wrote {} train / {} test records to {}",
        train_set.len(),
        test_set.len(),
        dir.display()
    );
    Ok(())
}

fn resolve_config_with<T: DeserializeOwned>(path: &Path, overrides: &[String]) -> Result<T> {
    let mut v: Value = serde_json::from_str(&read_text(path)?)
        .map_err(|e| QamoError::Config(format!("{}: {e}", path.display())))?;
    for ov in overrides {
        apply_override(&mut v, ov)?;
    }
    serde_json::from_value(v).map_err(|e| QamoError::Config(e.to_string()))
}

fn train_config(path: Option<&Path>, common: &Common) -> Result<TrainConfig> {
    let mut config: TrainConfig = resolve_config(path, &common.overrides)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let dir = out_dir(&a.common, "train")?;
    let config = train_config(a.config.as_deref(), &a.common)?;
    let records = load_jsonl(&a.data, &config.quality)?;
    let (mut report, checkpoint) = train(&records, &config)?;
    write_training_outputs(&dir, &mut report, &checkpoint)?;
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(a.config.as_deref());
    write_manifest(
        &dir,
        "train",
        serde_json::to_value(&config)?,
        &inputs,
        json!({}),
    )?;
    print_epoch_summary(&report);
    println!("checkpoint: {}", dir.join("checkpoint.json").display());
    Ok(())
}

fn print_epoch_summary(report: &TrainReport) {
    if let Some(last) = report.epochs.last() {
        let fmt = |v: Option<f64>| v.map_or("-".to_owned(), |x| format!("{:.4}", x));
        println!(
            "epoch {}: loss {:.6}  val EER ensemble {}  max {}  head {}  centroid cos {}",
            last.epoch,
            last.train_loss,
            fmt(last.val_eer_ensemble),
            fmt(last.val_eer_max),
            fmt(last.val_eer_head),
            fmt(last.centroid_cosine),
        );
    }
}

fn parse_strategy(s: &str) -> Result<ScoreStrategy> {
    s.parse()
        .map_err(|e: QamoError| QamoError::Config(e.to_string()))
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let dir = out_dir(&a.common, "score")?;
    let strategy = parse_strategy(&a.strategy)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let records = load_inference_jsonl(&a.data, &ck.policy)?;
    let report = score_dataset(&records, &Scorer::from_checkpoint(&ck), strategy)?;
    write_scores(&dir.join("scores.csv"), &report)?;
    write_json(&dir.join("summary.json"), &summary_json(&report))?;
    write_manifest(
        &dir,
        "score",
        json!({ "strategy": strategy }),
        &[a.checkpoint.as_path(), a.data.as_path()],
        json!({}),
    )?;
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &ScoreReport) {
    match &report.summary {
        Some(s) => println!(
            "{} scores ({}, {POLARITY}): EER {:.4}% at threshold {:.6}",
            report.entries.len(),
            report.strategy.as_str(),
            100.0 * s.eer,
            s.threshold
        ),
        None => println!(
            "{} scores ({}, {POLARITY}); no EER without both classes",
            report.entries.len(),
            report.strategy.as_str()
        ),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let dir = out_dir(&a.common, "eval")?;
    let file = fs::File::open(&a.scores).map_err(|e| QamoError::io(&a.scores, e))?;
    let report = ScoreReport::read_csv(file)?;
    write_json(&dir.join("eval.json"), &summary_json(&report))?;
    write_manifest(&dir, "eval", json!({}), &[a.scores.as_path()], json!({}))?;
    print_summary(&report);
    Ok(())
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub loss: LossKind,
    pub lambda: f64,
    pub strategy: ScoreStrategy,
    pub test_eer: f64,
    pub centroid_cosine: Option<f64>,
}

/// The five ablation arms: WCE, WCE + quality loss, QAMO, QAMO without
/// the quality loss, and QAMO scored with max instead of ensemble.
pub fn ablation_arms(base: &TrainConfig) -> Vec<(&'static str, TrainConfig, Vec<ScoreStrategy>)> {
    let with = |loss, lambda| TrainConfig {
        loss,
        hyper: crate::losses::QamoHyper {
            lambda,
            ..base.hyper
        },
        ..base.clone()
    };
    vec![
        (
            "wce",
            with(LossKind::Wce, base.hyper.lambda),
            vec![ScoreStrategy::Head],
        ),
        (
            "wce+quality",
            with(LossKind::WcePlusQuality, base.hyper.lambda),
            vec![ScoreStrategy::Head],
        ),
        (
            "qamo",
            with(LossKind::Qamo, base.hyper.lambda),
            vec![ScoreStrategy::Ensemble, ScoreStrategy::Max],
        ),
        (
            "qamo-no-quality",
            with(LossKind::Qamo, 0.0),
            vec![ScoreStrategy::Ensemble],
        ),
    ]
}

fn arm_name(arm: &str, strategy: ScoreStrategy) -> String {
    match strategy {
        ScoreStrategy::Max => format!("{arm}-max"),
        _ => arm.to_owned(),
    }
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let dir = out_dir(&a.common, "ablate")?;
    let base = train_config(a.config.as_deref(), &a.common)?;
    let train_set = load_jsonl(&a.train, &base.quality)?;
    let test: Vec<InferenceRecord> = load_jsonl(&a.test, &base.quality)?
        .iter()
        .map(|r| InferenceRecord::from_record(r, &base.quality))
        .collect();
    let mut rows = Vec::new();
    for (arm, config, strategies) in ablation_arms(&base) {
        let arm_dir = dir.join(arm);
        let (mut report, ck) = train(&train_set, &config)?;
        write_training_outputs(&arm_dir, &mut report, &ck)?;
        for strategy in strategies {
            let scores = score_dataset(&test, &Scorer::from_checkpoint(&ck), strategy)?;
            write_scores(
                &arm_dir.join(format!("scores-{}.csv", strategy.as_str())),
                &scores,
            )?;
            let eer = scores
                .summary
                .as_ref()
                .map(|s| s.eer)
                .ok_or(QamoError::EmptyClass {
                    bonafide: 0,
                    spoof: 0,
                })?;
            rows.push(AblationRow {
                arm: arm_name(arm, strategy),
                loss: config.loss,
                lambda: config.hyper.lambda,
                strategy,
                test_eer: eer,
                centroid_cosine: report.final_centroid_cosine(),
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| QamoError::Config(e.to_string()))?;
    write_atomic(&dir.join("ablation.csv"), &bytes)?;
    write_manifest(
        &dir,
        "ablate",
        serde_json::to_value(&base)?,
        &[a.train.as_path(), a.test.as_path()],
        json!({}),
    )?;
    println!("{:<18} {:>10} {:>12}", "arm", "EER (%)", "centroid cos");
    for r in &rows {
        println!(
            "{:<18} {:>10.3} {:>12}",
            r.arm,
            100.0 * r.test_eer,
            r.centroid_cosine
                .map_or("-".to_owned(), |c| format!("{c:.4}"))
        );
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let dir = out_dir(&a.common, "export")?;
    let strategy = parse_strategy(&a.strategy)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let records = load_inference_jsonl(&a.data, &ck.policy)?;
    let report = score_dataset(&records, &Scorer::from_checkpoint(&ck), strategy)?;
    let mut hist = Vec::new();
    write_histogram_csv(&export_distributions(&report, a.bins)?, &mut hist)?;
    write_atomic(&dir.join("histogram.csv"), &hist)?;
    let mut emb = Vec::new();
    write_embeddings_csv(&export_embeddings(&records, &ck.encoder)?, &mut emb)?;
    write_atomic(&dir.join("embeddings.csv"), &emb)?;
    write_manifest(
        &dir,
        "export",
        json!({ "strategy": strategy, "bins": a.bins }),
        &[a.checkpoint.as_path(), a.data.as_path()],
        json!({}),
    )?;
    println!(
        "wrote histogram.csv and embeddings.csv to {}",
        dir.display()
    );
    Ok(())
}
