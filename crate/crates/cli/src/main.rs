//! `sgtpact`: train, evaluate, sweep, export saliency maps, check gradients.

mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgtpact::checkpoint;
use sgtpact::data::{self, Split};
use sgtpact::gradcheck;
use sgtpact::saliency;
use sgtpact::train::{self, TrainConfig};
use sgtpact::{build_model, Dataset, DatasetKind, Error, Model, TrainMode};

use config::ConfigFile;
use manifest::{ResolvedConfig, RunManifest};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Format { .. } | Error::Length { .. } | Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
            Error::Config(_) | Error::Contract(_) | Error::Shape { .. } => 2,
        };
        CliError { code, msg: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "sgtpact", version, about = "Saliency-guided training with PACT quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a SmallCNN and write metrics, checkpoint and manifest.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Accuracy as the most salient features are masked.
    Sweep(SweepArgs),
    /// Export saliency maps of selected samples as PGM images.
    Saliency(SaliencyArgs),
    /// Compare autodiff against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    act_bits: Option<u32>,
    #[arg(long)]
    weight_bits: Option<u32>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda_alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stratified training subset size.
    #[arg(long)]
    subset: Option<usize>,
    /// Stratified test subset size (default: full test split).
    #[arg(long)]
    test_subset: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Stratified subset of the split.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40,50,60,70,80,90")]
    percentages: Vec<f64>,
    #[arg(long, default_value = "sweep-out")]
    out: PathBuf,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    indices: Vec<usize>,
    #[arg(long, default_value = "saliency-out")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random SmallCNN instances to check.
    #[arg(long, default_value_t = 3)]
    instances: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Saliency(a) => cmd_saliency(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn parse_dataset(s: &str) -> CliResult<DatasetKind> {
    s.parse().map_err(|e: Error| CliError::usage(e.to_string()))
}

fn require_data_dir(dir: Option<PathBuf>) -> CliResult<PathBuf> {
    let dir = dir.ok_or_else(|| CliError::usage("--data-dir is required"))?;
    if !dir.is_dir() {
        return Err(CliError::usage(format!("data directory {} does not exist", dir.display())));
    }
    Ok(dir)
}

/// Loads and normalizes a split, optionally reduced to a stratified subset.
fn load_split(kind: DatasetKind, dir: &Path, split: Split, subset: Option<usize>, seed: u64) -> CliResult<Dataset> {
    let mut ds = data::load(kind, dir, split)?;
    if let Some(n) = subset {
        ds = data::subset(&ds, n, seed)?;
    }
    Ok(data::normalize(&ds, &kind.normalization())?)
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError {
        code: 3,
        msg: format!("cannot create {}: {e}", dir.display()),
    })
}

fn resolve_train(a: &TrainArgs) -> CliResult<(DatasetKind, PathBuf, TrainConfig, Option<usize>, Option<usize>, PathBuf)> {
    let file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let dataset: String = file
        .pick(a.dataset.clone(), "dataset")?
        .ok_or_else(|| CliError::usage("--dataset is required (mnist or cifar10)"))?;
    let kind = parse_dataset(&dataset)?;
    let data_dir = require_data_dir(file.pick(a.data_dir.clone(), "data-dir")?)?;
    let d = TrainConfig::defaults_for(kind);
    let mode = match file.pick(a.mode.clone(), "mode")? {
        Some(m) => m.parse::<TrainMode>().map_err(|e| CliError::usage(e.to_string()))?,
        None => d.mode,
    };
    let cfg = TrainConfig {
        lr: file.pick(a.lr, "lr")?.unwrap_or(d.lr),
        epochs: file.pick(a.epochs, "epochs")?.unwrap_or(d.epochs),
        batch_size: file.pick(a.batch_size, "batch-size")?.unwrap_or(d.batch_size),
        activation_bits: file.pick(a.act_bits, "act-bits")?.unwrap_or(d.activation_bits),
        weight_bits: file.pick(a.weight_bits, "weight-bits")?.unwrap_or(d.weight_bits),
        masking_ratio: file.pick(a.mask_ratio, "mask-ratio")?.unwrap_or(d.masking_ratio),
        lambda: file.pick(a.lambda, "lambda")?.unwrap_or(d.lambda),
        lambda_alpha: file.pick(a.lambda_alpha, "lambda-alpha")?.unwrap_or(d.lambda_alpha),
        seed: file.pick(a.seed, "seed")?.unwrap_or(d.seed),
        mode,
    };
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let subset = file.pick(a.subset, "subset")?;
    let test_subset = file.pick(a.test_subset, "test-subset")?;
    let out = file
        .pick(a.out.clone(), "out")?
        .unwrap_or_else(|| PathBuf::from(format!("runs/{kind}-{mode}-seed{}", cfg.seed)));
    Ok((kind, data_dir, cfg, subset, test_subset, out))
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let (kind, data_dir, cfg, subset, test_subset, out) = resolve_train(&a)?;
    let train_set = load_split(kind, &data_dir, Split::Train, subset, cfg.seed)?;
    let test_set = load_split(kind, &data_dir, Split::Test, test_subset, cfg.seed)?;
    create_dir(&out)?;
    let model = build_model(&train::model_config(kind, &cfg), cfg.seed)?;
    eprintln!(
        "training {kind} mode={} on {} samples ({} params, {} PACT layers)",
        cfg.mode,
        train_set.len(),
        model.param_count(),
        model.pact_states.len()
    );
    let (model, records) = train::train_with_progress(model, &train_set, &test_set, &cfg, |r| {
        eprintln!(
            "epoch {:>3}  ce={:.4} kl={:.4} total={:.4} test_acc={:.4} alphas={:?} t={:.1}s",
            r.epoch, r.loss.cross_entropy, r.loss.kl_term, r.loss.total, r.test_accuracy, r.alphas, r.seconds
        );
    })?;
    let n_alpha = model.pact_states.len();
    train::write_text(&out.join("metrics.csv"), &train::metrics_csv(&records))?;
    train::write_text(&out.join("metrics.gp"), &train::metrics_plot_script("metrics.csv", n_alpha))?;
    checkpoint::save_checkpoint(&model, &out.join("model.ckpt"))?;
    let resolved = ResolvedConfig::from(&cfg);
    let final_acc = records.last().map(|r| r.test_accuracy);
    let manifest = RunManifest {
        config_hash: manifest::config_hash(&resolved),
        config: resolved,
        dataset: kind.to_string(),
        data_dir: data_dir.display().to_string(),
        train_subset: subset,
        test_subset,
        output_dir: out.display().to_string(),
        files: ["metrics.csv", "metrics.gp", "model.ckpt", "manifest.json"].map(String::from).to_vec(),
        final_test_accuracy: final_acc,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    train::write_text(&out.join("manifest.json"), &json)?;
    let mut line = format!(
        "status=ok command=train dataset={kind} mode={} epochs={} test_acc={}",
        cfg.mode,
        cfg.epochs,
        final_acc.unwrap_or(0.0)
    );
    for (i, a) in model.alphas().iter().enumerate() {
        line.push_str(&format!(" alpha_{i}={a}"));
    }
    line.push_str(&format!(" config_hash={} out={}", manifest.config_hash, out.display()));
    println!("{line}");
    Ok(())
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(CliError::usage(format!("unknown split `{other}` (train or test)"))),
    }
}

/// Checkpoint plus the matching evaluation data.
fn load_eval_inputs(checkpoint_path: &Path, d: &DataArgs) -> CliResult<(Model, DatasetKind, Dataset)> {
    let kind = parse_dataset(&d.dataset)?;
    let dir = require_data_dir(d.data_dir.clone())?;
    let split = parse_split(&d.split)?;
    let model = checkpoint::load_checkpoint(checkpoint_path)?;
    if model.config.input_shape != kind.input_shape() {
        return Err(CliError::usage(format!(
            "checkpoint expects inputs {:?}, dataset {kind} provides {:?}",
            model.config.input_shape,
            kind.input_shape()
        )));
    }
    let ds = load_split(kind, &dir, split, d.subset, d.seed)?;
    Ok((model, kind, ds))
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let (model, kind, ds) = load_eval_inputs(&a.checkpoint, &a.data)?;
    let mode = model.config.forward_mode;
    let acc = train::evaluate_accuracy(&model, &ds, mode)?;
    println!(
        "status=ok command=eval dataset={kind} split={} mode={mode} n={} accuracy={acc}",
        a.data.split,
        ds.len()
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    let (model, kind, ds) = load_eval_inputs(&a.checkpoint, &a.data)?;
    create_dir(&a.out)?;
    let mode = model.config.forward_mode;
    let rows = train::masking_sweep(&model, &ds, &a.percentages, a.data.seed, mode)
        .map_err(|e| CliError::usage(e.to_string()))?;
    train::write_text(&a.out.join("sweep.csv"), &train::sweep_csv(&rows))?;
    train::write_text(&a.out.join("sweep.gp"), &train::sweep_plot_script("sweep.csv"))?;
    let points: Vec<String> = rows.iter().map(|(p, acc)| format!("acc_{p}={acc}")).collect();
    println!(
        "status=ok command=sweep dataset={kind} mode={mode} n={} {} out={}",
        ds.len(),
        points.join(" "),
        a.out.display()
    );
    Ok(())
}

fn cmd_saliency(a: SaliencyArgs) -> CliResult {
    let (model, kind, ds) = load_eval_inputs(&a.checkpoint, &a.data)?;
    if let Some(&bad) = a.indices.iter().find(|&&i| i >= ds.len()) {
        return Err(CliError::usage(format!("index {bad} outside the {} samples of the split", ds.len())));
    }
    create_dir(&a.out)?;
    let mode = model.config.forward_mode;
    let mut written = Vec::new();
    for &i in &a.indices {
        let b = ds.gather(&[i])?;
        let logits = model.forward(&b.x, mode)?;
        let predicted = train::argmax(logits.row(0));
        let g = saliency::input_gradient(&model, &b.x, predicted, mode)?;
        let path = a.out.join(format!("saliency_{i}.pgm"));
        saliency::export_saliency_map(&g, &path)?;
        written.push(format!("{i}:{predicted}"));
    }
    println!(
        "status=ok command=saliency dataset={kind} mode={mode} maps={} predicted={} out={}",
        a.indices.len(),
        written.join(","),
        a.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    let reports = gradcheck::run_suite(a.seed, a.instances)?;
    let mut failed = 0;
    let mut worst = 0.0f64;
    for r in &reports {
        let ok = r.passed(gradcheck::TOLERANCE);
        failed += usize::from(!ok);
        worst = worst.max(r.max_rel_err);
        eprintln!(
            "{} {:<40} checked={:<4} skipped_kinks={:<4} max_rel_err={:.3e}",
            if ok { "ok  " } else { "FAIL" },
            r.name,
            r.checked,
            r.skipped_kinks,
            r.max_rel_err
        );
    }
    let status = if failed == 0 { "ok" } else { "fail" };
    println!(
        "status={status} command=gradcheck checks={} failed={failed} max_rel_err={worst:e} tolerance={:e}",
        reports.len(),
        gradcheck::TOLERANCE
    );
    if failed > 0 {
        return Err(CliError {
            code: 4,
            msg: format!("{failed} gradient checks exceed tolerance"),
        });
    }
    Ok(())
}
