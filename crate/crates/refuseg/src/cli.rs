//! Command-line entry point: phantom dataset generation, training,
//! inference with optional dropped modalities, single-case evaluation, and
//! the drop-modality matrix. Exit codes: 0 success, 1 runtime error, 2
//! usage error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{generate_phantom, write_case, ModalityId};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, Hd95Config, MetricsReport};
use crate::niftilite::{read_volume, write_volume, Volume};
use crate::trainer;
use crate::util::mix_seed;

#[derive(Parser)]
#[command(name = "refuseg", version, about = "Multi-modal lesion segmentation with max-fusion encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset
    #[command(name = "gen-data")]
    GenData(GenDataArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Predict a segmentation for one case
    Infer(InferArgs),
    /// Score a predicted label volume against ground truth
    Eval(EvalArgs),
    /// Full + drop-one-modality evaluation matrix
    Matrix(MatrixArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Number of cases
    #[arg(long, default_value_t = 4)]
    cases: usize,
    /// Volume extents as X,Y,Z
    #[arg(long, default_value = "48,48,16")]
    size: String,
    /// Base seed; case k uses a stream derived from (seed, k)
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from gen-data or matching layout)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the ledger
    #[arg(long)]
    out: PathBuf,
    /// Configuration file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single configuration key (repeatable), e.g. --set beta=0
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Epochs override
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size override
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate override
    #[arg(long)]
    lr: Option<f32>,
    /// Contrastive switch/scale override
    #[arg(long)]
    beta: Option<f32>,
    /// Run seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from an epoch-boundary checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint file
    #[arg(long)]
    ckpt: PathBuf,
    /// Case directory holding <modality>.nii files
    #[arg(long)]
    case: PathBuf,
    /// Comma-separated modalities to exclude, e.g. t1,flair
    #[arg(long)]
    drop: Option<String>,
    /// Output label volume (.nii)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted label volume (.nii)
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label volume (.nii)
    #[arg(long)]
    gt: PathBuf,
    /// Report file (one JSON object per line)
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct MatrixArgs {
    /// Checkpoint file
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Per-case report output (one JSON object per line)
    #[arg(long)]
    report: PathBuf,
    /// Another run's report to compare against side by side
    #[arg(long = "compare-with")]
    compare_with: Option<PathBuf>,
    /// Where to write the comparison table (stdout when omitted)
    #[arg(long)]
    table: Option<PathBuf>,
}

/// Parse argv and execute; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own help/version output on stdout
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { 0 } else { 2 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e @ Error::Usage(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Infer(args) => infer(args),
        Command::Eval(args) => eval(args),
        Command::Matrix(args) => matrix(args),
    }
}

fn parse_size(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Usage(format!("--size wants X,Y,Z, got '{s}'")));
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("bad extent '{p}' in --size")))?;
    }
    Ok(out)
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let size = parse_size(&args.size)?;
    println!("resolved configuration:");
    println!("cases = {}", args.cases);
    println!("out = {}", args.out.display());
    println!("seed = {}", args.seed);
    println!("size = {},{},{}", size[0], size[1], size[2]);
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    for k in 0..args.cases {
        let case_seed = mix_seed(args.seed, k as u64);
        let case = generate_phantom(case_seed, size)?;
        let dir = args.out.join(format!("case_{k:04}"));
        write_case(&case, &dir)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn resolve_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        cfg.apply_text(&text)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set wants KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = args.epochs {
        cfg.set("epochs", &v.to_string())?;
    }
    if let Some(v) = args.batch_size {
        cfg.set("batch_size", &v.to_string())?;
    }
    if let Some(v) = args.lr {
        cfg.set("lr", &format!("{v:?}"))?;
    }
    if let Some(v) = args.beta {
        cfg.set("beta", &format!("{v:?}"))?;
    }
    if let Some(v) = args.seed {
        cfg.set("seed", &v.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_run_config(&args)?;
    println!("resolved configuration:");
    print!("{}", cfg.to_kv_string());
    println!("data = {}", args.data.display());
    println!("out = {}", args.out.display());
    let outcome = match &args.resume {
        Some(ckpt) => trainer::resume_train(ckpt, &args.data, &cfg, &args.out)?,
        None => trainer::train(&args.data, &cfg, &args.out)?,
    };
    println!(
        "trained {} steps; checkpoint {}; ledger {}",
        outcome.steps,
        outcome.checkpoint_path.display(),
        outcome.ledger_path.display()
    );
    Ok(())
}

fn parse_drop(spec: Option<&str>) -> Result<Vec<ModalityId>> {
    match spec {
        None => Ok(Vec::new()),
        Some(s) => s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| ModalityId::parse(p.trim()))
            .collect(),
    }
}

fn infer(args: InferArgs) -> Result<()> {
    let drop = parse_drop(args.drop.as_deref())?;
    println!("resolved configuration:");
    println!("case = {}", args.case.display());
    println!("ckpt = {}", args.ckpt.display());
    println!(
        "drop = {}",
        if drop.is_empty() {
            "(none)".to_string()
        } else {
            drop.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
        }
    );
    println!("out = {}", args.out.display());
    let (labels, extents) = trainer::infer(&args.ckpt, &args.case, &drop)?;
    let volume = Volume::new(extents, labels.iter().map(|&c| c as f32).collect())?;
    write_volume(&volume, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn labels_from_volume(v: &Volume, what: &str) -> Result<Vec<u8>> {
    v.voxels
        .iter()
        .map(|&x| {
            let c = x.round();
            if !(0.0..=3.0).contains(&c) {
                Err(Error::Data(format!("{what} voxel {x} outside class range 0..=3")))
            } else {
                Ok(c as u8)
            }
        })
        .collect()
}

fn eval(args: EvalArgs) -> Result<()> {
    println!("resolved configuration:");
    println!("gt = {}", args.gt.display());
    println!("pred = {}", args.pred.display());
    println!("report = {}", args.report.display());
    let pred = read_volume(&args.pred)?;
    let gt = read_volume(&args.gt)?;
    if pred.extents != gt.extents {
        return Err(Error::Alignment(format!(
            "prediction extents {:?} vs ground truth {:?}",
            pred.extents, gt.extents
        )));
    }
    let pred_labels = labels_from_volume(&pred, "prediction")?;
    let gt_labels = labels_from_volume(&gt, "ground truth")?;
    let (dice, hd95) = evaluate_case(&pred_labels, &gt_labels, pred.extents, &Hd95Config::default())?;
    let case_id = args
        .pred
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".to_string());
    let report = MetricsReport { case_id, dropped_modality: None, beta: 0.0, dice, hd95 };
    let line = serde_json::to_string(&report).map_err(|e| Error::Data(format!("report encode: {e}")))?;
    std::fs::write(&args.report, format!("{line}\n"))
        .map_err(|e| Error::io(args.report.display().to_string(), e))?;
    println!("{line}");
    Ok(())
}

fn matrix(args: MatrixArgs) -> Result<()> {
    println!("resolved configuration:");
    println!("ckpt = {}", args.ckpt.display());
    println!("data = {}", args.data.display());
    println!("report = {}", args.report.display());
    let (_, summary) = trainer::drop_modality_matrix(&args.ckpt, &args.data, &args.report)?;
    println!("wrote {}", args.report.display());
    if let Some(other_path) = &args.compare_with {
        let other_reports = trainer::read_reports(other_path)?;
        let other = trainer::summarize_reports(&other_reports)?;
        let (first, second) = if other.beta <= summary.beta {
            (other, summary)
        } else {
            (summary, other)
        };
        let table = trainer::format_comparison_table(&first, &second);
        match &args.table {
            Some(path) => {
                std::fs::write(path, &table).map_err(|e| Error::io(path.display().to_string(), e))?;
                println!("wrote {}", path.display());
            }
            None => print!("{table}"),
        }
    } else {
        for row in &summary.rows {
            let name = row.dropped_modality.clone().unwrap_or_else(|| "(none)".into());
            let d = row.dice.as_array();
            let h = row.hd95.as_array();
            println!(
                "drop={name:<8} dice et/tc/wt = {:.3}/{:.3}/{:.3}  hd95 et/tc/wt = {:.2}/{:.2}/{:.2}",
                d[0], d[1], d[2], h[0], h[1], h[2]
            );
        }
    }
    Ok(())
}
