//! The `dat` command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{keys_help, RunConfig};
use crate::embank::{decode_bank_file, decode_dataset_file, describe_header, encode_bank_file, encode_dataset_file};
use crate::error::{DatError, Result};
use crate::objective::gradcheck_suite;
use crate::pipeline::two_stage_sample;
use crate::sampler::{read_sample_csv, sampler_precision, write_sample_csv};
use crate::synth::{generate_downstream, generate_holdout, generate_pretrain_bank};
use crate::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use crate::trainer::{evaluate, fit, initial_params, metrics_csv, FitOutput, TrainConfig, TrainData};

/// Largest finite-difference relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "dat", version, about = "Zero-shot bank sampling and semi-supervised contrastive adaptation")]
#[command(after_help = keys_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, short = 'c', global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=0.01`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Shorthand for `--set output_dir=DIR`.
    #[arg(long, short = 'o', global = true)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic bank, labeled set and held-out set.
    SynthGen {
        #[command(flatten)]
        common: Common,
    },
    /// Two-stage zero-shot sampling of the bank.
    Sample {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the encoder on the labeled set and the sampled bank.
    Train {
        #[command(flatten)]
        common: Common,
        /// Drop the pseudo-label loss (eta = 0).
        #[arg(long)]
        no_unlabeled: bool,
        /// Drop the contrastive loss (lambda = 0).
        #[arg(long)]
        no_contrastive: bool,
        /// Unlabeled ratio; overrides the config.
        #[arg(long)]
        mu: Option<usize>,
    },
    /// Top-1 accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset to score; defaults to the held-out set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Grid over the unlabeled ratio and the confidence threshold.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 4, 5, 6, 7])]
        mus: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5f64, 0.6, 0.7, 0.8, 0.9, 0.95])]
        thresholds: Vec<f64>,
    },
    /// Print the header of a DATB, DATD or DATC file.
    Inspect { path: PathBuf },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| DatError::io(path, e))
}

fn synth_gen(cfg: &RunConfig) -> Result<String> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| DatError::io(dir, e))?;
    let ds = generate_downstream(&cfg.synth)?;
    let holdout = generate_holdout(&cfg.synth, cfg.holdout_per_class)?;
    let bank = generate_pretrain_bank(&cfg.synth, &ds)?;
    encode_bank_file(&bank.bank, &cfg.bank_path())?;
    encode_dataset_file(&ds, &cfg.dataset_path())?;
    encode_dataset_file(&holdout, &cfg.holdout_path())?;
    cfg.write_resolved(dir)?;
    Ok(format!(
        "wrote {} bank records ({} weak-paired), {} labeled and {} held-out samples to {}",
        bank.bank.len(),
        bank.weak_paired.len(),
        ds.len(),
        holdout.len(),
        dir.display()
    ))
}

fn sample(cfg: &RunConfig) -> Result<String> {
    let dir = &cfg.output_dir;
    cfg.write_resolved(dir)?;
    let bank = decode_bank_file(&cfg.bank_path())?;
    let ds = decode_dataset_file(&cfg.dataset_path())?;
    let sampled = two_stage_sample(&bank, &ds, &cfg.synth, &cfg.sampler)?;
    write_sample_csv(&sampled.label_bank, &dir.join("label_bank.csv"), &dir.join("label_bank_deficits.csv"))?;
    let selection = cfg.selection_path();
    write_sample_csv(&sampled.selection, &selection, &dir.join("selection_deficits.csv"))?;
    let mut report = format!(
        "label_bank = {}\nlabel_bank_deficit = {}\nselected = {}\nselected_deficit = {}\n",
        sampled.label_bank.len(),
        sampled.label_bank.total_deficit(),
        sampled.selection.len(),
        sampled.selection.total_deficit()
    );
    match (
        sampler_precision(&sampled.label_bank, &bank, ds.num_classes()),
        sampler_precision(&sampled.selection, &bank, ds.num_classes()),
    ) {
        (Ok(p1), Ok(p2)) => {
            let _ = write!(report, "label_bank_precision = {p1}\nprecision = {p2}\n");
        }
        (Err(DatError::Degenerate(_)), _) | (_, Err(DatError::Degenerate(_))) => {}
        (Err(e), _) | (_, Err(e)) => return Err(e),
    }
    write(&dir.join("precision.txt"), &report)?;
    Ok(report.trim_end().to_string())
}

fn load_holdout(cfg: &RunConfig) -> Result<Option<crate::embank::DownstreamDataset>> {
    let path = cfg.holdout_path();
    if cfg.holdout.is_none() && !path.exists() {
        return Ok(None);
    }
    decode_dataset_file(&path).map(Some)
}

/// Trains from the files named by `cfg` and writes metrics, checkpoint and
/// resolved config under `dir`.
pub fn train_run(cfg: &RunConfig, dir: &Path) -> Result<FitOutput> {
    fs::create_dir_all(dir).map_err(|e| DatError::io(dir, e))?;
    cfg.write_resolved(dir)?;
    let out = train_from_files(cfg)?;
    write(&dir.join("metrics.csv"), &metrics_csv(&out.metrics))?;
    save_checkpoint(&out.params, &dir.join("checkpoint.datc"))?;
    Ok(out)
}

fn train_from_files(cfg: &RunConfig) -> Result<FitOutput> {
    let tc: &TrainConfig = &cfg.train;
    let ds = decode_dataset_file(&cfg.dataset_path())?;
    let holdout = load_holdout(cfg)?;
    let (bank, selected) = if tc.mu > 0 {
        let bank = decode_bank_file(&cfg.bank_path())?;
        let sel = read_sample_csv(&cfg.selection_path(), None)?;
        (Some(bank), sel.selected_ids)
    } else {
        (None, Vec::new())
    };
    let data = TrainData::new(&ds, bank.as_ref(), &selected)?;
    let frozen = cfg.synth.frozen_image();
    let init = initial_params(tc, &ds, Some(&frozen))?;
    fit(&data, init, tc, holdout.as_ref())
}

fn final_acc(out: &FitOutput) -> Option<f64> {
    out.metrics.iter().rev().find_map(|m| m.acc_eval)
}

fn train(cfg: &RunConfig) -> Result<String> {
    let out = train_run(cfg, &cfg.output_dir)?;
    let acc = final_acc(&out).map(|a| a.to_string()).unwrap_or_else(|| "n/a".into());
    Ok(format!("{} steps, final acc_eval = {acc}", out.metrics.len()))
}

fn eval(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> Result<String> {
    let params = load_checkpoint(checkpoint)?;
    let path = data.map(Path::to_path_buf).unwrap_or_else(|| cfg.holdout_path());
    let ds = decode_dataset_file(&path)?;
    if params.input_dim() != ds.image_dim || params.num_classes() != ds.num_classes() {
        return Err(DatError::Shape(format!(
            "checkpoint expects D_img={} C={}, dataset has D_img={} C={}",
            params.input_dim(),
            params.num_classes(),
            ds.image_dim,
            ds.num_classes()
        )));
    }
    Ok(format!("accuracy = {}", evaluate(&params, &ds)?))
}

/// Returns the report and whether every mode passed.
pub fn gradcheck(seed: u64) -> Result<(String, bool)> {
    let results = gradcheck_suite(seed)?;
    let mut report = String::new();
    let mut worst: f64 = 0.0;
    for (name, err) in &results {
        let _ = writeln!(report, "{name:<9} max relative error {err:.3e}");
        worst = worst.max(*err);
    }
    let _ = write!(report, "max relative error {worst:.3e}");
    Ok((report, worst <= GRADCHECK_TOLERANCE))
}

pub const SUMMARY_HEADER: &str = "mu,t_thresh,final_acc";

pub fn sweep(cfg: &RunConfig, mus: &[usize], thresholds: &[f64]) -> Result<String> {
    if mus.is_empty() || thresholds.is_empty() {
        return Err(DatError::Config("sweep needs at least one mu and one threshold".into()));
    }
    let root = cfg.output_dir.join("sweep");
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for &mu in mus {
        for &t in thresholds {
            let mut cell = cfg.clone();
            cell.train.mu = mu;
            cell.train.t_thresh = t;
            cell.validate()?;
            let out = train_run(&cell, &root.join(format!("mu{mu}_t{t}")))?;
            let acc = final_acc(&out).map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(summary, "{mu},{t},{acc}");
        }
    }
    write(&root.join("summary.csv"), &summary)?;
    Ok(summary.trim_end().to_string())
}

fn inspect(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| DatError::io(path, e))?;
    describe_header(&bytes)
}

/// Runs one command; `Ok(false)` means it ran but its check failed.
pub fn execute(cli: Cli) -> Result<(String, bool)> {
    let ok = |s: String| Ok((s, true));
    match cli.command {
        Command::SynthGen { common } => ok(synth_gen(&resolve(&common)?)?),
        Command::Sample { common } => ok(sample(&resolve(&common)?)?),
        Command::Train { common, no_unlabeled, no_contrastive, mu } => {
            let mut cfg = resolve(&common)?;
            if no_unlabeled {
                cfg.train.loss.eta = 0.0;
            }
            if no_contrastive {
                cfg.train.loss.lambda = 0.0;
            }
            if let Some(mu) = mu {
                cfg.train.mu = mu;
            }
            cfg.validate()?;
            ok(train(&cfg)?)
        }
        Command::Eval { common, checkpoint, data } => ok(eval(&resolve(&common)?, &checkpoint, data.as_deref())?),
        Command::Gradcheck { common, seed } => {
            resolve(&common)?;
            gradcheck(seed)
        }
        Command::Sweep { common, mus, thresholds } => ok(sweep(&resolve(&common)?, &mus, &thresholds)?),
        Command::Inspect { path } => ok(inspect(&path)?),
    }
}

/// Parses `argv` (program name first), runs it, prints the outcome and
/// returns the exit code: 0 success, 1 validation or failed check, 2 I/O.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok((report, passed)) => {
            println!("{report}");
            if passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
