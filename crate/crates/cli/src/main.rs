//! Command-line front end for the forecasting library: dataset generation,
//! training, evaluation, model comparison, gradient audits, the built-in
//! property suite, and embedding export.
//!
//! Every run is driven by a JSON config file; flags only override the seed
//! and the output directory, so a config plus a seed pins an experiment
//! exactly. The `HYPERST_SEED` environment variable overrides the config's
//! seed and is itself beaten by `--seed`.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, configs, data files),
//! 2 runtime failure (divergence, I/O, failed checks).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hyperst_net::data::{generate_synthetic, load_dataset, save_dataset, split_windows, GeneratorConfig};
use hyperst_net::experiment::{
    compare, format_comparison_table, load_experiment_config, run_experiment, write_comparison_csv,
};
use hyperst_net::models::{write_embeddings_csv, Model, ModelSpec};
use hyperst_net::training::{evaluate, format_grad_report, grad_check, MetricsReport};
use hyperst_net::verify::run_suite;
use hyperst_net::NetError;

const SEED_ENV: &str = "HYPERST_SEED";

/// Seed for `grad-check` when neither `--seed` nor the environment gives
/// one (a ModelSpec file has no seed field).
const GRAD_CHECK_SEED: u64 = 7;

/// Forecasting models whose temporal weights are generated from static
/// spatial attributes — plus the baselines, data tooling, and self-checks
/// to compare them reproducibly.
#[derive(Parser)]
#[command(name = "hyperst", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a generator config (JSON).
    GenData {
        /// Generator config file.
        #[arg(long)]
        config: PathBuf,
        /// Directory the dataset is written to.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed (beats HYPERST_SEED).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one experiment config end to end and write its artifacts.
    Train {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the training seed (beats HYPERST_SEED).
        #[arg(long)]
        seed: Option<u64>,
        /// Redirect all artifacts to this directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Re-evaluate a stored checkpoint on an experiment config's splits.
    Eval {
        /// Experiment config file: supplies the dataset, split ratios, and
        /// output directory. The model itself comes from the checkpoint.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory; defaults to `<output dir>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Redirect the evaluation report to this directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Train two or more configs on the same dataset and tabulate test
    /// MAE/RMSE against the baseline (the first plain recurrent config,
    /// else the first config).
    Compare {
        /// Experiment config files (two or more).
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        /// Comparison CSV path; defaults to `comparison.csv` in the
        /// baseline's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in property suite: gradient audits for every model
    /// kind, layer reduction identities, convolution scaling identities,
    /// parameter-count formulas, weight sharing, and round-trips.
    Verify {
        /// Gradient-audit tolerance; the algebraic identities keep their
        /// own fixed thresholds.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Audit analytic gradients of a model spec (JSON) against central
    /// finite differences. Keep the dims tiny: the oracle evaluates the
    /// full loss twice per scalar parameter.
    GradCheck {
        /// Model spec file.
        #[arg(long)]
        config: PathBuf,
        /// Maximum relative error accepted per tensor.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Seed for the audit's random probe instance.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export per-object spatial embeddings from a checkpoint to CSV.
    ExportEmbeddings {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (supplies the spatial attribute rows).
        #[arg(long)]
        dataset: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; only real parse errors
            // count as invalid input.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { config, out, seed } => cmd_gen_data(&config, &out, seed)?,
        Command::Train { config, seed, output_dir } => cmd_train(&config, seed, output_dir)?,
        Command::Eval { config, checkpoint, output_dir } => {
            cmd_eval(&config, checkpoint, output_dir)?
        }
        Command::Compare { configs, out } => cmd_compare(&configs, out)?,
        Command::Verify { tolerance } => {
            let report = run_suite(tolerance);
            print!("{}", report.render());
            if !report.passed() {
                let failed = report.checks.iter().filter(|c| !c.passed).count();
                return Err(CliError::ChecksFailed(format!(
                    "{failed} verification check(s) failed"
                )));
            }
        }
        Command::GradCheck { config, tolerance, seed } => {
            let spec: ModelSpec = read_json(&config, "model spec")?;
            let seed = resolve_seed(seed, GRAD_CHECK_SEED)?;
            let report = grad_check(&spec, seed, tolerance)?;
            print!("{}", format_grad_report(&report));
            if !report.passed() {
                let failed = report.failures().count();
                return Err(CliError::ChecksFailed(format!(
                    "{failed} tensor gradient(s) exceeded tolerance {tolerance:e}"
                )));
            }
        }
        Command::ExportEmbeddings { checkpoint, dataset, out } => {
            cmd_export_embeddings(&checkpoint, &dataset, &out)?
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(config: &Path, out: &Path, seed: Option<u64>) -> hyperst_net::Result<()> {
    let mut gen: GeneratorConfig = read_json(config, "generator config")?;
    gen.seed = resolve_seed(seed, gen.seed)?;
    let ds = generate_synthetic(&gen)?;
    save_dataset(&ds, out, Some(&gen))?;
    let grid = match ds.grid {
        Some(g) => format!(", grid {g}×{g}"),
        None => String::new(),
    };
    println!(
        "dataset {}: {} objects × {} steps, d_s={} d_t={} d_l={}{grid}",
        ds.name,
        ds.n_objects(),
        ds.len_time(),
        ds.d_s(),
        ds.d_t(),
        ds.d_l()
    );
    println!("written: {}", out.display());
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>, output_dir: Option<PathBuf>) -> hyperst_net::Result<()> {
    let mut cfg = load_experiment_config(config)?;
    cfg.train.seed = resolve_seed(seed, cfg.train.seed)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    let run = run_experiment(&cfg)?;
    let r = &run.report;
    println!(
        "{} ({}) on {}: {} stored parameters, {} epochs (best {}), {:.1} s",
        r.label, r.kind, r.dataset, r.parameters, r.epochs_run, r.best_epoch, r.wall_time_secs
    );
    print_metrics("train", &r.train);
    print_metrics("val", &r.val);
    print_metrics("test", &r.test);
    if !r.degenerate_channels.is_empty() {
        println!(
            "  note: constant on the train range: {}",
            r.degenerate_channels.join(", ")
        );
    }
    println!("checkpoint: {}", run.checkpoint_dir.display());
    println!("history:    {}", run.history_path.display());
    println!("metrics:    {}", run.metrics_path.display());
    Ok(())
}

fn cmd_eval(
    config: &Path,
    checkpoint: Option<PathBuf>,
    output_dir: Option<PathBuf>,
) -> hyperst_net::Result<()> {
    let mut cfg = load_experiment_config(config)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    let ckpt = checkpoint.unwrap_or_else(|| cfg.output_dir.join("checkpoint"));
    let model = Model::load(&ckpt)?;
    let raw = cfg.dataset.resolve()?;
    let splits = split_windows(&raw, &cfg.split, model.spec.window, model.spec.horizon)?;
    // Evaluate in the units the checkpoint was trained in: its stored
    // normalizer transforms the inputs, and `evaluate` reports metrics back
    // in original label units.
    let ds = match &model.normalizer {
        Some(n) => n.normalize(&raw)?,
        None => raw,
    };
    let train = evaluate(&model, &ds, &splits.train)?;
    let val = evaluate(&model, &ds, &splits.val)?;
    let test = evaluate(&model, &ds, &splits.test)?;
    println!("checkpoint {} ({})", ckpt.display(), model.spec.kind.name());
    print_metrics("train", &train);
    print_metrics("val", &val);
    print_metrics("test", &test);
    let report = serde_json::json!({
        "checkpoint": ckpt.display().to_string(),
        "kind": model.spec.kind.name(),
        "train": train,
        "val": val,
        "test": test,
    });
    std::fs::create_dir_all(&cfg.output_dir)?;
    let out = cfg.output_dir.join("eval.json");
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    println!("written: {}", out.display());
    Ok(())
}

fn cmd_compare(configs: &[PathBuf], out: Option<PathBuf>) -> hyperst_net::Result<()> {
    let mut cfgs = Vec::with_capacity(configs.len());
    for path in configs {
        cfgs.push(load_experiment_config(path)?);
    }
    let cmp = compare(&cfgs)?;
    let csv_path = out.unwrap_or_else(|| cfgs[cmp.baseline].output_dir.join("comparison.csv"));
    write_comparison_csv(&csv_path, &cmp)?;
    print!("{}", format_comparison_table(&cmp));
    println!("written: {}", csv_path.display());
    Ok(())
}

fn cmd_export_embeddings(checkpoint: &Path, dataset: &Path, out: &Path) -> hyperst_net::Result<()> {
    let model = Model::load(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let embeddings = model.export_embeddings(&ds.spatial)?;
    write_embeddings_csv(out, &embeddings)?;
    println!(
        "wrote {} embedding rows of dim {} to {}",
        embeddings.shape()[0],
        embeddings.shape()[1],
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Plumbing
// ---------------------------------------------------------------------------

fn print_metrics(split: &str, m: &MetricsReport) {
    println!(
        "  {split:<5} MAE {:.6}  RMSE {:.6}  ({} samples)",
        m.mae, m.rmse, m.samples
    );
}

/// Seed precedence: `--seed` flag, then `HYPERST_SEED`, then the config.
fn resolve_seed(flag: Option<u64>, from_config: u64) -> hyperst_net::Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(text) => text.trim().parse().map_err(|_| {
            NetError::Config(format!(
                "{SEED_ENV} must be an unsigned integer, got {text:?}"
            ))
        }),
        Err(std::env::VarError::NotPresent) => Ok(from_config),
        Err(e) => Err(NetError::Config(format!("{SEED_ENV}: {e}"))),
    }
}

/// Reads a JSON config; both read and parse failures are validation errors
/// naming the path.
fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> hyperst_net::Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| NetError::Config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| NetError::Config(format!("invalid {what} {}: {e}", path.display())))
}

/// A library error, or a check command that ran to completion and found
/// failures (always a runtime failure, never a validation one).
enum CliError {
    Net(NetError),
    ChecksFailed(String),
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::Net(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Net(e) => e.fmt(f),
            CliError::ChecksFailed(msg) => f.write_str(msg),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Net(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}
