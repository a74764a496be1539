//! Experiment plumbing: one JSON config describes the dataset, model,
//! training recipe, and split; the runner turns it into reproducible
//! artifacts (checkpoint, history CSV, metrics JSON), and the comparison
//! harness runs several configs against the same dataset sequentially.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_dataset, split_windows, Dataset, GeneratorConfig, Normalizer,
    SplitSpec,
};
use crate::error::NetError;
use crate::models::{build, ModelKind, ModelSpec};
use crate::training::{evaluate, train, write_history_csv, MetricsReport, TrainConfig};
use crate::Result;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Where the data comes from: a saved dataset directory/manifest, or a
/// synthetic-generator config. Exactly one must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
}

impl DatasetSection {
    pub fn validate(&self) -> Result<()> {
        match (&self.path, &self.generator) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(NetError::Config(
                "dataset section must set exactly one of `path` or `generator`".into(),
            )),
        }
    }

    pub fn resolve(&self) -> Result<Dataset> {
        self.validate()?;
        match (&self.path, &self.generator) {
            (Some(p), None) => load_dataset(p),
            (None, Some(g)) => generate_synthetic(g),
            _ => unreachable!("validate enforces exactly one source"),
        }
    }

    /// Stable identity string used to refuse comparisons across different
    /// datasets.
    pub fn identity(&self) -> Result<String> {
        self.validate()?;
        Ok(match (&self.path, &self.generator) {
            (Some(p), None) => {
                let resolved = std::fs::canonicalize(p).unwrap_or_else(|_| p.clone());
                format!("path:{}", resolved.display())
            }
            (None, Some(g)) => format!("generator:{}", serde_json::to_string(g)?),
            _ => unreachable!(),
        })
    }
}

/// One experiment: dataset source, model, training recipe, split, and where
/// the artifacts land.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitSpec,
    pub output_dir: PathBuf,
    /// Row label in comparison tables; defaults to the model kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        Ok(())
    }

    pub fn effective_label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.model.kind.name().to_string())
    }
}

/// Reads and parses an experiment config; both read and parse failures are
/// reported as validation errors naming the path.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| NetError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| NetError::Config(format!("invalid config {}: {e}", path.display())))?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Running one experiment
// ---------------------------------------------------------------------------

/// The serialized outcome of one run (written as `metrics.json`). Wall time
/// is reported on stdout but kept out of the file so reruns with the same
/// seed produce byte-identical artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub kind: String,
    pub dataset: String,
    pub seed: u64,
    pub parameters: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Channels the normalizer found constant on the train range.
    pub degenerate_channels: Vec<String>,
    pub train: MetricsReport,
    pub val: MetricsReport,
    pub test: MetricsReport,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Paths of everything one run wrote.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub checkpoint_dir: PathBuf,
    pub history_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Full pipeline: resolve data → chronological split → normalize on the
/// train range → build → train → evaluate every split → write artifacts
/// under the config's output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let started = Instant::now();
    let raw = cfg.dataset.resolve()?;
    let splits = split_windows(&raw, &cfg.split, cfg.model.window, cfg.model.horizon)?;
    let normalizer = Normalizer::fit(&raw, splits.train.time_range.clone())?;
    let degenerate = normalizer.degenerate.clone();
    let ds = normalizer.normalize(&raw)?;

    let mut model = build(&cfg.model, cfg.train.seed)?;
    model.normalizer = Some(normalizer);

    let outcome = train(&model, &ds, &splits, &cfg.train)?;
    let best = outcome.model;
    let report = RunReport {
        label: cfg.effective_label(),
        kind: cfg.model.kind.name().to_string(),
        dataset: raw.name.clone(),
        seed: cfg.train.seed,
        parameters: best.stored_params(),
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        degenerate_channels: degenerate,
        train: evaluate(&best, &ds, &splits.train)?,
        val: evaluate(&best, &ds, &splits.val)?,
        test: evaluate(&best, &ds, &splits.test)?,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };

    std::fs::create_dir_all(&cfg.output_dir)?;
    let checkpoint_dir = cfg.output_dir.join("checkpoint");
    best.save(&checkpoint_dir)?;
    let history_path = cfg.output_dir.join("history.csv");
    write_history_csv(&history_path, &outcome.history)?;
    let metrics_path = cfg.output_dir.join("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&report)?)?;
    std::fs::write(
        cfg.output_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;

    Ok(RunArtifacts {
        report,
        checkpoint_dir,
        history_path,
        metrics_path,
    })
}

// ---------------------------------------------------------------------------
// Comparison harness
// ---------------------------------------------------------------------------

/// One row of the comparison table, relative to the baseline run.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub kind: String,
    pub test_mae: f64,
    pub test_rmse: f64,
    /// This model's test MAE divided by the baseline's.
    pub mae_ratio: f64,
    /// Positive when this model beats the baseline: `(1 − ratio) · 100`.
    pub improvement_pct: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    /// Index of the baseline row (first plain recurrent config, else the
    /// first config).
    pub baseline: usize,
}

/// Runs every config sequentially against the shared dataset and relates
/// each test MAE to the baseline's. Configs referencing different datasets
/// are rejected.
pub fn compare(configs: &[ExperimentConfig]) -> Result<Comparison> {
    if configs.len() < 2 {
        return Err(NetError::Config("compare needs at least two configs".into()));
    }
    let identity = configs[0].dataset.identity()?;
    for cfg in &configs[1..] {
        let other = cfg.dataset.identity()?;
        if other != identity {
            return Err(NetError::Config(format!(
                "compare configs reference different datasets: {identity} vs {other}"
            )));
        }
    }
    let baseline = configs
        .iter()
        .position(|c| c.model.kind == ModelKind::Lstm)
        .unwrap_or(0);

    let mut reports = Vec::with_capacity(configs.len());
    for cfg in configs {
        reports.push(run_experiment(cfg)?.report);
    }
    let base_mae = reports[baseline].test.mae;
    if !(base_mae > 0.0 && base_mae.is_finite()) {
        return Err(NetError::Data(format!(
            "baseline test MAE {base_mae} leaves improvement undefined"
        )));
    }
    let rows = reports
        .iter()
        .map(|r| {
            let ratio = r.test.mae / base_mae;
            CompareRow {
                label: r.label.clone(),
                kind: r.kind.clone(),
                test_mae: r.test.mae,
                test_rmse: r.test.rmse,
                mae_ratio: ratio,
                improvement_pct: (1.0 - ratio) * 100.0,
            }
        })
        .collect();
    Ok(Comparison { rows, baseline })
}

/// Writes the comparison as CSV with a header row.
pub fn write_comparison_csv(path: &Path, cmp: &Comparison) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "kind", "test_mae", "test_rmse", "mae_ratio", "improvement_pct"])?;
    for row in &cmp.rows {
        w.write_record([
            row.label.clone(),
            row.kind.clone(),
            format!("{}", row.test_mae),
            format!("{}", row.test_rmse),
            format!("{}", row.mae_ratio),
            format!("{}", row.improvement_pct),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text table for stdout; the baseline row is marked.
pub fn format_comparison_table(cmp: &Comparison) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:<16} {:>10} {:>10} {:>9} {:>12}\n",
        "label", "kind", "test MAE", "test RMSE", "ratio", "improvement"
    ));
    for (i, row) in cmp.rows.iter().enumerate() {
        let mark = if i == cmp.baseline { " (baseline)" } else { "" };
        out.push_str(&format!(
            "{:<24} {:<16} {:>10.5} {:>10.5} {:>9.4} {:>11.2}%{}\n",
            row.label, row.kind, row.test_mae, row.test_rmse, row.mae_ratio, row.improvement_pct, mark
        ));
    }
    out
}
