//! Command-line runner for the heart forecasting toolkit.
//!
//! Subcommands:
//!
//! * `synth`         — generate a synthetic panel CSV
//! * `train`         — train a single model on one dataset
//! * `grid`          — run an attention-variant grid experiment
//! * `report`        — re-render tables and figures from results.json
//! * `validate-data` — schema-check a panel CSV

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use heart::attention::AttentionConfig;
use heart::data::{synth_generate, write_csv, SynthConfig};
use heart::experiment::{
    prepare_dataset, render_tables, run_experiment, DatasetSpec, ExperimentGrid, FullResults,
    ModelSettings, RunOptions,
};
use heart::model::{HeartModel, ModelConfig};
use heart::training::{train, TrainingConfig};

#[derive(Parser)]
#[command(name = "heart", version, about = "Attention-augmented time series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hourly panel and write it as CSV.
    Synth {
        /// Generator configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Generator seed; overrides nothing in the config, the panel
        /// is a pure function of (config, seed).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on one dataset and write checkpoint, history,
    /// and standardization statistics.
    Train {
        /// Training specification (JSON): dataset, model, attention,
        /// training.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run a grid of attention variants against the baseline.
    Grid {
        /// Grid configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Worker pool size; 0 uses every available core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Skip cells whose records already exist in the output
        /// directory.
        #[arg(long)]
        resume: bool,
    },
    /// Re-render tables and figures from an existing results.json.
    Report {
        /// Path to results.json or to a grid output directory.
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Validate a panel CSV against the ingestion schema.
    ValidateData {
        #[arg(long)]
        path: PathBuf,
        /// Target feature name; defaults to the first feature found.
        #[arg(long)]
        target: Option<String>,
    },
}

/// JSON schema of the `train` subcommand configuration.
#[derive(Deserialize)]
struct TrainSpec {
    dataset: DatasetSpec,
    #[serde(default)]
    model: ModelSettings,
    attention: AttentionConfig,
    training: TrainingConfig,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn cmd_synth(config: PathBuf, seed: u64, out: PathBuf) -> anyhow::Result<()> {
    let config: SynthConfig = read_json(&config)?;
    let panel = synth_generate(&config, seed)?;
    write_csv(&panel, &out)?;
    println!(
        "wrote {}: {} stations x {} features x {} hours (seed {seed})",
        out.display(),
        panel.station_count(),
        panel.feature_count(),
        panel.len()
    );
    Ok(())
}

fn cmd_train(config: PathBuf, seed: Option<u64>, out_dir: PathBuf) -> anyhow::Result<()> {
    let mut spec: TrainSpec = read_json(&config)?;
    if let Some(seed) = seed {
        spec.training.seed = seed;
    }
    std::fs::create_dir_all(&out_dir)?;
    let prep = prepare_dataset(&spec.dataset, &spec.model)?;
    let model_config = ModelConfig {
        stations: prep.stations,
        features: prep.features,
        t_in: spec.model.t_in,
        t_out: spec.model.t_out,
        latent_features: spec.model.latent_features,
        conv_lag: spec.model.conv_lag,
        encoder_dropout: spec.model.encoder_dropout,
        attention: spec.attention.clone(),
    };
    let mut model = HeartModel::new(model_config, spec.training.seed)?;
    let history = train(&mut model, prep.train(), prep.validation(), &spec.training)?;

    model.save(&out_dir.join("model.ckpt"))?;
    prep.standardizer.save(&out_dir.join("standardizer.json"))?;
    history.write_csv(&out_dir.join("history.csv"))?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_vec_pretty(&history)?,
    )?;
    println!(
        "trained {} on {}: best validation MSE {:.6} at epoch {} ({} epochs)",
        spec.attention.cell_label(),
        spec.dataset.id,
        history.best_validation_mse,
        history.best_epoch,
        history.epochs.len()
    );
    println!("wrote {}", out_dir.join("model.ckpt").display());
    Ok(())
}

fn cmd_grid(config: PathBuf, out_dir: PathBuf, jobs: usize, resume: bool) -> anyhow::Result<bool> {
    let grid: ExperimentGrid = read_json(&config)?;
    let summary = run_experiment(
        &grid,
        &RunOptions {
            out_dir: out_dir.clone(),
            jobs,
            resume,
        },
    )?;
    for row in &summary.rows {
        println!(
            "{} / {} seed {}: baseline {:.6}, variant {:.6}, reduction {:+.2}%",
            row.dataset, row.variant_label, row.seed, row.baseline_mse, row.variant_mse,
            row.percent_reduction
        );
    }
    for failure in &summary.failures {
        eprintln!("FAILED {}: {}", failure.key, failure.error);
    }
    println!(
        "{} rows, {} failures; results under {}",
        summary.rows.len(),
        summary.failures.len(),
        out_dir.display()
    );
    Ok(summary.all_succeeded())
}

fn cmd_report(results: PathBuf, out_dir: PathBuf) -> anyhow::Result<()> {
    let path = if results.is_dir() {
        results.join("results.json")
    } else {
        results
    };
    let full: FullResults = read_json(&path)?;
    if full.rows.is_empty() {
        bail!("no rows in {}", path.display());
    }
    std::fs::create_dir_all(&out_dir)?;
    render_tables(&full.rows, &out_dir)?;
    println!("re-rendered tables and figures under {}", out_dir.display());
    Ok(())
}

fn cmd_validate(path: PathBuf, target: Option<String>) -> anyhow::Result<()> {
    let target = match target {
        Some(t) => t,
        None => first_feature(&path)?,
    };
    let panel = heart::data::load_csv(&path, &target)?;
    println!(
        "valid panel: {} stations, {} features, {} hours starting {}",
        panel.station_count(),
        panel.feature_count(),
        panel.len(),
        chrono_hour(panel.start_hour())
    );
    Ok(())
}

fn chrono_hour(hour: i64) -> String {
    chrono::DateTime::from_timestamp(hour * 3600, 0)
        .map(|dt| dt.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| format!("epoch hour {hour}"))
}

/// First feature name appearing in the file, used when no target is
/// given to a schema check.
fn first_feature(path: &PathBuf) -> anyhow::Result<String> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let idx = headers
        .iter()
        .position(|h| h == "feature")
        .context("missing column \"feature\" in header")?;
    for record in reader.records() {
        let record = record?;
        if let Some(feature) = record.get(idx) {
            return Ok(feature.to_string());
        }
    }
    bail!("empty input: no data rows")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth { config, seed, out } => cmd_synth(config, seed, out).map(|()| true),
        Command::Train { config, seed, out_dir } => {
            cmd_train(config, seed, out_dir).map(|()| true)
        }
        Command::Grid { config, out_dir, jobs, resume } => cmd_grid(config, out_dir, jobs, resume),
        Command::Report { results, out_dir } => cmd_report(results, out_dir).map(|()| true),
        Command::ValidateData { path, target } => cmd_validate(path, target).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
