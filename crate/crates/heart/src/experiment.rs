//! Grid experiment harness: trains every attention cell against the
//! shared baseline per dataset and seed, computes percent MSE
//! reductions, and writes the result bundle.
//!
//! Layout of an output directory after a run:
//!
//! ```text
//! out/
//!   cells/<dataset>__<variant>__s<seed>.json   per-cell records (resume manifest)
//!   cells/<dataset>__<variant>__s<seed>.history.csv
//!   results.csv      deterministic per-run rows
//!   results.json     full precision, includes wall times
//!   tables/<city>.csv, tables/average.csv      one-decimal tables
//!   figures/<city>.svg, figures/average.svg    grouped bar charts
//!   tables.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionVariant};
use crate::data::{
    add_calendar_features, build_lag_features, build_windows, load_csv, synth_generate, LagSpec,
    Sample, Standardizer, SynthConfig,
};
use crate::error::{Error, Result};
use crate::model::{HeartModel, ModelConfig};
use crate::report::{render_report, ReductionTable};
use crate::training::{split_chronological, train, TrainingConfig};

fn default_t_in() -> usize {
    72
}

fn default_t_out() -> usize {
    72
}

fn default_latent() -> usize {
    16
}

fn default_conv_lag() -> usize {
    3
}

fn default_encoder_dropout() -> f64 {
    0.1
}

fn default_stride() -> usize {
    24
}

fn default_train_fraction() -> f64 {
    0.9
}

/// Model dimensions shared by every cell of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    #[serde(default = "default_t_in")]
    pub t_in: usize,
    #[serde(default = "default_t_out")]
    pub t_out: usize,
    #[serde(default = "default_latent")]
    pub latent_features: usize,
    #[serde(default = "default_conv_lag")]
    pub conv_lag: usize,
    #[serde(default = "default_encoder_dropout")]
    pub encoder_dropout: f64,
    /// Window stride in hours.
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are valid")
    }
}

/// Where a dataset's panel comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum DataSource {
    #[serde(rename = "synth")]
    Synth { config: SynthConfig, seed: u64 },
    #[serde(rename = "csv")]
    Csv { path: String, target: String },
}

/// One dataset of a grid, standing in for a (city, pollutant) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub id: String,
    pub city: String,
    pub pollutant: String,
    pub source: DataSource,
    /// Lag-chunk features to derive; absent means none.
    #[serde(default)]
    pub lags: Option<LagSpec>,
    /// Whether to append calendar features.
    #[serde(default)]
    pub calendar: bool,
}

/// One attention configuration of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantCell {
    pub id: String,
    pub attention: AttentionConfig,
}

/// Full grid description. Cells are the product of `variants` and
/// `seeds`; the baseline shares each cell's seed so the shared model
/// components start identically and the attention delta is isolated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub datasets: Vec<DatasetSpec>,
    pub variants: Vec<VariantCell>,
    pub seeds: Vec<u64>,
    pub training: TrainingConfig,
    #[serde(default)]
    pub model: ModelSettings,
}

fn filename_safe(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() || self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "grid needs at least one dataset, variant, and seed".into(),
            ));
        }
        let mut ids: Vec<&str> = self.datasets.iter().map(|d| d.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.datasets.len() {
            return Err(Error::Config("duplicate dataset ids".into()));
        }
        let mut pairs: Vec<(&str, &str)> = self
            .datasets
            .iter()
            .map(|d| (d.city.as_str(), d.pollutant.as_str()))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        if pairs.len() != self.datasets.len() {
            return Err(Error::Config(
                "duplicate (city, pollutant) pairs across datasets".into(),
            ));
        }
        for d in &self.datasets {
            if !filename_safe(&d.id) || !filename_safe(&d.city) {
                return Err(Error::Config(format!(
                    "dataset id/city must be filename-safe: {:?}/{:?}",
                    d.id, d.city
                )));
            }
            if d.city == "average" {
                return Err(Error::Config(
                    "city name \"average\" is reserved for the aggregate table".into(),
                ));
            }
            if let Some(lags) = &d.lags {
                lags.validate(self.model.t_out)?;
            }
        }
        let mut vids: Vec<&str> = self.variants.iter().map(|v| v.id.as_str()).collect();
        vids.sort_unstable();
        vids.dedup();
        if vids.len() != self.variants.len() {
            return Err(Error::Config("duplicate variant ids".into()));
        }
        let baselines = self
            .variants
            .iter()
            .filter(|v| v.attention.variant == AttentionVariant::NoAttention)
            .count();
        if baselines != 1 {
            return Err(Error::Config(format!(
                "grid must contain the NoAttention baseline exactly once, found {baselines}"
            )));
        }
        for v in &self.variants {
            if !filename_safe(&v.id) {
                return Err(Error::Config(format!(
                    "variant id must be filename-safe: {:?}",
                    v.id
                )));
            }
            v.attention.validate()?;
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("duplicate seeds".into()));
        }
        self.training.validate()?;
        if self.model.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(())
    }

    fn baseline_id(&self) -> &str {
        &self
            .variants
            .iter()
            .find(|v| v.attention.variant == AttentionVariant::NoAttention)
            .expect("validated")
            .id
    }
}

// ── metric operations ───────────────────────────────────────────────

/// Percent reduction in MSE of a variant over the baseline:
/// `100·(mse_base − mse_att)/mse_base`. Negative when the variant is
/// worse.
pub fn percent_reduction(mse_base: f64, mse_att: f64) -> Result<f64> {
    if !(mse_base > 0.0) {
        return Err(Error::Domain(format!(
            "baseline MSE must be positive, got {mse_base}"
        )));
    }
    Ok(100.0 * (mse_base - mse_att) / mse_base)
}

/// Arithmetic mean of per-city tables, cell by cell. Every table must
/// carry the same (variant, pollutant) cells; rows of the result are
/// sorted by row average descending.
pub fn aggregate_cities(tables: &[ReductionTable]) -> Result<ReductionTable> {
    if tables.is_empty() {
        return Err(Error::Aggregation("no tables to aggregate".into()));
    }
    let reference = &tables[0];
    for t in tables {
        if t.columns != reference.columns {
            return Err(Error::Aggregation(format!(
                "table {:?} has columns {:?}, expected {:?}",
                t.title, t.columns, reference.columns
            )));
        }
    }
    let mut cells: Vec<(String, String, f64)> = Vec::new();
    for row in &reference.rows {
        for (ci, col) in reference.columns.iter().enumerate() {
            let mut sum = 0.0;
            for t in tables {
                let found = t.rows.iter().find(|r| r.label == row.label).ok_or_else(|| {
                    Error::Aggregation(format!(
                        "table {:?} is missing cell ({}, {col})",
                        t.title, row.label
                    ))
                })?;
                sum += found.cells[ci];
            }
            cells.push((row.label.clone(), col.clone(), sum / tables.len() as f64));
        }
    }
    ReductionTable::from_cells("average", &cells)
}

// ── dataset preparation ─────────────────────────────────────────────

/// A dataset after windowing, splitting, and standardization.
pub struct PreparedDataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
    /// Boundary index: `samples[..cut]` train, `samples[cut..]`
    /// validation.
    pub cut: usize,
    pub standardizer: Standardizer,
    pub stations: usize,
    pub features: usize,
}

impl PreparedDataset {
    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.cut]
    }

    pub fn validation(&self) -> &[Sample] {
        &self.samples[self.cut..]
    }
}

/// Loads or generates the panel, derives features, windows, splits,
/// and standardizes with train-split statistics.
pub fn prepare_dataset(spec: &DatasetSpec, settings: &ModelSettings) -> Result<PreparedDataset> {
    let mut panel = match &spec.source {
        DataSource::Synth { config, seed } => synth_generate(config, *seed)?,
        DataSource::Csv { path, target } => load_csv(Path::new(path), target)?,
    };
    if let Some(lags) = &spec.lags {
        lags.validate(settings.t_out)?;
        panel = build_lag_features(panel, lags)?;
    }
    if spec.calendar {
        panel = add_calendar_features(panel);
    }
    let windows = build_windows(&panel, settings.t_in, settings.t_out, settings.stride)?;
    let (train_part, _) = split_chronological(&windows, settings.train_fraction)?;
    let cut = train_part.len();
    let standardizer = Standardizer::fit(&windows[..cut], panel.target_index())?;
    let samples: Vec<Sample> = windows
        .iter()
        .map(|s| standardizer.transform(s))
        .collect::<Result<_>>()?;
    Ok(PreparedDataset {
        spec: spec.clone(),
        stations: panel.station_count(),
        features: panel.feature_count(),
        samples,
        cut,
        standardizer,
    })
}

// ── cell execution ──────────────────────────────────────────────────

/// Persisted per-cell record; doubles as the resume manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub dataset: String,
    pub variant_id: String,
    pub variant_label: String,
    pub heads: usize,
    pub depth: usize,
    pub seed: u64,
    pub val_mse: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

/// One per-run result row (a cell joined with its same-seed baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub dataset: String,
    pub city: String,
    pub pollutant: String,
    pub variant_id: String,
    pub variant_label: String,
    pub heads: usize,
    pub depth: usize,
    pub seed: u64,
    pub baseline_mse: f64,
    pub variant_mse: f64,
    pub percent_reduction: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub key: String,
    pub error: String,
}

/// Content of `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullResults {
    pub rows: Vec<ExperimentRow>,
    pub failures: Vec<CellFailure>,
}

/// Outcome of a grid run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rows: Vec<ExperimentRow>,
    pub failures: Vec<CellFailure>,
    pub tables: Vec<ReductionTable>,
}

impl RunSummary {
    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker pool size; 0 means one worker per available core.
    pub jobs: usize,
    /// Reuse completed cell records found in the output directory.
    pub resume: bool,
}

fn cell_key(dataset: &str, variant: &str, seed: u64) -> String {
    format!("{dataset}__{variant}__s{seed}")
}

fn run_cell(
    prep: &PreparedDataset,
    grid: &ExperimentGrid,
    variant: &VariantCell,
    seed: u64,
    out_dir: &Path,
) -> Result<CellRecord> {
    let start = Instant::now();
    let config = ModelConfig {
        stations: prep.stations,
        features: prep.features,
        t_in: grid.model.t_in,
        t_out: grid.model.t_out,
        latent_features: grid.model.latent_features,
        conv_lag: grid.model.conv_lag,
        encoder_dropout: grid.model.encoder_dropout,
        attention: variant.attention.clone(),
    };
    let mut model = HeartModel::new(config, seed)?;
    let mut training = grid.training.clone();
    training.seed = seed;
    let history = train(&mut model, prep.train(), prep.validation(), &training)?;
    let record = CellRecord {
        dataset: prep.spec.id.clone(),
        variant_id: variant.id.clone(),
        variant_label: variant.attention.cell_label(),
        heads: variant.attention.heads,
        depth: variant.attention.depth,
        seed,
        val_mse: history.best_validation_mse,
        epochs: history.epochs.len(),
        best_epoch: history.best_epoch,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let key = cell_key(&record.dataset, &record.variant_id, seed);
    history.write_csv(&out_dir.join("cells").join(format!("{key}.history.csv")))?;
    write_atomic_json(&out_dir.join("cells").join(format!("{key}.json")), &record)?;
    Ok(record)
}

fn write_atomic_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Builds per-city tables (mean percent reduction over seeds) plus the
/// cross-city average table from result rows.
pub fn tables_from_rows(rows: &[ExperimentRow]) -> Result<Vec<ReductionTable>> {
    let mut cities: Vec<String> = rows.iter().map(|r| r.city.clone()).collect();
    cities.sort();
    cities.dedup();
    let mut tables = Vec::new();
    for city in &cities {
        // (variant label, pollutant) -> reductions over seeds
        let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for row in rows.iter().filter(|r| &r.city == city) {
            if row.variant_label == "NoAttention" {
                continue;
            }
            cells
                .entry((row.variant_label.clone(), row.pollutant.clone()))
                .or_default()
                .push(row.percent_reduction);
        }
        let flat: Vec<(String, String, f64)> = cells
            .into_iter()
            .map(|((label, pollutant), vals)| {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                (label, pollutant, mean)
            })
            .collect();
        if flat.is_empty() {
            continue;
        }
        tables.push(ReductionTable::from_cells(city, &flat)?);
    }
    if tables.is_empty() {
        return Err(Error::Aggregation(
            "no non-baseline rows to tabulate".into(),
        ));
    }
    let average = aggregate_cities(&tables)?;
    tables.push(average);
    Ok(tables)
}

/// Rebuilds tables from result rows and writes the full report bundle
/// (CSV tables, JSON, SVG figures) under `out_dir`.
pub fn render_tables(rows: &[ExperimentRow], out_dir: &Path) -> Result<Vec<ReductionTable>> {
    let tables = tables_from_rows(rows)?;
    render_report(&tables, out_dir)?;
    Ok(tables)
}

/// Writes the deterministic per-run CSV (no wall times).
pub fn write_results_csv(rows: &[ExperimentRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "dataset",
        "city",
        "pollutant",
        "variant",
        "heads",
        "depth",
        "seed",
        "baseline_mse",
        "variant_mse",
        "percent_reduction",
        "epochs",
        "best_epoch",
    ])
    .map_err(|e| Error::Data(format!("csv write error: {e}")))?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.city.clone(),
            r.pollutant.clone(),
            r.variant_label.clone(),
            r.heads.to_string(),
            r.depth.to_string(),
            r.seed.to_string(),
            format!("{}", r.baseline_mse),
            format!("{}", r.variant_mse),
            format!("{}", r.percent_reduction),
            r.epochs.to_string(),
            r.best_epoch.to_string(),
        ])
        .map_err(|e| Error::Data(format!("csv write error: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("csv flush error: {e}")))?;
    Ok(())
}

/// Runs the grid: every (dataset, variant, seed) cell, baseline first.
/// Completed cells are skipped on resume; per-cell failures are
/// recorded and the run continues, except that a failed baseline
/// aborts its (dataset, seed) group.
pub fn run_experiment(grid: &ExperimentGrid, opts: &RunOptions) -> Result<RunSummary> {
    grid.validate()?;
    std::fs::create_dir_all(opts.out_dir.join("cells"))?;

    let preps: Vec<PreparedDataset> = grid
        .datasets
        .iter()
        .map(|spec| prepare_dataset(spec, &grid.model))
        .collect::<Result<_>>()?;

    // baseline tasks first, then the rest
    let baseline_id = grid.baseline_id().to_string();
    let mut tasks: Vec<(usize, &VariantCell, u64)> = Vec::new();
    for (di, _) in preps.iter().enumerate() {
        for seed in &grid.seeds {
            for variant in &grid.variants {
                if variant.id == baseline_id {
                    tasks.push((di, variant, *seed));
                }
            }
        }
    }
    for (di, _) in preps.iter().enumerate() {
        for variant in &grid.variants {
            if variant.id == baseline_id {
                continue;
            }
            for seed in &grid.seeds {
                tasks.push((di, variant, *seed));
            }
        }
    }

    let jobs = if opts.jobs == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        opts.jobs
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;

    let outcomes: Vec<(String, std::result::Result<CellRecord, String>)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(di, variant, seed)| {
                let prep = &preps[*di];
                let key = cell_key(&prep.spec.id, &variant.id, *seed);
                let cell_path = opts.out_dir.join("cells").join(format!("{key}.json"));
                if opts.resume && cell_path.exists() {
                    match std::fs::read_to_string(&cell_path)
                        .map_err(|e| e.to_string())
                        .and_then(|s| {
                            serde_json::from_str::<CellRecord>(&s).map_err(|e| e.to_string())
                        }) {
                        Ok(record) => return (key, Ok(record)),
                        Err(_) => { /* unreadable record: retrain below */ }
                    }
                }
                let outcome = run_cell(prep, grid, variant, *seed, &opts.out_dir)
                    .map_err(|e| e.to_string());
                (key, outcome)
            })
            .collect()
    });

    // index records and failures
    let mut records: BTreeMap<String, CellRecord> = BTreeMap::new();
    let mut failures: Vec<CellFailure> = Vec::new();
    for (key, outcome) in outcomes {
        match outcome {
            Ok(record) => {
                records.insert(key, record);
            }
            Err(error) => failures.push(CellFailure { key, error }),
        }
    }

    // join each cell with its same-seed baseline
    let mut rows: Vec<ExperimentRow> = Vec::new();
    for prep in &preps {
        for seed in &grid.seeds {
            let base_key = cell_key(&prep.spec.id, &baseline_id, *seed);
            let Some(base) = records.get(&base_key) else {
                for variant in &grid.variants {
                    if variant.id != baseline_id {
                        failures.push(CellFailure {
                            key: cell_key(&prep.spec.id, &variant.id, *seed),
                            error: format!("baseline {base_key} missing or failed"),
                        });
                    }
                }
                continue;
            };
            for variant in &grid.variants {
                let key = cell_key(&prep.spec.id, &variant.id, *seed);
                let Some(record) = records.get(&key) else {
                    continue; // already recorded as a failure
                };
                rows.push(ExperimentRow {
                    dataset: prep.spec.id.clone(),
                    city: prep.spec.city.clone(),
                    pollutant: prep.spec.pollutant.clone(),
                    variant_id: record.variant_id.clone(),
                    variant_label: record.variant_label.clone(),
                    heads: record.heads,
                    depth: record.depth,
                    seed: *seed,
                    baseline_mse: base.val_mse,
                    variant_mse: record.val_mse,
                    percent_reduction: percent_reduction(base.val_mse, record.val_mse)?,
                    epochs: record.epochs,
                    best_epoch: record.best_epoch,
                    wall_time_s: record.wall_time_s,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.dataset, &a.variant_label, a.seed).cmp(&(&b.dataset, &b.variant_label, b.seed))
    });

    write_results_csv(&rows, &opts.out_dir.join("results.csv"))?;
    std::fs::write(
        opts.out_dir.join("results.json"),
        serde_json::to_vec_pretty(&FullResults {
            rows: rows.clone(),
            failures: failures.clone(),
        })?,
    )?;

    let tables = match tables_from_rows(&rows) {
        Ok(tables) => {
            render_report(&tables, &opts.out_dir)?;
            tables
        }
        // a run whose non-baseline cells all failed still gets its CSV
        Err(_) if !failures.is_empty() => Vec::new(),
        Err(e) => return Err(e),
    };

    Ok(RunSummary {
        rows,
        failures,
        tables,
    })
}
