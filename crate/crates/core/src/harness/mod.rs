//! Seeded experiments, sweeps and their summaries.

mod config;
mod report;

pub use config::{
    check_isolation, parse_pairs, AugmentFlags, DatasetKind, ExperimentConfig, SweepConfig,
    SweepMode,
};
pub use report::{
    paired_comparison, render_report_csv, render_report_text, summarize, Comparison, ReportRow,
};

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::train::{metrics_csv, MetricRow, Trainer};

/// Order statistics and moments of final test accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub accuracies: Vec<f64>,
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl RunSummary {
    pub fn from_accuracies(accuracies: &[f64]) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::EmptyReport);
        }
        let mut sorted = accuracies.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (sorted.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            accuracies: accuracies.to_vec(),
            count: n,
            min: sorted[0],
            median,
            max: sorted[n - 1],
            mean,
            std,
        })
    }
}

/// What happened to one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub final_test_acc: Option<f64>,
    pub error: Option<String>,
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub config: std::collections::BTreeMap<String, String>,
    pub runs: Vec<SeedOutcome>,
    /// `None` when no seed finished.
    pub summary: Option<RunSummary>,
    /// Some seed failed, so the summary covers fewer runs than requested.
    pub degraded: bool,
}

/// A finished training run.
pub struct SeedRun {
    pub rows: Vec<MetricRow>,
    pub model: Model,
}

/// Takes the input shape from the data unless given, and checks that every
/// label fits the classifier.
pub fn resolve_shapes(cfg: &mut ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<()> {
    if !cfg.input_shape_set {
        cfg.model.input_shape = train.image_shape();
    }
    let classes = train.num_classes().max(test.num_classes());
    if classes > cfg.model.num_classes {
        return Err(Error::Config(format!(
            "the data has {classes} classes but num_classes is {}",
            cfg.model.num_classes
        )));
    }
    Ok(())
}

/// Trains one seed end to end.
pub fn train_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
) -> Result<SeedRun> {
    let model = build_model(&cfg.model, cfg.init_seed.unwrap_or(seed))?;
    let augment = cfg.augment.build(train);
    let mut trainer = Trainer::new(model, cfg.train.clone(), train.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let rows = trainer.fit(train, test, &augment, &mut rng, |_| {})?;
    Ok(SeedRun {
        rows,
        model: trainer.model,
    })
}

pub fn metrics_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed_{seed}.csv"))
}

pub fn model_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("model_seed_{seed}.json"))
}

fn run_one(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    dir: &Path,
) -> Result<(f64, PathBuf)> {
    let run = train_seed(cfg, seed, train, test)?;
    let path = metrics_path(dir, seed);
    fs::write(&path, metrics_csv(&run.rows))?;
    fs::write(model_path(dir, seed), serde_json::to_vec(&run.model)?)?;
    let acc = run
        .rows
        .last()
        .map(|r| r.test_acc)
        .ok_or_else(|| Error::Config("no epochs were run".into()))?;
    Ok((acc, path))
}

/// Trains every seed, in parallel, writing one metrics CSV and one model
/// per seed plus `summary.json` under `out/name`. A failing seed is
/// recorded and marks the experiment degraded; the others still run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (train, test) = cfg.load_dataset()?;
    run_experiment_on(cfg, &train, &test)
}

/// [`run_experiment`] on data already in memory.
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<ExperimentResult> {
    let mut cfg = cfg.clone();
    resolve_shapes(&mut cfg, train, test)?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.render())?;
    let runs: Vec<SeedOutcome> = cfg
        .seeds
        .par_iter()
        .map(|&seed| match run_one(&cfg, seed, train, test, &dir) {
            Ok((acc, path)) => {
                log::info!("{} seed {seed}: test accuracy {acc:.4}", cfg.name);
                SeedOutcome {
                    seed,
                    final_test_acc: Some(acc),
                    error: None,
                    metrics: Some(path),
                }
            }
            Err(e) => {
                log::error!("{} seed {seed} failed: {e}", cfg.name);
                SeedOutcome {
                    seed,
                    final_test_acc: None,
                    error: Some(e.to_string()),
                    metrics: None,
                }
            }
        })
        .collect();
    let accs: Vec<f64> = runs.iter().filter_map(|r| r.final_test_acc).collect();
    let result = ExperimentResult {
        name: cfg.name.clone(),
        config: cfg
            .pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        degraded: accs.len() < runs.len(),
        summary: RunSummary::from_accuracies(&accs).ok(),
        runs,
    };
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&result)? + "\n",
    )?;
    Ok(result)
}

/// Runs every experiment of a sweep in order and writes `report.csv` and
/// `report.txt` under the base output directory.
pub fn run_sweep(sweep: &SweepConfig) -> Result<Vec<ExperimentResult>> {
    let experiments = sweep.experiments()?;
    let (train, test) = sweep.base.load_dataset()?;
    let mut results = Vec::with_capacity(experiments.len());
    for cfg in &experiments {
        results.push(run_experiment_on(cfg, &train, &test)?);
    }
    let rows = summarize(&results)?;
    let baseline = (sweep.mode == SweepMode::OneFactor).then(|| results[0].name.as_str());
    let comparisons = baseline
        .map(|b| paired_comparison(&results, b))
        .transpose()?
        .unwrap_or_default();
    fs::create_dir_all(&sweep.base.out)?;
    fs::write(
        sweep.base.out.join("report.csv"),
        render_report_csv(&rows, &comparisons),
    )?;
    fs::write(
        sweep.base.out.join("report.txt"),
        render_report_text(&rows, &comparisons),
    )?;
    Ok(results)
}

pub fn load_result(path: &Path) -> Result<ExperimentResult> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
