use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bnnkit::augment::Augment;
use bnnkit::dataset::Dataset;
use bnnkit::harness::{
    load_result, paired_comparison, render_report_csv, render_report_text, resolve_shapes,
    run_experiment, run_sweep, summarize, ExperimentConfig, SweepConfig, SweepMode,
};
use bnnkit::model::Model;
use bnnkit::packed::{export_model, format, verify, PackedModel};
use clap::{Args, Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Train, sweep, export and run binary neural networks.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of a config file.
#[derive(Args, Clone)]
struct Overrides {
    /// Key-value experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory, replacing `dataset` from the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory, replacing `out` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration for one seed (the first listed unless --seed).
    Train(Overrides),
    /// Train every experiment of a sweep file and write a report.
    Sweep(Overrides),
    /// Convert a trained model (JSON) to a packed BNNF file.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test accuracy of a packed BNNF model.
    Infer {
        /// BNNF file.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Compare a trained model with its packed export on test images.
    Verify {
        /// Trained model (JSON).
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Number of test images to compare.
        #[arg(long, default_value_t = 1000)]
        limit: usize,
        /// Lowest top-1 agreement that counts as a pass.
        #[arg(long, default_value_t = 0.99)]
        min_agreement: f64,
    },
    /// Tabulate experiment summaries.
    Report {
        /// `summary.json` files or directories holding one.
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Write the CSV table here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Add differences against this experiment.
        #[arg(long)]
        baseline: Option<String>,
    },
}

/// Where test images come from and how they were normalized in training.
#[derive(Args)]
struct DataArgs {
    /// The training config; supplies dataset and normalization settings.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl DataArgs {
    /// Test split and the evaluation transform used during training.
    fn load(&self) -> Result<(ExperimentConfig, Dataset, Augment)> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("reading {}", self.config.display()))?;
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        let (train, test) = cfg
            .load_dataset()
            .with_context(|| format!("loading {}", cfg.dataset.display()))?;
        resolve_shapes(&mut cfg, &train, &test)?;
        let augment = cfg.augment.build(&train);
        Ok((cfg, test, augment))
    }
}

fn read_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

const BATCH: usize = 250;

fn packed_accuracy(model: &PackedModel, test: &Dataset, augment: &Augment) -> Result<f64> {
    let mut correct = 0;
    for start in (0..test.len()).step_by(BATCH) {
        let end = (start + BATCH).min(test.len());
        let x = augment.eval(&test.images.slice_batch(start, end))?;
        let pred = model.predict(&x)?;
        correct += pred
            .iter()
            .zip(&test.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / test.len() as f64)
}

fn train(o: &Overrides) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&o.config)
        .with_context(|| format!("reading {}", o.config.display()))?;
    o.apply(&mut cfg);
    cfg.seeds.truncate(1);
    let result = run_experiment(&cfg)?;
    let run = &result.runs[0];
    match (&run.final_test_acc, &run.error) {
        (Some(acc), _) => {
            println!(
                "{} seed {}: test accuracy {:.4}",
                result.name, run.seed, acc
            );
            println!("wrote {}", cfg.run_dir().display());
            Ok(true)
        }
        (None, e) => {
            eprintln!(
                "{} seed {} failed: {}",
                result.name,
                run.seed,
                e.as_deref().unwrap_or("unknown error")
            );
            Ok(false)
        }
    }
}

fn sweep(o: &Overrides) -> Result<bool> {
    let mut s =
        SweepConfig::load(&o.config).with_context(|| format!("reading {}", o.config.display()))?;
    o.apply(&mut s.base);
    let results = run_sweep(&s)?;
    let rows = summarize(&results)?;
    let comparisons = match s.mode {
        SweepMode::OneFactor => paired_comparison(&results, &results[0].name)?,
        SweepMode::Grid => Vec::new(),
    };
    print!("{}", render_report_text(&rows, &comparisons));
    println!("wrote {}", s.base.out.join("report.csv").display());
    Ok(results.iter().all(|r| !r.degraded))
}

fn report(summaries: &[PathBuf], out: Option<&Path>, baseline: Option<&str>) -> Result<()> {
    let results = summaries
        .iter()
        .map(|p| {
            let file = if p.is_dir() {
                p.join("summary.json")
            } else {
                p.clone()
            };
            load_result(&file).with_context(|| format!("reading {}", file.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = summarize(&results)?;
    let comparisons = baseline
        .map(|b| paired_comparison(&results, b))
        .transpose()?
        .unwrap_or_default();
    print!("{}", render_report_text(&rows, &comparisons));
    if let Some(out) = out {
        std::fs::write(out, render_report_csv(&rows, &comparisons))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(o) => train(&o),
        Command::Sweep(o) => sweep(&o),
        Command::Export { model, out } => {
            let packed = export_model(&read_model(&model)?)?;
            format::write(&packed, &out)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Infer { model, data } => {
            let packed =
                format::read(&model).with_context(|| format!("reading {}", model.display()))?;
            let (_, test, augment) = data.load()?;
            println!(
                "test accuracy {:.4} on {} images",
                packed_accuracy(&packed, &test, &augment)?,
                test.len()
            );
            Ok(true)
        }
        Command::Verify {
            model,
            data,
            limit,
            min_agreement,
        } => {
            let mut float = read_model(&model)?;
            let packed = export_model(&float)?;
            let (_, test, augment) = data.load()?;
            let n = limit.min(test.len());
            if n == 0 {
                bail!("no test images to compare");
            }
            let x = augment.eval(&test.images.slice_batch(0, n))?;
            let r = verify(&mut float, &packed, &x)?;
            println!(
                "top-1 agreement {}/{} ({:.4}), max logit difference {:.3e}",
                r.top1_agree,
                r.samples,
                r.agreement(),
                r.max_logit_diff
            );
            Ok(r.agreement() >= min_agreement)
        }
        Command::Report {
            summaries,
            out,
            baseline,
        } => {
            report(&summaries, out.as_deref(), baseline.as_deref())?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
