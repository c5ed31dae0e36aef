use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prostacam::config::RunConfig;
use prostacam::stages::Pipeline;
use prostacam::{PipelineError, Result};

/// Prostate MRI composite-volume classifier with Grad-CAM++ attention maps.
#[derive(Debug, Parser)]
#[command(name = "prostacam", version)]
struct Cli {
    /// Run config (TOML). Defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every stage; overrides all seeds in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-patient and per-fold work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cohort in the default dataset layout.
    Synth {
        #[arg(long)]
        n_patients: Option<usize>,
        #[arg(long)]
        positive_fraction: Option<f64>,
    },
    /// Scan and validate the dataset into a catalog.
    Ingest,
    /// Build composite volumes.
    Preprocess,
    /// Leave-one-out training and evaluation.
    Train,
    /// Grad-CAM++ maps, summed maps per outcome and attention mass.
    Explain,
    /// Metrics summary and overlay panels.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        config.output_dir = out;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.model.seed = None;
        config.train.seed = None;
        config.synth.seed = None;
    }
    if let Command::Synth {
        n_patients,
        positive_fraction,
    } = &cli.command
    {
        if let Some(n) = n_patients {
            config.synth.n_patients = *n;
        }
        if let Some(f) = positive_fraction {
            config.synth.positive_fraction = *f;
        }
    }
    config.validate()?;
    if cli.jobs == 0 {
        return Err(PipelineError::Config("--jobs must be >= 1".into()));
    }
    let pipeline = Pipeline::new(config, cli.jobs);
    match cli.command {
        Command::Synth { .. } => {
            let root = pipeline.synth()?;
            println!("synthetic cohort written to {}", root.display());
        }
        Command::Ingest => {
            let c = pipeline.ingest()?;
            println!(
                "{} records ({} positive, {} negative), {} excluded",
                c.len(),
                c.n_positive,
                c.n_negative,
                c.excluded.len()
            );
            for w in &c.warnings {
                eprintln!("warning: {}", w);
            }
        }
        Command::Preprocess => {
            let r = pipeline.preprocess()?;
            println!("{} composites written", r.len());
        }
        Command::Train => {
            let (rows, m) = pipeline.train()?;
            println!(
                "{} folds: Acc {:.1} Sen {:.1} Spec {:.1} F1 {:.1}",
                rows.len(),
                100.0 * m.accuracy,
                100.0 * m.sensitivity,
                100.0 * m.specificity,
                100.0 * m.f1
            );
        }
        Command::Explain => {
            let (rows, _) = pipeline.explain()?;
            println!("{} attention maps written", rows.len());
        }
        Command::Report => {
            let path = pipeline.report()?;
            println!("report written to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {}", e.category(), msg);
            ExitCode::FAILURE
        }
    }
}
