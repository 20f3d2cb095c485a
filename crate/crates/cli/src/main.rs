use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pse_cli::config::ExperimentConfig;
use pse_cli::pipeline::{self, Stage};
use pse_cli::scan;
use pse_core::corpus::synthetic::SyntheticSpec;
use pse_core::evaluator::ReportFormat;

/// Personalized speech enhancement experiments.
#[derive(Parser)]
#[command(name = "pse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a corpus manifest.
    Manifest {
        #[command(subcommand)]
        source: ManifestSource,
    },
    /// Partition the corpus and build premixtures.
    Premix(RunArgs),
    /// Everything up to pretraining.
    Pretrain(RunArgs),
    /// Everything up to finetuning.
    Finetune(RunArgs),
    /// Everything up to per-speaker evaluation.
    Evaluate(RunArgs),
    /// Full pipeline including the report.
    Run(RunArgs),
    /// Merge the reports of finished runs.
    Report {
        /// Run directories or report.json files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ManifestSource {
    /// Scan speech/<speaker>/ and noise/<train|test|premix>/ under DIR.
    Scan {
        dir: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Generate the synthetic corpus into OUT_DIR with its manifest.
    Synthetic {
        out_dir: PathBuf,
        #[arg(long, default_value_t = SyntheticSpec::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = SyntheticSpec::default().test_speakers)]
        speakers: usize,
        /// Seconds of speech per test speaker.
        #[arg(long, default_value_t = SyntheticSpec::default().test_speaker_sec)]
        speaker_sec: f64,
        #[arg(long, default_value_t = SyntheticSpec::default().general_speakers)]
        general_speakers: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(short, long)]
    config: PathBuf,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set pretrain.max_steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(d) = &self.output_dir {
            overrides.push(format!("output_dir={:?}", d.display().to_string()));
        }
        ExperimentConfig::load(&self.config, &overrides)
    }
}

fn run_to(args: &RunArgs, until: Stage) -> anyhow::Result<()> {
    let cfg = args.load()?;
    let summary = pipeline::run(&cfg, until)?;
    log::info!(
        "{} stages run, {} reused; outputs in {}",
        summary.executed.len(),
        summary.reused.len(),
        summary.output_dir.display()
    );
    if let Some(report) = &summary.report {
        print!("{}", pse_core::evaluator::render_text(report));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Manifest { source } => match source {
            ManifestSource::Scan { dir, out } => {
                let m = scan::write_scan(&dir, &out)?;
                log::info!("{} entries written to {}", m.len(), out.display());
            }
            ManifestSource::Synthetic {
                out_dir,
                seed,
                speakers,
                speaker_sec,
                general_speakers,
            } => {
                let spec = SyntheticSpec {
                    seed,
                    test_speakers: speakers,
                    test_speaker_sec: speaker_sec,
                    general_speakers,
                    ..SyntheticSpec::default()
                };
                let (path, m) = scan::write_synthetic(&spec, &out_dir)?;
                log::info!("{} entries written to {}", m.len(), path.display());
            }
        },
        Command::Premix(a) => run_to(&a, Stage::Premix)?,
        Command::Pretrain(a) => run_to(&a, Stage::Pretrain)?,
        Command::Finetune(a) => run_to(&a, Stage::Finetune)?,
        Command::Evaluate(a) => run_to(&a, Stage::Evaluate)?,
        Command::Run(a) => run_to(&a, Stage::Report)?,
        Command::Report { runs, out } => {
            let merged = pipeline::merge_runs(&runs, &out, &ReportFormat::ALL)?;
            print!("{}", pse_core::evaluator::render_text(&merged));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(pse_cli::exit_code(&e) as u8)
        }
    }
}
