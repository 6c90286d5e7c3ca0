//! Command-line driver: one subcommand per pipeline stage, all sharing an
//! artifact directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use detden::harness::{markdown, write_report, ExperimentConfig, MetricsReport, Pipeline, ReportFormat, StageReport};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "detden", version, about = "Detect-and-denoise defense pipeline for observation attacks on control policies")]
struct Cli {
    /// TOML configuration layered over the defaults. Without it, the
    /// configuration saved in the output directory is used when present.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Artifact directory shared by all stages.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Override one configuration key, e.g. `--set shield.epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the victim policy (and a critic for PPO victims).
    TrainPolicy,
    /// Collect the clean normal dataset and the calibration episodes.
    Collect,
    /// Attack the stored normal dataset offline.
    Augment,
    /// Fit the detector on clean sequences.
    TrainDetector,
    /// Fit the denoiser on attacked and clean pairs.
    TrainDenoiser,
    /// Calibrate the anomaly threshold, the optional vulnerability gate and
    /// the learned adversary.
    TuneThresholds,
    /// Run the rollout matrix and write metrics.json.
    Evaluate,
    /// Run defense-aware attacks and add the adaptive table to metrics.json.
    AdaptiveEval,
    /// Render metrics.json as report files.
    Report {
        /// Comma-separated subset of json, csv, markdown, plots.
        #[arg(long, value_delimiter = ',', default_value = "json,csv,markdown,plots")]
        format: Vec<String>,
    },
}

fn config(cli: &Cli) -> detden::Result<ExperimentConfig> {
    let saved = cli.out.join("config.toml");
    let file = cli.config.clone().or_else(|| saved.exists().then_some(saved));
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    ExperimentConfig::load(file.as_deref(), &overrides)
}

fn stage(name: &str, r: StageReport) {
    info!("{name}: {} environment steps", r.env_steps);
    println!("{name} done ({} environment steps)", r.env_steps);
}

fn summary(path: &Path, m: &MetricsReport) {
    println!("wrote {}", path.display());
    print!("{}", markdown(m));
}

fn run(cli: &Cli) -> detden::Result<()> {
    let cfg = config(cli)?;
    let p = Pipeline::new(cfg, &cli.out)?;
    match &cli.command {
        Command::TrainPolicy => stage("train-policy", p.train_policy()?),
        Command::Collect => stage("collect", p.collect()?),
        Command::Augment => stage("augment", p.augment()?),
        Command::TrainDetector => stage("train-detector", p.train_detector()?),
        Command::TrainDenoiser => stage("train-denoiser", p.train_denoiser()?),
        Command::TuneThresholds => stage("tune-thresholds", p.tune_thresholds()?),
        Command::Evaluate => summary(&p.metrics_path(), &p.evaluate()?),
        Command::AdaptiveEval => summary(&p.metrics_path(), &p.adaptive_eval()?),
        Command::Report { format } => {
            let formats = format.iter().map(|f| f.parse()).collect::<detden::Result<Vec<ReportFormat>>>()?;
            for f in write_report(&p.load_metrics()?, &cli.out, &formats)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
