use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hcp_core::config::{ExperimentConfig, SEED_ENV};
use hcp_core::data::SyntheticDataset;
use hcp_core::gradcheck::purifier_check;
use hcp_core::recall::ConfidenceHistory;
use hcp_core::runner::{
    collect_reports, evaluate_model, format_rows, resume_experiment, run_ablation, run_experiment, AblationRow,
    Checkpoint, Experiment, ReportFormat,
};
use hcp_core::{HcpError, Result};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "hcp", version, about = "Multi-label class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to out.dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting over.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run FT, FP, FP+RE, FP+PU and FP+RE+PU for K seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Finite-difference check of the full model gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize results.json files found under a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
    },
    /// Write the synthetic dataset of a config and seed as JSON.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Md,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
            Format::Md => ReportFormat::Md,
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<(ExperimentConfig, u64)> {
    let mut cfg = ExperimentConfig::from_json(&fs::read_to_string(path)?)?;
    let env = std::env::var(SEED_ENV).ok();
    let seed = cfg.resolve_seed(seed, env.as_deref())?;
    Ok((cfg, seed))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            resume,
        } => {
            let (cfg, seed) = load_config(&config, seed)?;
            let out = out.unwrap_or_else(|| cfg.out.dir.clone());
            let outputs = match resume {
                Some(path) => {
                    let ck = Checkpoint::load(&path)?;
                    if ck.config != cfg || ck.rng.seed != seed {
                        return Err(HcpError::Config(
                            "checkpoint was written by a different config or seed".into(),
                        ));
                    }
                    resume_experiment(&ck, &out, None)?
                }
                None => run_experiment(&cfg, seed, &out, None)?,
            };
            let acc = outputs.report.accuracies;
            println!(
                "avg_acc={:.2} last_acc={:.2} results={}",
                100.0 * acc.avg_acc,
                100.0 * acc.last_acc,
                outputs.results.display()
            );
        }
        Command::Ablate { config, seeds, out } => {
            let (cfg, base) = load_config(&config, None)?;
            let out = out.unwrap_or_else(|| cfg.out.dir.clone());
            let seeds: Vec<u64> = (0..seeds).map(|k| base + k).collect();
            let rows = run_ablation(&cfg, &seeds, &out)?;
            let table = format_rows(&rows, ReportFormat::Md)?;
            fs::write(out.join("summary.md"), &table)?;
            fs::write(out.join("summary.json"), format_rows(&rows, ReportFormat::Json)?)?;
            print!("{table}");
        }
        Command::Eval { checkpoint, dataset } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = SyntheticDataset::from_json(&fs::read_to_string(&dataset)?)?;
            let mut history = ConfidenceHistory::default();
            let result = evaluate_model(
                &ck.state.model,
                &data.test,
                ck.state.session.max(1),
                ck.config.train.fp,
                &mut history,
            )?;
            println!(
                "{}",
                serde_json::to_string_pretty(&result).map_err(|e| HcpError::State(e.to_string()))?
            );
        }
        Command::Gradcheck { seed } => {
            let report = purifier_check(seed)?;
            let pass = report.passed(GRADCHECK_TOL);
            println!(
                "max_rel_error={:.3e} max_abs_error={:.3e} checked={} tol={GRADCHECK_TOL:e} {}",
                report.max_rel_error,
                report.max_abs_error,
                report.checked,
                if pass { "PASS" } else { "FAIL" }
            );
            if !pass {
                return Err(HcpError::Contract(format!(
                    "gradient check failed: {:.3e} >= {GRADCHECK_TOL:e}",
                    report.max_rel_error
                )));
            }
        }
        Command::Report { input, format } => {
            let rows: Vec<AblationRow> = collect_reports(&input)?
                .iter()
                .filter_map(AblationRow::from_report)
                .collect();
            print!("{}", format_rows(&rows, format.into())?);
        }
        Command::GenData { config, seed, out } => {
            let (cfg, seed) = load_config(&config, seed)?;
            let data = Experiment::new(cfg, seed)?.dataset;
            fs::write(&out, data.to_json()?)?;
            println!("train={} test={} file={}", data.train.len(), data.test.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
