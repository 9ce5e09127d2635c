use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sive::app::{self, EstimateRequest, GridFlags, SpecChoice};
use sive::io::{Binarize, DatasetSchema};
use sive::sive_core::design::GroupThresholds;
use sive::sive_core::inference::Alternative;
use sive::sive_core::EstimatorKind;
use sive::{Error, Result};

#[derive(Parser)]
#[command(name = "sive", version, about = "Saturated instrumental-variable estimation and inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Point estimate, standard error, confidence interval and t-test.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        /// NOT_SATURATED, FULLY_SATURATED, SATURATED_INSTRUMENTS or SATURATED_CONTROLS.
        #[arg(long, default_value = "FULLY_SATURATED")]
        spec: SpecChoice,
        /// SIVE, TSLS_SATURATED, JIVE1, JIVE2 or TSLS_GENERIC.
        #[arg(long, default_value = "SIVE")]
        estimator: EstimatorKind,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Null value for the reported t-test.
        #[arg(long, default_value_t = 0.0)]
        beta0: f64,
        /// Also evaluate the estimate with the dense reference implementation.
        #[arg(long)]
        reference: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Identification-robust confidence set by inverting the score test.
    RobustCi {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, allow_hyphen_values = true)]
        grid_low: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        grid_high: Option<f64>,
        #[arg(long)]
        grid_step: Option<f64>,
        /// two-sided, greater or less.
        #[arg(long, default_value = "two-sided")]
        alternative: Alternative,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo bias and size experiments from a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `master_seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Group sizes and threshold violations.
    Audit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    outcome: String,
    #[arg(long)]
    treatment: String,
    #[arg(long)]
    instrument: String,
    /// Comma-separated covariate columns defining the groups.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Recode COL to 1[COL > THRESH]; repeatable.
    #[arg(long, value_name = "COL:THRESH")]
    binarize: Vec<Binarize>,
    #[arg(long, default_value_t = 2)]
    min_active: usize,
    #[arg(long, default_value_t = 2)]
    min_inactive: usize,
    #[arg(long, default_value_t = 1)]
    min_group_size: usize,
}

impl DataArgs {
    fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            outcome: self.outcome.clone(),
            treatment: self.treatment.clone(),
            instrument: self.instrument.clone(),
            covariates: self.covariates.clone(),
        }
    }

    fn thresholds(&self) -> Result<GroupThresholds> {
        if self.min_active == 0 || self.min_inactive == 0 {
            return Err(Error::Validation("--min-active and --min-inactive must be at least 1".into()));
        }
        Ok(GroupThresholds {
            min_active: self.min_active,
            min_inactive: self.min_inactive,
            min_size: self.min_group_size,
        })
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => sive::io::write_json(path, value),
        None => {
            let mut text = serde_json::to_string_pretty(value)?;
            text.push('\n');
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate {
            data,
            spec,
            estimator,
            alpha,
            beta0,
            reference,
            out,
        } => {
            let req = EstimateRequest {
                spec,
                estimator,
                alpha,
                beta0,
                thresholds: data.thresholds()?,
                reference,
            };
            let report = app::cmd_estimate(&data.data, &data.schema(), &data.binarize, &req)?;
            emit(&report, out.as_deref())
        }
        Command::RobustCi {
            data,
            alpha,
            grid_low,
            grid_high,
            grid_step,
            alternative,
            out,
        } => {
            let flags = GridFlags {
                low: grid_low,
                high: grid_high,
                step: grid_step,
            };
            let report = app::cmd_robust_ci(&data.data, &data.schema(), &data.binarize, data.thresholds()?, flags, alpha, alternative)?;
            emit(&report, out.as_deref())
        }
        Command::Simulate { config, out, seed } => {
            let manifest = app::cmd_simulate(&config, &out, seed)?;
            emit(&manifest, None)
        }
        Command::Audit { data, out } => {
            let report = app::cmd_audit(&data.data, &data.schema(), &data.binarize, data.thresholds()?)?;
            emit(&report, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(&e, Error::Core(sive::sive_core::Error::NonPositiveVariance { .. } | sive::sive_core::Error::WeakDenominator { .. })) {
                eprintln!("hint: the identification-robust test (`sive robust-ci`) does not need a positive variance or a strong first stage");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
