use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "survode", version, about = "Survival regression with ODE-defined hazards")]
pub struct Cli {
    /// Worker threads for likelihood and simulation work.
    #[arg(long, global = true, env = "SURVODE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, env = "SURVODE_CONFIG")]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, env = "SURVODE_OUT")]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, env = "SURVODE_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a data set from the reference hazard-response scenario.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// MAP fit, Laplace evidence, information criteria and normal-approximation draws.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "SURVODE_DATA")]
        data: PathBuf,
    },
    /// Adaptive Metropolis sampling started at the MAP.
    Mcmc {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "SURVODE_DATA")]
        data: PathBuf,
    },
    /// Gibbs variable selection over covariate inclusion.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "SURVODE_DATA")]
        data: PathBuf,
    },
    /// Posterior predictive curves per covariate profile.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Posterior draws CSV from `fit` or `mcmc`.
        #[arg(long, env = "SURVODE_DRAWS")]
        draws: PathBuf,
        /// Optional data for Kaplan–Meier overlays.
        #[arg(long, env = "SURVODE_DATA")]
        data: Option<PathBuf>,
    },
    /// AIC/BIC table across fitted models.
    Compare {
        #[arg(long, env = "SURVODE_OUT")]
        out: PathBuf,
        /// `fit.toml` files to compare.
        #[arg(required = true, env = "SURVODE_FITS", value_delimiter = ',')]
        fits: Vec<PathBuf>,
    },
}

fn load(common: &Common, threads: Option<usize>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if threads.is_some() {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn init_threads(n: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Validation("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli.threads;
    let with_config = |common: &Common| -> Result<RunConfig, CliError> {
        let cfg = load(common, threads)?;
        init_threads(cfg.threads)?;
        Ok(cfg)
    };
    match &cli.command {
        Command::Simulate { common } => commands::simulate(&with_config(common)?, &common.out),
        Command::Fit { common, data } => commands::fit(&with_config(common)?, data, &common.out),
        Command::Mcmc { common, data } => commands::mcmc(&with_config(common)?, data, &common.out),
        Command::Select { common, data } => commands::select(&with_config(common)?, data, &common.out),
        Command::Predict { common, draws, data } => {
            commands::predict(&with_config(common)?, draws, data.as_deref(), &common.out)
        }
        Command::Compare { out, fits } => {
            init_threads(threads)?;
            commands::compare(fits, out)
        }
    }
}
