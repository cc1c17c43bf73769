use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod io;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Data(_) => 4,
            CliError::Numerical(_) => 5,
        }
    }
}

impl From<spatfactor::Error> for CliError {
    fn from(e: spatfactor::Error) -> Self {
        match e {
            spatfactor::Error::Spec(m) => CliError::Config(m),
            spatfactor::Error::Data(m) => CliError::Data(m),
            e @ (spatfactor::Error::Numerical(_) | spatfactor::Error::Step { .. }) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "spatfactor", version, about = "Bayesian spatiotemporal factor models with spatial clustering")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and its ground truth.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the sampler and store the chains.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        h: Option<usize>,
    },
    /// Posterior predictive draws at future time points.
    PredictTime {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// CSV with location_id,type,step and the fitted covariate columns.
        #[arg(long)]
        covariates: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Posterior predictive draws at new locations.
    PredictSpace {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// CSV with location_id,x,y.
        #[arg(long)]
        locations: PathBuf,
        /// CSV with location_id,type,time and the fitted covariate columns.
        #[arg(long)]
        covariates: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// k-means on posterior stick-breaking weights.
    Cluster {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "K", default_value_t = 2)]
        k: usize,
        /// Comma-separated kept-iteration indices (0-based).
        #[arg(long, value_delimiter = ',')]
        iters: Option<Vec<usize>>,
        /// Number of equally dispersed kept iterations when --iters is absent.
        #[arg(long, default_value_t = 10)]
        n_iters: usize,
        /// Average the weights over iterations (fixed truncation only).
        #[arg(long)]
        mean: bool,
        /// Observation type, 1-based.
        #[arg(long = "type", default_value_t = 1)]
        obs_type: usize,
        #[arg(long, default_value_t = 0)]
        chain: usize,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// CSV with location_id,group to score against.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit metrics: predictive MSE family, DIC and WAIC.
    Diagnose {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        iters: Option<Vec<usize>>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Simulate { config, out, seed } => commands::simulate(&config, &out, seed),
        Cmd::Fit { config, out, seed, chains, variant, h } => {
            commands::fit(&config, &out, commands::Overrides { seed, chains, variant, h })
        }
        Cmd::PredictTime { fit, out, horizon, covariates, seed } => {
            commands::predict_time(&fit, &out, horizon, covariates.as_deref(), seed)
        }
        Cmd::PredictSpace { fit, out, locations, covariates, seed } => {
            commands::predict_space(&fit, &out, &locations, covariates.as_deref(), seed)
        }
        Cmd::Cluster { fit, out, k, iters, n_iters, mean, obs_type, chain, restarts, max_iters, seed, truth } => {
            let opts = commands::ClusterOpts { k, iters, n_iters, mean, obs_type, chain, restarts, max_iters, seed };
            commands::cluster(&fit, &out, &opts, truth.as_deref())
        }
        Cmd::Diagnose { fit, out, iters, seed } => commands::diagnose(&fit, &out, iters, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spatfactor: {e}");
            ExitCode::from(e.code())
        }
    }
}
