//! Command-line definitions. Validation that clap cannot express (mode flag
//! interplay, value ranges) lives in `validate` helpers that return usage
//! errors.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use zinflate_core::gee_fit::{FitConfig, KSelection};
use zinflate_core::simgen::{SimScenario, ZeroInflation};

#[derive(Parser, Debug)]
#[command(
    name = "zinflate",
    version,
    about = "Spatial zero-inflated count models fitted by GEE with a low-rank spline working covariance"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the model to a CSV dataset and write estimates, surfaces and a trace.
    Fit(FitCmd),
    /// Fit, then estimate coefficient variances by leave-one-block-out jackknife.
    Jackknife(JackknifeCmd),
    /// Generate a synthetic dataset from the simulation scenario.
    Simulate(SimulateCmd),
    /// Run generate-fit-jackknife replicates and write summary tables.
    Replicate(ReplicateCmd),
}

#[derive(Args, Debug)]
pub struct IngestFlags {
    /// Input CSV with columns s1,s2,y and covariate columns.
    #[arg(long)]
    pub input: PathBuf,
    /// Standardize covariates to zero mean and unit variance before fitting.
    #[arg(long)]
    pub standardize: bool,
    /// Comma-separated covariate names entering the zero-occurrence predictor
    /// (default: all).
    #[arg(long, value_name = "NAMES")]
    pub phi_covars: Option<String>,
    /// Comma-separated covariate names entering the intensity predictor
    /// (default: all).
    #[arg(long, value_name = "NAMES")]
    pub lambda_covars: Option<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum KMode {
    Aic,
    Fixed,
}

#[derive(Args, Debug)]
pub struct FitFlags {
    /// Convergence threshold on the summed absolute coefficient change.
    #[arg(long, default_value_t = 0.03)]
    pub epsilon: f64,
    /// Cap on outer iterations before reporting non-convergence.
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Basis rank selection: AIC search or fixed ranks.
    #[arg(long, value_enum, default_value_t = KMode::Aic)]
    pub k_mode: KMode,
    /// Zero-occurrence basis rank (required with --k-mode fixed).
    #[arg(long)]
    pub k1: Option<usize>,
    /// Intensity basis rank (required with --k-mode fixed).
    #[arg(long)]
    pub k2: Option<usize>,
    /// Seed for the randomized downstream stages (blocking, scenarios).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl FitFlags {
    pub fn to_config(&self) -> Result<FitConfig, String> {
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(format!("--epsilon must be positive, got {}", self.epsilon));
        }
        if self.max_iters == 0 {
            return Err("--max-iters must be at least 1".into());
        }
        let k_selection = match self.k_mode {
            KMode::Aic => {
                if self.k1.is_some() || self.k2.is_some() {
                    return Err("--k1/--k2 only apply with --k-mode fixed".into());
                }
                KSelection::Aic
            }
            KMode::Fixed => match (self.k1, self.k2) {
                (Some(k1), Some(k2)) if k1 > 0 && k2 > 0 => KSelection::Fixed(k1, k2),
                (Some(_), Some(_)) => return Err("--k1 and --k2 must be positive".into()),
                _ => return Err("--k-mode fixed requires both --k1 and --k2".into()),
            },
        };
        Ok(FitConfig {
            epsilon: self.epsilon,
            max_outer_iters: self.max_iters,
            k_selection,
            seed: self.seed,
        })
    }
}

#[derive(Args, Debug)]
pub struct ScenarioFlags {
    /// Number of spatial locations.
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    /// Zero-inflation level, percent: 40 or 70.
    #[arg(long, default_value_t = 40)]
    pub zeros: u32,
    /// Spatial correlation strength c of the count field.
    #[arg(long, default_value_t = 0.3)]
    pub corr: f64,
}

impl ScenarioFlags {
    pub fn to_scenario(&self, seed: u64) -> Result<SimScenario, String> {
        let zeros = match self.zeros {
            40 => ZeroInflation::P40,
            70 => ZeroInflation::P70,
            other => return Err(format!("--zeros must be 40 or 70, got {other}")),
        };
        if !(0.0..=1.0).contains(&self.corr) {
            return Err(format!("--corr must lie in [0, 1], got {}", self.corr));
        }
        if self.n < 10 {
            return Err(format!("--n must be at least 10, got {}", self.n));
        }
        Ok(SimScenario::preset(self.n, zeros, self.corr, seed))
    }
}

#[derive(Args, Debug)]
pub struct FitCmd {
    #[command(flatten)]
    pub ingest: IngestFlags,
    #[command(flatten)]
    pub fit: FitFlags,
    /// Output directory (created if absent).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV of grid points (s1,s2 plus covariates) at which to
    /// evaluate the fitted surfaces; without it, surfaces are written at the
    /// observed sites.
    #[arg(long, value_name = "CSV")]
    pub covariate_grid: Option<PathBuf>,
    /// Bounding-box grid resolution used when the model needs no covariates.
    #[arg(long, default_value_t = 100)]
    pub grid: usize,
    /// Worker threads (default: all logical cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct JackknifeCmd {
    #[command(flatten)]
    pub fit_cmd: FitCmd,
    /// Number of spatial blocks for the jackknife.
    #[arg(long, default_value_t = 20)]
    pub blocks: usize,
}

#[derive(Args, Debug)]
pub struct SimulateCmd {
    #[command(flatten)]
    pub scenario: ScenarioFlags,
    /// Output directory (created if absent).
    #[arg(long)]
    pub out: PathBuf,
    /// Scenario seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReplicateCmd {
    #[command(flatten)]
    pub scenario: ScenarioFlags,
    #[command(flatten)]
    pub fit: FitFlags,
    /// Output directory (created if absent).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of replicates.
    #[arg(long, default_value_t = 200)]
    pub reps: u64,
    /// Number of spatial blocks for the per-replicate jackknife.
    #[arg(long, default_value_t = 20)]
    pub blocks: usize,
    /// Worker threads (default: all logical cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

pub fn validate_grid(grid: usize) -> Result<(), String> {
    if (10..=1000).contains(&grid) {
        Ok(())
    } else {
        Err(format!("--grid must lie in [10, 1000], got {grid}"))
    }
}
