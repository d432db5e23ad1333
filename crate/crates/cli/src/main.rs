//! Binary entry point: argument parsing, pipeline dispatch, and the exit-code
//! contract (0 success including soft non-convergence, 1 usage, 2 data,
//! 3 numerical failure).

mod args;
mod emit;
mod ingest;

use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use clap::Parser;
use ndarray::Array1;
use rayon::prelude::*;

use args::{Cli, Command, FitCmd, JackknifeCmd, ReplicateCmd, SimulateCmd};
use emit::{BasisItersSummary, CoefficientSummary, SurfaceRow, TimingSummary};
use ingest::{DataError, IngestedData};
use zinflate_core::gee_fit::{fit, FitConfig, FitError, FitResult};
use zinflate_core::inference::{block_jackknife, kmeans_blocks, InferenceError};
use zinflate_core::simgen::{generate_dataset, SimError};
use zinflate_core::tps_basis::{BasisError, TpsBasis};
use zinflate_core::zim_model::{link_lambda, link_phi};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<BasisError> for CliError {
    fn from(e: BasisError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match &e {
            FitError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            FitError::DegenerateData | FitError::Basis(_) => CliError::Data(e.to_string()),
            FitError::SingularJacobian | FitError::Cov(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match &e {
            SimError::InvalidScenario(_) => CliError::Usage(e.to_string()),
            SimError::FactorizationFailure => CliError::Numerical(e.to_string()),
            SimError::Dataset(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match &e {
            InferenceError::ZeroBlocks | InferenceError::TooManyBlocks { .. } => {
                CliError::Usage(e.to_string())
            }
            InferenceError::InsufficientBlocks(_) => CliError::Numerical(e.to_string()),
            InferenceError::EmptyInput => CliError::Data(e.to_string()),
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ZINFLATE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let outcome = match cli.command {
        Command::Fit(cmd) => run_fit(&cmd),
        Command::Jackknife(cmd) => run_jackknife(&cmd),
        Command::Simulate(cmd) => run_simulate(&cmd),
        Command::Replicate(cmd) => run_replicate(&cmd),
    };
    if let Err(e) = outcome {
        eprintln!("zinflate: {}", e.message());
        std::process::exit(e.exit_code());
    }
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    match threads {
        None => Ok(()),
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}"))),
    }
}

/// Shared front half of `fit` and `jackknife`: validate, ingest, fit, warn on
/// soft non-convergence.
fn fit_pipeline(cmd: &FitCmd) -> Result<(IngestedData, FitConfig, FitResult), CliError> {
    args::validate_grid(cmd.grid).map_err(CliError::Usage)?;
    let cfg = cmd.fit.to_config().map_err(CliError::Usage)?;
    configure_threads(cmd.threads)?;
    let data = ingest::ingest_csv(
        &cmd.ingest.input,
        cmd.ingest.standardize,
        cmd.ingest.phi_covars.as_deref(),
        cmd.ingest.lambda_covars.as_deref(),
    )?;
    std::fs::create_dir_all(&cmd.out)?;
    let basis = TpsBasis::new(data.dataset.locations())?;
    let res = fit(&data.dataset, &basis, &cfg)?;
    if !res.converged {
        log::warn!(
            "fit stopped after {} iterations without reaching epsilon = {}; \
             estimates are recorded with converged=false",
            res.outer_iters,
            cfg.epsilon
        );
    }
    Ok((data, cfg, res))
}

/// Surface evaluation points, in order of preference: the covariate grid
/// file, a bounding-box lattice when the predictors are intercept-only, or
/// the observed sites.
fn surface_rows(
    cmd: &FitCmd,
    data: &IngestedData,
    res: &FitResult,
) -> Result<Vec<SurfaceRow>, CliError> {
    let ds = &data.dataset;
    let theta = &res.theta_hat;
    if let Some(path) = &cmd.covariate_grid {
        let grid = ingest::ingest_grid(path, &data.covariate_names, data.standardization.as_ref())?;
        let rows = grid
            .locations
            .iter()
            .enumerate()
            .map(|(i, loc)| {
                let v_row: Array1<f64> = ds.v_mask().iter().map(|&c| grid.x[[i, c]]).collect();
                let u_row: Array1<f64> = ds.u_mask().iter().map(|&c| grid.x[[i, c]]).collect();
                SurfaceRow {
                    s1: loc.s1,
                    s2: loc.s2,
                    phi: link_phi(v_row.view(), theta.beta.view()),
                    lambda: link_lambda(u_row.view(), theta.gamma.view()),
                }
            })
            .collect();
        return Ok(rows);
    }
    if ds.v_mask() == [0] && ds.u_mask() == [0] {
        let one = Array1::ones(1);
        let phi = link_phi(one.view(), theta.beta.view());
        let lambda = link_lambda(one.view(), theta.gamma.view());
        let (mut lo1, mut hi1, mut lo2, mut hi2) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for loc in ds.locations() {
            lo1 = lo1.min(loc.s1);
            hi1 = hi1.max(loc.s1);
            lo2 = lo2.min(loc.s2);
            hi2 = hi2.max(loc.s2);
        }
        let r = cmd.grid;
        let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (r - 1) as f64;
        let mut rows = Vec::with_capacity(r * r);
        for i in 0..r {
            for j in 0..r {
                rows.push(SurfaceRow {
                    s1: step(lo1, hi1, i),
                    s2: step(lo2, hi2, j),
                    phi,
                    lambda,
                });
            }
        }
        return Ok(rows);
    }
    let rows = ds
        .locations()
        .iter()
        .enumerate()
        .map(|(i, loc)| SurfaceRow {
            s1: loc.s1,
            s2: loc.s2,
            phi: res.phi_hat[i],
            lambda: res.lambda_hat[i],
        })
        .collect();
    Ok(rows)
}

fn run_fit(cmd: &FitCmd) -> Result<(), CliError> {
    let (data, cfg, res) = fit_pipeline(cmd)?;
    let names = emit::coefficient_names(
        &data.covariate_names,
        data.dataset.v_mask(),
        data.dataset.u_mask(),
    );
    emit::write_estimates(&cmd.out, &names, &res)?;
    emit::write_surfaces(&cmd.out, &surface_rows(cmd, &data, &res)?)?;
    emit::write_fit_json(&cmd.out, &names, &res, cfg.epsilon, None)?;
    Ok(())
}

fn run_jackknife(cmd: &JackknifeCmd) -> Result<(), CliError> {
    let (data, cfg, res) = fit_pipeline(&cmd.fit_cmd)?;
    let blocks = kmeans_blocks(data.dataset.locations(), cmd.blocks, cfg.seed)?;
    let jk = block_jackknife(&data.dataset, &cfg, &blocks, &res)?;
    if !jk.failed_blocks.is_empty() {
        log::warn!(
            "{} of {} leave-out refits failed and were dropped: blocks {:?}",
            jk.failed_blocks.len(),
            cmd.blocks,
            jk.failed_blocks
        );
    }
    let names = emit::coefficient_names(
        &data.covariate_names,
        data.dataset.v_mask(),
        data.dataset.u_mask(),
    );
    emit::write_estimates(&cmd.fit_cmd.out, &names, &res)?;
    emit::write_surfaces(&cmd.fit_cmd.out, &surface_rows(&cmd.fit_cmd, &data, &res)?)?;
    emit::write_fit_json(&cmd.fit_cmd.out, &names, &res, cfg.epsilon, Some((&jk, cmd.blocks)))?;
    emit::write_jackknife(&cmd.fit_cmd.out, &names, &res, &jk)?;
    Ok(())
}

fn run_simulate(cmd: &SimulateCmd) -> Result<(), CliError> {
    let sc = cmd.scenario.to_scenario(cmd.seed).map_err(CliError::Usage)?;
    let (ds, truth) = generate_dataset(&sc)?;
    std::fs::create_dir_all(&cmd.out)?;
    emit::write_dataset(&cmd.out, &ds)?;
    emit::write_truth_json(&cmd.out, &truth)?;
    Ok(())
}

/// One finished replicate of the generate-fit-jackknife pipeline.
struct RepOutcome {
    theta: Vec<f64>,
    k: (usize, usize),
    iters: usize,
    jk_se: Vec<f64>,
    covered: Vec<bool>,
}

enum RepSlot {
    Pending,
    Done(RepOutcome),
    Failed,
}

struct ReplicateState {
    slots: Vec<RepSlot>,
    durations: Vec<Option<f64>>,
    started: Instant,
    io_error: Option<std::io::Error>,
}

impl ReplicateState {
    fn new(reps: usize) -> Self {
        Self {
            slots: (0..reps).map(|_| RepSlot::Pending).collect(),
            durations: vec![None; reps],
            started: Instant::now(),
            io_error: None,
        }
    }

    /// Rewrites all three summary tables from the replicates absorbed so far,
    /// so an interrupted run still leaves consistent partial tables behind.
    fn flush(&mut self, dir: &Path, names: &[String]) {
        let done: Vec<&RepOutcome> = self
            .slots
            .iter()
            .filter_map(|s| match s {
                RepSlot::Done(o) => Some(o),
                _ => None,
            })
            .collect();
        let failed = self.slots.iter().filter(|s| matches!(s, RepSlot::Failed)).count() as u64;
        let attempted = done.len() as u64 + failed;
        if done.is_empty() {
            let timing = TimingSummary {
                replicates: attempted,
                completed: 0,
                failed,
                mean_seconds: 0.0,
                total_seconds: self.started.elapsed().as_secs_f64(),
            };
            if let Err(e) = emit::write_timing(dir, &timing) {
                self.io_error.get_or_insert(e);
            }
            return;
        }

        let m = done.len();
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / m as f64;
        let sd = |xs: &[f64], mu: f64| {
            (m > 1).then(|| {
                (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (m as f64 - 1.0)).sqrt()
            })
        };

        let mut coefs = Vec::with_capacity(names.len());
        for (j, name) in names.iter().enumerate() {
            let est: Vec<f64> = done.iter().map(|o| o.theta[j]).collect();
            let ses: Vec<f64> = done.iter().map(|o| o.jk_se[j]).collect();
            let hits = done.iter().filter(|o| o.covered[j]).count();
            let mu = mean(&est);
            coefs.push(CoefficientSummary {
                name: name.clone(),
                mean: mu,
                sd: sd(&est, mu),
                bj_se_mean: Some(mean(&ses)),
                coverage: Some(hits as f64 / m as f64),
            });
        }
        let k1: Vec<f64> = done.iter().map(|o| o.k.0 as f64).collect();
        let k2: Vec<f64> = done.iter().map(|o| o.k.1 as f64).collect();
        let it: Vec<f64> = done.iter().map(|o| o.iters as f64).collect();
        let (k1m, k2m, itm) = (mean(&k1), mean(&k2), mean(&it));
        let basis = BasisItersSummary {
            k1_mean: k1m,
            k1_sd: sd(&k1, k1m),
            k2_mean: k2m,
            k2_sd: sd(&k2, k2m),
            iters_mean: itm,
            iters_sd: sd(&it, itm),
        };
        let spent: Vec<f64> = self.durations.iter().filter_map(|d| *d).collect();
        let timing = TimingSummary {
            replicates: attempted,
            completed: m as u64,
            failed,
            mean_seconds: spent.iter().sum::<f64>() / spent.len().max(1) as f64,
            total_seconds: self.started.elapsed().as_secs_f64(),
        };

        for res in [
            emit::write_means_sd(dir, &coefs),
            emit::write_basis_iters(dir, &basis),
            emit::write_timing(dir, &timing),
        ] {
            if let Err(e) = res {
                self.io_error.get_or_insert(e);
            }
        }
    }
}

fn one_replicate(cmd: &ReplicateCmd, cfg0: &FitConfig, rep: u64) -> Result<RepOutcome, CliError> {
    let seed = cmd.fit.seed + rep;
    let sc = cmd.scenario.to_scenario(seed).map_err(CliError::Usage)?;
    let (ds, truth) = generate_dataset(&sc)?;
    let basis = TpsBasis::new(ds.locations())?;
    let cfg = FitConfig {
        seed,
        ..cfg0.clone()
    };
    let res = fit(&ds, &basis, &cfg)?;
    if !res.converged {
        return Err(CliError::Numerical(format!(
            "replicate {rep} did not converge in {} iterations",
            cfg.max_outer_iters
        )));
    }
    let blocks = kmeans_blocks(ds.locations(), cmd.blocks, seed)?;
    let jk = block_jackknife(&ds, &cfg, &blocks, &res)?;
    let flat = res.theta_hat.flatten();
    let truth_flat = truth.theta_star.flatten();
    let covered = (0..flat.len())
        .map(|j| {
            let (lo, hi) = jk.intervals[j];
            lo <= truth_flat[j] && truth_flat[j] <= hi
        })
        .collect();
    Ok(RepOutcome {
        theta: flat.to_vec(),
        k: res.k_hat,
        iters: res.outer_iters,
        jk_se: jk.variances.iter().map(|v| v.sqrt()).collect(),
        covered,
    })
}

fn run_replicate(cmd: &ReplicateCmd) -> Result<(), CliError> {
    if cmd.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    let cfg0 = cmd.fit.to_config().map_err(CliError::Usage)?;
    let sc0 = cmd.scenario.to_scenario(cmd.fit.seed).map_err(CliError::Usage)?;
    configure_threads(cmd.threads)?;
    std::fs::create_dir_all(&cmd.out)?;

    // Coefficient labels come from a probe draw of the scenario; generated
    // covariates are named x1..xp and enter both predictors.
    let (probe, _) = generate_dataset(&sc0)?;
    let covariate_names: Vec<String> =
        (1..probe.x().ncols()).map(|j| format!("x{j}")).collect();
    let names = emit::coefficient_names(&covariate_names, probe.v_mask(), probe.u_mask());

    let state = Mutex::new(ReplicateState::new(cmd.reps as usize));
    (0..cmd.reps).into_par_iter().for_each(|rep| {
        let t0 = Instant::now();
        let outcome = one_replicate(cmd, &cfg0, rep);
        let dt = t0.elapsed().as_secs_f64();
        let mut st = state.lock().expect("replicate state lock");
        st.durations[rep as usize] = Some(dt);
        st.slots[rep as usize] = match outcome {
            Ok(o) => RepSlot::Done(o),
            Err(e) => {
                log::warn!("replicate {rep} failed: {}", e.message());
                RepSlot::Failed
            }
        };
        st.flush(&cmd.out, &names);
    });

    let mut st = state.into_inner().expect("replicate state lock");
    st.flush(&cmd.out, &names);
    if let Some(e) = st.io_error {
        return Err(e.into());
    }
    let completed = st
        .slots
        .iter()
        .filter(|s| matches!(s, RepSlot::Done(_)))
        .count();
    if completed == 0 {
        return Err(CliError::Numerical(format!(
            "all {} replicates failed; see warnings above",
            cmd.reps
        )));
    }
    Ok(())
}
