//! Output artifacts. Every file is written to a temporary sibling and
//! renamed into place, so partially written tables never appear under the
//! final names.

use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use zinflate_core::gee_fit::FitResult;
use zinflate_core::inference::JackknifeResult;
use zinflate_core::simgen::TruthRecord;
use zinflate_core::zim_model::SpatialDataset;

pub fn atomic_write(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

fn csv_bytes(rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for row in rows {
        wtr.write_record(&row).expect("in-memory csv write");
    }
    wtr.into_inner().expect("in-memory csv flush")
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), num)
}

/// Coefficient labels in flattened order: the beta block over the masked
/// zero-occurrence columns, then the gamma block.
pub fn coefficient_names(
    covariate_names: &[String],
    v_mask: &[usize],
    u_mask: &[usize],
) -> Vec<String> {
    let label = |prefix: &str, col: usize| {
        if col == 0 {
            format!("{prefix}_intercept")
        } else {
            format!("{prefix}_{}", covariate_names[col - 1])
        }
    };
    v_mask
        .iter()
        .map(|&c| label("beta", c))
        .chain(u_mask.iter().map(|&c| label("gamma", c)))
        .collect()
}

pub fn write_estimates(dir: &Path, names: &[String], res: &FitResult) -> io::Result<()> {
    let mut rows = vec![vec!["name".to_string(), "value".to_string()]];
    let flat = res.theta_hat.flatten();
    for (name, value) in names.iter().zip(flat.iter()) {
        rows.push(vec![name.clone(), num(*value)]);
    }
    rows.push(vec!["k1".into(), res.k_hat.0.to_string()]);
    rows.push(vec!["k2".into(), res.k_hat.1.to_string()]);
    rows.push(vec!["iterations".into(), res.outer_iters.to_string()]);
    rows.push(vec!["converged".into(), res.converged.to_string()]);
    atomic_write(&dir.join("estimates.csv"), &csv_bytes(rows))
}

pub struct SurfaceRow {
    pub s1: f64,
    pub s2: f64,
    pub phi: f64,
    pub lambda: f64,
}

pub fn write_surfaces(dir: &Path, rows: &[SurfaceRow]) -> io::Result<()> {
    let mut out = vec![vec![
        "s1".to_string(),
        "s2".to_string(),
        "phi_hat".to_string(),
        "lambda_hat".to_string(),
    ]];
    for r in rows {
        out.push(vec![num(r.s1), num(r.s2), num(r.phi), num(r.lambda)]);
    }
    atomic_write(&dir.join("surfaces.csv"), &csv_bytes(out))
}

#[derive(Serialize)]
struct TraceEntry {
    iteration: usize,
    k1: usize,
    k2: usize,
    theta_change: f64,
    theta: Vec<f64>,
}

#[derive(Serialize)]
struct JackknifeReport {
    blocks: usize,
    failed_blocks: Vec<usize>,
    variances: Vec<f64>,
}

#[derive(Serialize)]
struct FitReport<'a> {
    coefficient_names: &'a [String],
    theta: Vec<f64>,
    k1: usize,
    k2: usize,
    iterations: usize,
    converged: bool,
    final_score_norm: f64,
    epsilon: f64,
    trace: Vec<TraceEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    jackknife: Option<JackknifeReport>,
}

pub fn write_fit_json(
    dir: &Path,
    names: &[String],
    res: &FitResult,
    epsilon: f64,
    jackknife: Option<(&JackknifeResult, usize)>,
) -> io::Result<()> {
    let report = FitReport {
        coefficient_names: names,
        theta: res.theta_hat.flatten().to_vec(),
        k1: res.k_hat.0,
        k2: res.k_hat.1,
        iterations: res.outer_iters,
        converged: res.converged,
        final_score_norm: res.final_score_norm,
        epsilon,
        trace: res
            .trace
            .iter()
            .enumerate()
            .map(|(i, rec)| TraceEntry {
                iteration: i + 1,
                k1: rec.k.0,
                k2: rec.k.1,
                theta_change: rec.theta_change,
                theta: rec.theta.flatten().to_vec(),
            })
            .collect(),
        jackknife: jackknife.map(|(jk, blocks)| JackknifeReport {
            blocks,
            failed_blocks: jk.failed_blocks.clone(),
            variances: jk.variances.to_vec(),
        }),
    };
    let mut bytes = serde_json::to_vec_pretty(&report).expect("serialize fit report");
    bytes.push(b'\n');
    atomic_write(&dir.join("fit.json"), &bytes)
}

pub fn write_jackknife(
    dir: &Path,
    names: &[String],
    res: &FitResult,
    jk: &JackknifeResult,
) -> io::Result<()> {
    let mut rows = vec![vec![
        "name".to_string(),
        "estimate".to_string(),
        "variance".to_string(),
        "se".to_string(),
        "ci_lower".to_string(),
        "ci_upper".to_string(),
    ]];
    let flat = res.theta_hat.flatten();
    for (j, name) in names.iter().enumerate() {
        let (lo, hi) = jk.intervals[j];
        rows.push(vec![
            name.clone(),
            num(flat[j]),
            num(jk.variances[j]),
            num(jk.variances[j].sqrt()),
            num(lo),
            num(hi),
        ]);
    }
    atomic_write(&dir.join("jackknife.csv"), &csv_bytes(rows))
}

pub fn write_dataset(dir: &Path, ds: &SpatialDataset) -> io::Result<()> {
    let p = ds.x().ncols() - 1;
    let mut header = vec!["s1".to_string(), "s2".to_string(), "y".to_string()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    let mut rows = vec![header];
    for i in 0..ds.n() {
        let loc = ds.locations()[i];
        let mut row = vec![num(loc.s1), num(loc.s2), ds.y()[i].to_string()];
        row.extend((1..=p).map(|j| num(ds.x()[[i, j]])));
        rows.push(row);
    }
    atomic_write(&dir.join("data.csv"), &csv_bytes(rows))
}

pub fn write_truth_json(dir: &Path, truth: &TruthRecord) -> io::Result<()> {
    #[derive(Serialize)]
    struct TruthReport {
        beta: Vec<f64>,
        gamma: Vec<f64>,
        phi: Vec<f64>,
        lambda: Vec<f64>,
    }
    let report = TruthReport {
        beta: truth.theta_star.beta.to_vec(),
        gamma: truth.theta_star.gamma.to_vec(),
        phi: truth.phi.to_vec(),
        lambda: truth.lambda.to_vec(),
    };
    let mut bytes = serde_json::to_vec_pretty(&report).expect("serialize truth record");
    bytes.push(b'\n');
    atomic_write(&dir.join("truth.json"), &bytes)
}

/// Per-coefficient replication summary. `sd`, `bj_se_mean` and `coverage`
/// are `None` when undefined (single replicate, or no jackknife results).
pub struct CoefficientSummary {
    pub name: String,
    pub mean: f64,
    pub sd: Option<f64>,
    pub bj_se_mean: Option<f64>,
    pub coverage: Option<f64>,
}

pub fn write_means_sd(dir: &Path, summaries: &[CoefficientSummary]) -> io::Result<()> {
    let mut rows = vec![vec![
        "name".to_string(),
        "mean".to_string(),
        "sd".to_string(),
        "bj_se_mean".to_string(),
        "coverage".to_string(),
    ]];
    for s in summaries {
        rows.push(vec![
            s.name.clone(),
            num(s.mean),
            opt_num(s.sd),
            opt_num(s.bj_se_mean),
            opt_num(s.coverage),
        ]);
    }
    atomic_write(&dir.join("table_means_sd.csv"), &csv_bytes(rows))
}

pub struct BasisItersSummary {
    pub k1_mean: f64,
    pub k1_sd: Option<f64>,
    pub k2_mean: f64,
    pub k2_sd: Option<f64>,
    pub iters_mean: f64,
    pub iters_sd: Option<f64>,
}

pub fn write_basis_iters(dir: &Path, s: &BasisItersSummary) -> io::Result<()> {
    let rows = vec![
        vec![
            "k1_mean".to_string(),
            "k1_sd".to_string(),
            "k2_mean".to_string(),
            "k2_sd".to_string(),
            "iters_mean".to_string(),
            "iters_sd".to_string(),
        ],
        vec![
            num(s.k1_mean),
            opt_num(s.k1_sd),
            num(s.k2_mean),
            opt_num(s.k2_sd),
            num(s.iters_mean),
            opt_num(s.iters_sd),
        ],
    ];
    atomic_write(&dir.join("table_basis_iters.csv"), &csv_bytes(rows))
}

pub struct TimingSummary {
    pub replicates: u64,
    pub completed: u64,
    pub failed: u64,
    pub mean_seconds: f64,
    pub total_seconds: f64,
}

pub fn write_timing(dir: &Path, t: &TimingSummary) -> io::Result<()> {
    let rows = vec![
        vec![
            "replicates".to_string(),
            "completed".to_string(),
            "failed".to_string(),
            "mean_seconds".to_string(),
            "total_seconds".to_string(),
        ],
        vec![
            t.replicates.to_string(),
            t.completed.to_string(),
            t.failed.to_string(),
            num(t.mean_seconds),
            num(t.total_seconds),
        ],
    ];
    atomic_write(&dir.join("timing.csv"), &csv_bytes(rows))
}
