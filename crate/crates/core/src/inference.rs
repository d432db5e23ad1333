//! Block-jackknife variance estimation on k-means spatial blocks.
//!
//! The dataset is partitioned into `B` spatially compact blocks; each block
//! is deleted in turn and the model refit on the remainder, warm-started at
//! the full-data estimate. The jackknife variance
//! `(B-1)/B * sum_b (theta_{-b} - theta_bar)^2` yields per-coefficient
//! standard errors and normal-approximation confidence intervals.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use thiserror::Error;

use crate::gee_fit::{fit_from, FitConfig, FitResult};
use crate::tps_basis::{Location, TpsBasis};
use crate::zim_model::SpatialDataset;

const KMEANS_RESTARTS: u64 = 10;
const KMEANS_MAX_ITERS: usize = 100;
const MIN_SUCCESSFUL_BLOCKS: usize = 3;
/// Each block should hold several points, so B may not exceed n / 5.
const MIN_POINTS_PER_BLOCK: usize = 5;
const NORMAL_95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("block count must be positive")]
    ZeroBlocks,
    #[error("{b} blocks over {n} locations leaves fewer than {MIN_POINTS_PER_BLOCK} points per block")]
    TooManyBlocks { b: usize, n: usize },
    #[error("only {0} leave-out refits succeeded; at least {MIN_SUCCESSFUL_BLOCKS} are needed")]
    InsufficientBlocks(usize),
    #[error("empty input")]
    EmptyInput,
}

/// A spatial partition of the data sites into `b` blocks.
#[derive(Debug, Clone)]
pub struct BlockAssignment {
    pub labels: Vec<usize>,
    pub centers: Vec<Location>,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub struct JackknifeResult {
    /// One row per successful leave-out refit, columns ordered as the
    /// flattened `theta` (beta then gamma).
    pub leave_out_estimates: Array2<f64>,
    pub variances: Array1<f64>,
    /// 95% intervals centered on the full-data estimate.
    pub intervals: Vec<(f64, f64)>,
    pub failed_blocks: Vec<usize>,
}

fn assign_labels(locations: &[Location], centers: &[Location], labels: &mut [usize]) -> bool {
    let mut changed = false;
    for (i, p) in locations.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in centers.iter().enumerate() {
            let d = p.dist(c);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        if labels[i] != best {
            labels[i] = best;
            changed = true;
        }
    }
    changed
}

fn wcss(locations: &[Location], centers: &[Location], labels: &[usize]) -> f64 {
    locations
        .iter()
        .zip(labels)
        .map(|(p, &k)| {
            let d = p.dist(&centers[k]);
            d * d
        })
        .sum()
}

fn lloyd_once(locations: &[Location], b: usize, rng: &mut impl rand::Rng) -> (Vec<usize>, Vec<Location>) {
    let n = locations.len();
    let picks = rand::seq::index::sample(rng, n, b);
    let mut centers: Vec<Location> = picks.iter().map(|i| locations[i]).collect();
    let mut labels = vec![0usize; n];
    assign_labels(locations, &centers, &mut labels);
    for _ in 0..KMEANS_MAX_ITERS {
        // Recompute means; an emptied cluster is re-seeded from the point
        // farthest from its assigned center.
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); b];
        for (p, &k) in locations.iter().zip(&labels) {
            sums[k].0 += p.s1;
            sums[k].1 += p.s2;
            sums[k].2 += 1;
        }
        for k in 0..b {
            if sums[k].2 > 0 {
                centers[k] = Location::new(sums[k].0 / sums[k].2 as f64, sums[k].1 / sums[k].2 as f64);
            } else {
                let far = locations
                    .iter()
                    .enumerate()
                    .max_by(|(i, p), (j, q)| {
                        let di = p.dist(&centers[labels[*i]]);
                        let dj = q.dist(&centers[labels[*j]]);
                        di.partial_cmp(&dj).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                centers[k] = locations[far];
                labels[far] = k;
            }
        }
        if !assign_labels(locations, &centers, &mut labels) {
            break;
        }
    }
    (labels, centers)
}

/// Deterministic k-means partition: Lloyd's algorithm with 10 seeded
/// restarts, keeping the lowest within-cluster sum of squares.
pub fn kmeans_blocks(
    locations: &[Location],
    b: usize,
    seed: u64,
) -> Result<BlockAssignment, InferenceError> {
    let n = locations.len();
    if b == 0 {
        return Err(InferenceError::ZeroBlocks);
    }
    if b * MIN_POINTS_PER_BLOCK > n {
        return Err(InferenceError::TooManyBlocks { b, n });
    }
    let mut best: Option<(f64, Vec<usize>, Vec<Location>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = {
            use rand::SeedableRng;
            let mut r = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            r.set_stream(restart);
            r
        };
        let (labels, centers) = lloyd_once(locations, b, &mut rng);
        let score = wcss(locations, &centers, &labels);
        if best.as_ref().map_or(true, |(s, _, _)| score < *s) {
            best = Some((score, labels, centers));
        }
    }
    let (_, labels, centers) = best.unwrap();
    Ok(BlockAssignment { labels, centers, b })
}

/// The jackknife variance formula applied to a matrix of leave-out
/// estimates (rows: blocks, columns: coefficients):
/// `(B-1)/B * sum_b (x_b - x_bar)^2`.
pub fn jackknife_variance(leave_out: &Array2<f64>) -> Array1<f64> {
    let b = leave_out.nrows();
    let mean = leave_out.mean_axis(ndarray::Axis(0)).unwrap();
    let mut var = Array1::zeros(leave_out.ncols());
    for row in leave_out.rows() {
        let d = &row - &mean;
        var += &d.mapv(|x| x * x);
    }
    var * ((b as f64 - 1.0) / b as f64)
}

/// Leave-one-block-out jackknife around a completed full-data fit.
///
/// Each refit rebuilds the spline basis on the retained locations and warm
/// starts from `full.theta_hat`. Blocks whose refit errors out are dropped
/// from the variance (soft, recorded in `failed_blocks`); refits that merely
/// fail to converge still contribute their final iterate.
pub fn block_jackknife(
    ds: &SpatialDataset,
    cfg: &FitConfig,
    blocks: &BlockAssignment,
    full: &FitResult,
) -> Result<JackknifeResult, InferenceError> {
    let n = ds.n();
    if blocks.labels.len() != n || blocks.b == 0 {
        return Err(InferenceError::ZeroBlocks);
    }

    let estimates: Vec<Option<Array1<f64>>> = (0..blocks.b)
        .into_par_iter()
        .map(|k| {
            let keep: Vec<usize> = (0..n).filter(|&i| blocks.labels[i] != k).collect();
            if keep.len() < 4 {
                return None;
            }
            let sub = ds.subset(&keep);
            let basis = TpsBasis::new(sub.locations()).ok()?;
            let refit = fit_from(&sub, &basis, cfg, full.theta_hat.clone()).ok()?;
            Some(refit.theta_hat.flatten())
        })
        .collect();

    let dim = full.theta_hat.dim();
    let successes = estimates.iter().flatten().count();
    if successes < MIN_SUCCESSFUL_BLOCKS {
        return Err(InferenceError::InsufficientBlocks(successes));
    }
    let mut leave_out = Array2::zeros((successes, dim));
    let mut failed_blocks = Vec::new();
    let mut row = 0;
    for (k, est) in estimates.iter().enumerate() {
        match est {
            Some(e) => {
                leave_out.row_mut(row).assign(e);
                row += 1;
            }
            None => failed_blocks.push(k),
        }
    }

    let variances = jackknife_variance(&leave_out);
    let center = full.theta_hat.flatten();
    let intervals = variances
        .iter()
        .zip(center.iter())
        .map(|(&v, &c)| {
            let half = NORMAL_95 * v.sqrt();
            (c - half, c + half)
        })
        .collect();

    Ok(JackknifeResult {
        leave_out_estimates: leave_out,
        variances,
        intervals,
        failed_blocks,
    })
}

/// Fraction of intervals that contain their paired truth.
pub fn coverage_probability(results: &[((f64, f64), f64)]) -> Result<f64, InferenceError> {
    if results.is_empty() {
        return Err(InferenceError::EmptyInput);
    }
    let hits = results
        .iter()
        .filter(|((lo, hi), truth)| lo <= truth && truth <= hi)
        .count();
    Ok(hits as f64 / results.len() as f64)
}
