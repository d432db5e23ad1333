//! CSV ingestion: `s1,s2,y` plus covariate columns, with optional
//! standardization and per-component covariate masks.

use std::path::Path;

use ndarray::Array2;
use thiserror::Error;
use zinflate_core::tps_basis::Location;
use zinflate_core::zim_model::{DatasetError, SpatialDataset};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: count value `{value}` is not a non-negative integer")]
    NonIntegerCount { row: usize, value: String },
    #[error("row {row}, column `{column}`: value `{value}` is not a finite number")]
    NonFiniteValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("covariate `{0}` has zero variance; cannot standardize")]
    ZeroVariance(String),
    #[error("unknown covariate `{0}` in a mask flag")]
    UnknownCovariate(String),
    #[error("file has no data rows")]
    NoRows,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Per-covariate shift and scale applied during standardization, kept so
/// that prediction grids can be transformed identically. Entries follow the
/// training covariate order.
#[derive(Debug, Clone)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

#[derive(Debug)]
pub struct IngestedData {
    pub dataset: SpatialDataset,
    /// Covariate column names in design order (excluding the intercept).
    pub covariate_names: Vec<String>,
    pub standardization: Option<Standardization>,
}

/// Raw columns of a surface-evaluation grid file: locations plus covariate
/// values matching the training columns by name.
pub struct GridData {
    pub locations: Vec<Location>,
    /// `len(locations) x (p+1)` design with intercept, columns ordered as in
    /// the training data.
    pub x: Array2<f64>,
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<RawTable, DataError> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(record.iter().map(|f| f.trim().to_string()).collect());
    }
    if rows.is_empty() {
        return Err(DataError::NoRows);
    }
    Ok(RawTable { header, rows })
}

fn column_index(table: &RawTable, name: &str) -> Result<usize, DataError> {
    table
        .header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DataError::MissingColumn(name.to_string()))
}

fn parse_finite(value: &str, row: usize, column: &str) -> Result<f64, DataError> {
    match value.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::NonFiniteValue {
            row,
            column: column.to_string(),
            value: value.to_string(),
        }),
    }
}

fn parse_count(value: &str, row: usize) -> Result<u64, DataError> {
    let bad = || DataError::NonIntegerCount {
        row,
        value: value.to_string(),
    };
    let v: f64 = value.parse().map_err(|_| bad())?;
    if !v.is_finite() || v < 0.0 || v.fract() != 0.0 || v > u64::MAX as f64 {
        return Err(bad());
    }
    Ok(v as u64)
}

fn mask_from_names(
    spec: Option<&str>,
    covariate_names: &[String],
) -> Result<Vec<usize>, DataError> {
    // Column 0 is the intercept; covariate j sits at design column j+1.
    let mut mask = vec![0usize];
    match spec {
        None => mask.extend(1..=covariate_names.len()),
        Some(list) => {
            for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let j = covariate_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| DataError::UnknownCovariate(name.to_string()))?;
                mask.push(j + 1);
            }
        }
    }
    Ok(mask)
}

pub fn ingest_csv(
    path: &Path,
    standardize: bool,
    phi_covars: Option<&str>,
    lambda_covars: Option<&str>,
) -> Result<IngestedData, DataError> {
    let table = read_table(path)?;
    let i_s1 = column_index(&table, "s1")?;
    let i_s2 = column_index(&table, "s2")?;
    let i_y = column_index(&table, "y")?;

    let covariate_cols: Vec<usize> = (0..table.header.len())
        .filter(|&j| j != i_s1 && j != i_s2 && j != i_y)
        .collect();
    let covariate_names: Vec<String> = covariate_cols
        .iter()
        .map(|&j| table.header[j].clone())
        .collect();

    let n = table.rows.len();
    let p = covariate_cols.len();
    let mut locations = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut x = Array2::ones((n, p + 1));
    for (i, row) in table.rows.iter().enumerate() {
        // Row numbers in messages are 1-based data rows, matching the file
        // with its header line stripped.
        let rownum = i + 1;
        let s1 = parse_finite(&row[i_s1], rownum, "s1")?;
        let s2 = parse_finite(&row[i_s2], rownum, "s2")?;
        locations.push(Location::new(s1, s2));
        y.push(parse_count(&row[i_y], rownum)?);
        for (dest, &j) in covariate_cols.iter().enumerate() {
            x[[i, dest + 1]] = parse_finite(&row[j], rownum, &table.header[j])?;
        }
    }

    let standardization = if standardize {
        let mut means = Vec::with_capacity(p);
        let mut sds = Vec::with_capacity(p);
        for j in 0..p {
            let col = x.column(j + 1);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (n as f64 - 1.0).max(1.0);
            let sd = var.sqrt();
            if sd == 0.0 {
                return Err(DataError::ZeroVariance(covariate_names[j].clone()));
            }
            means.push(mean);
            sds.push(sd);
        }
        for j in 0..p {
            let (mean, sd) = (means[j], sds[j]);
            x.column_mut(j + 1).mapv_inplace(|v| (v - mean) / sd);
        }
        Some(Standardization { means, sds })
    } else {
        None
    };

    let v_mask = mask_from_names(phi_covars, &covariate_names)?;
    let u_mask = mask_from_names(lambda_covars, &covariate_names)?;
    let dataset = SpatialDataset::new(locations, y, x, v_mask, u_mask)?;
    Ok(IngestedData {
        dataset,
        covariate_names,
        standardization,
    })
}

/// Reads a surface-evaluation grid whose covariate columns must cover the
/// training covariates by name; applies the training standardization.
pub fn ingest_grid(
    path: &Path,
    covariate_names: &[String],
    standardization: Option<&Standardization>,
) -> Result<GridData, DataError> {
    let table = read_table(path)?;
    let i_s1 = column_index(&table, "s1")?;
    let i_s2 = column_index(&table, "s2")?;
    let cols: Vec<usize> = covariate_names
        .iter()
        .map(|name| column_index(&table, name))
        .collect::<Result<_, _>>()?;

    let n = table.rows.len();
    let mut locations = Vec::with_capacity(n);
    let mut x = Array2::ones((n, covariate_names.len() + 1));
    for (i, row) in table.rows.iter().enumerate() {
        let rownum = i + 1;
        let s1 = parse_finite(&row[i_s1], rownum, "s1")?;
        let s2 = parse_finite(&row[i_s2], rownum, "s2")?;
        locations.push(Location::new(s1, s2));
        for (dest, &j) in cols.iter().enumerate() {
            let mut v = parse_finite(&row[j], rownum, &table.header[j])?;
            if let Some(st) = standardization {
                v = (v - st.means[dest]) / st.sds[dest];
            }
            x[[i, dest + 1]] = v;
        }
    }
    Ok(GridData { locations, x })
}
