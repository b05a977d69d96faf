//! Observed data, sample moments, and instrumental-variable estimates of the
//! total effect of a treatment on a response.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::effects::{EffectsError, MomentSource, MomentSummary};
use crate::linalg::{self, SINGULAR_CONDITION};

/// Relative relevance threshold: an instrument is weak when
/// `|sigma_xz| < threshold * sqrt(sigma_xx sigma_zz)`.
pub const WEAK_INSTRUMENT_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("weak instrument: |first-stage covariance| = {denominator:e} is below the relevance threshold")]
    WeakInstrument { denominator: f64 },
    #[error("instrument covariance block is singular (collinear instruments)")]
    SingularInstrumentBlock,
    #[error("no instruments given")]
    NoInstruments,
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Effects(#[from] EffectsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Rows of observations over named columns, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<String>,
    data: Vec<f64>,
}

impl Dataset {
    pub fn new(columns: Vec<String>, data: Vec<f64>) -> Result<Self, EstimationError> {
        let p = columns.len();
        if p == 0 {
            return Err(EstimationError::Data("no columns".into()));
        }
        if !data.len().is_multiple_of(p) {
            return Err(EstimationError::Data(format!(
                "{} values do not fill rows of {p} columns",
                data.len()
            )));
        }
        let mut sorted = columns.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != p {
            return Err(EstimationError::Data("duplicate column names".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(EstimationError::Data("missing or non-finite value".into()));
        }
        Ok(Self { columns, data })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.columns.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_cols();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_cols())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows().map(|r| r[j]).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Reads a CSV file with a header row of column names.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, EstimationError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let columns: Vec<String> = rdr
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut data = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != columns.len() {
                return Err(EstimationError::Data(format!(
                    "row {} has {} cells, expected {}",
                    line + 1,
                    record.len(),
                    columns.len()
                )));
            }
            for cell in record.iter() {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    EstimationError::Data(format!("row {}: cannot parse `{cell}`", line + 1))
                })?;
                data.push(v);
            }
        }
        Self::new(columns, data)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, EstimationError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EstimationError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.columns)?;
        for row in self.rows() {
            wtr.write_record(row.iter().map(|v| format!("{v:?}")))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Column means and the covariance matrix with divisor `n - 1`.
pub fn sample_moments(data: &Dataset) -> Result<MomentSummary, EstimationError> {
    let n = data.n_rows();
    if n < 2 {
        return Err(EstimationError::TooFewRows(n));
    }
    let p = data.n_cols();
    let mut mean = DVector::zeros(p);
    for row in data.rows() {
        for j in 0..p {
            mean[j] += row[j];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(p, p);
    let mut centered = vec![0.0; p];
    for row in data.rows() {
        for j in 0..p {
            centered[j] = row[j] - mean[j];
        }
        for i in 0..p {
            for j in i..p {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..p {
        for j in i..p {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(MomentSummary::new(
        data.columns().to_vec(),
        mean,
        cov,
        MomentSource::Sample,
        Some(n),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IVEstimate {
    pub gamma_hat: f64,
    pub instruments: Vec<String>,
    /// `sigma_xz` for one instrument, `Sigma_xz Sigma_zz^-1 Sigma_zx` for
    /// two-stage least squares.
    pub denominator: f64,
}

/// `value < bound`, also true when either side is NaN.
fn below(value: f64, bound: f64) -> bool {
    !matches!(
        value.partial_cmp(&bound),
        Some(std::cmp::Ordering::Greater | std::cmp::Ordering::Equal)
    )
}

/// `gamma = sigma_yz / sigma_xz`. Instrument validity (no path from `z` to
/// `y` except through `x`) is the caller's assertion.
pub fn iv_estimate(
    moments: &MomentSummary,
    x: &str,
    y: &str,
    z: &str,
) -> Result<IVEstimate, EstimationError> {
    iv_estimate_with_threshold(moments, x, y, z, WEAK_INSTRUMENT_THRESHOLD)
}

pub fn iv_estimate_with_threshold(
    moments: &MomentSummary,
    x: &str,
    y: &str,
    z: &str,
    threshold: f64,
) -> Result<IVEstimate, EstimationError> {
    let sigma_xz = moments.cov(x, z)?;
    let scale = (moments.var(x)? * moments.var(z)?).sqrt();
    if below(sigma_xz.abs(), threshold * scale) || sigma_xz == 0.0 {
        return Err(EstimationError::WeakInstrument {
            denominator: sigma_xz,
        });
    }
    Ok(IVEstimate {
        gamma_hat: moments.cov(y, z)? / sigma_xz,
        instruments: vec![z.to_string()],
        denominator: sigma_xz,
    })
}

/// Two-stage least squares from moments:
/// `(Sigma_xz Sigma_zz^-1 Sigma_zy) / (Sigma_xz Sigma_zz^-1 Sigma_zx)`.
pub fn tsls_estimate<S: AsRef<str>>(
    moments: &MomentSummary,
    x: &str,
    y: &str,
    instruments: &[S],
) -> Result<IVEstimate, EstimationError> {
    tsls_estimate_with_threshold(moments, x, y, instruments, WEAK_INSTRUMENT_THRESHOLD)
}

pub fn tsls_estimate_with_threshold<S: AsRef<str>>(
    moments: &MomentSummary,
    x: &str,
    y: &str,
    instruments: &[S],
    threshold: f64,
) -> Result<IVEstimate, EstimationError> {
    if instruments.is_empty() {
        return Err(EstimationError::NoInstruments);
    }
    let zz = moments.block(instruments, instruments)?;
    let zx = moments.block(instruments, &[x])?;
    let zy = moments.block(instruments, &[y])?;
    let mut rhs = DMatrix::zeros(instruments.len(), 2);
    rhs.column_mut(0).copy_from(&zx.column(0));
    rhs.column_mut(1).copy_from(&zy.column(0));
    let solved = linalg::solve_checked(&zz, &rhs, SINGULAR_CONDITION)
        .ok_or(EstimationError::SingularInstrumentBlock)?;
    let denominator = zx.column(0).dot(&solved.column(0));
    let numerator = zx.column(0).dot(&solved.column(1));
    // projected variance of x relative to its total variance
    let var_x = moments.var(x)?;
    if below(denominator.abs(), threshold * threshold * var_x) || denominator == 0.0 {
        return Err(EstimationError::WeakInstrument { denominator });
    }
    Ok(IVEstimate {
        gamma_hat: numerator / denominator,
        instruments: instruments.iter().map(|s| s.as_ref().to_string()).collect(),
        denominator,
    })
}
