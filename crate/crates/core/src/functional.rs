//! Load vectors mapping coefficient vectors to linear functionals of the
//! conditional quantile function: values, partial derivatives in the
//! treatment, and their averages over a measure for the treatment.

use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::basis::{BasisError, BasisSpec};
use crate::dataio::{Dataset, DesignMatrix};
use crate::qrfit::QrProcessFit;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("basis: {0}")]
    Basis(#[from] BasisError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid measure: {0}")]
    Measure(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LoadError>;

/// Which functional to estimate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadSpec {
    /// Derivative order in the treatment, 0..=2.
    pub deriv: usize,
    /// Collapse to a single row averaged over `measure`.
    pub average: bool,
    /// Evaluation points for pointwise loads; sorted distinct observed
    /// treatment values when `None`.
    pub eval_points: Option<Vec<f64>>,
    /// Linear-block values for `deriv = 0`; the design's profile (intercept,
    /// control means, modal factor levels) when `None`.
    pub control_profile: Option<Vec<f64>>,
    /// Observation weights defining the averaging measure (nonnegative,
    /// summing to one); the empirical distribution of all observations when
    /// `None`.
    pub measure: Option<Vec<f64>>,
}

impl LoadSpec {
    pub fn new(deriv: usize, average: bool) -> Self {
        LoadSpec {
            deriv,
            average,
            ..Default::default()
        }
    }
}

/// `p x m` matrix of load rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadMatrix {
    pub rows: DMatrix<f64>,
    pub labels: Vec<String>,
    /// Evaluation points of the rows (empty when averaged).
    pub eval_points: Vec<f64>,
    pub deriv: usize,
    pub averaged: bool,
    /// Per-observation rows `l_i` (`n x m`) behind an averaged load.
    pub per_obs: Option<DMatrix<f64>>,
    /// Averaging weights over observations (set when averaged).
    pub measure: Option<Vec<f64>>,
}

impl LoadMatrix {
    pub fn nrows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.rows.ncols()
    }

    /// Rows as nested vectors.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.nrows()).map(|j| self.rows.row(j).iter().cloned().collect()).collect()
    }

    /// CSV with a label column followed by the `m` load entries.
    pub fn write_csv<W: Write>(&self, column_names: &[String], out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["label".to_string()];
        header.extend(column_names.iter().cloned());
        wtr.write_record(&header).map_err(std::io::Error::from)?;
        for j in 0..self.nrows() {
            let mut rec = vec![self.labels[j].clone()];
            rec.extend(self.rows.row(j).iter().map(|v| v.to_string()));
            wtr.write_record(&rec).map_err(std::io::Error::from)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Builds the load rows: `(d^k Z(w)', 0')` for `k >= 1` and `(Z(w)', v')`
/// for `k = 0`; an averaged load is the measure-weighted mean of the rows
/// evaluated at each observed treatment value.
pub fn build_load(spec: &LoadSpec, basis: &BasisSpec, dataset: &Dataset, design: &DesignMatrix) -> Result<LoadMatrix> {
    let mw = basis.dim();
    let m = design.ncols();
    if design.split() != mw {
        return Err(LoadError::Dimension(format!(
            "basis has {mw} columns, design nonparametric block has {}",
            design.split()
        )));
    }
    if spec.deriv > crate::basis::MAX_DERIV {
        return Err(BasisError::DerivOrder(spec.deriv).into());
    }
    if spec.deriv > 0 && !basis.supports_derivatives() {
        return Err(BasisError::IndicatorDerivative.into());
    }
    let linear: Vec<f64> = if spec.deriv == 0 {
        let p = spec.control_profile.clone().unwrap_or_else(|| design.linear_profile());
        if p.len() != m - mw {
            return Err(LoadError::Dimension(format!(
                "control profile has {} entries, linear block has {}",
                p.len(),
                m - mw
            )));
        }
        p
    } else {
        vec![0.0; m - mw]
    };
    let row_at = |w: f64, out: &mut [f64]| -> Result<()> {
        basis.eval_into(w, spec.deriv, &mut out[..mw])?;
        out[mw..].copy_from_slice(&linear);
        Ok(())
    };

    if spec.average {
        let n = dataset.n();
        let measure = match &spec.measure {
            Some(mu) => {
                validate_measure(mu, n)?;
                mu.clone()
            }
            None => vec![1.0 / n as f64; n],
        };
        let mut per_obs = DMatrix::zeros(n, m);
        let mut buf = vec![0.0; m];
        for (i, &w) in dataset.treatment.iter().enumerate() {
            row_at(w, &mut buf)?;
            for (k, v) in buf.iter().enumerate() {
                per_obs[(i, k)] = *v;
            }
        }
        let mut row = DMatrix::zeros(1, m);
        for k in 0..m {
            let mut acc = 0.0;
            for i in 0..n {
                acc += measure[i] * per_obs[(i, k)];
            }
            row[(0, k)] = acc;
        }
        Ok(LoadMatrix {
            rows: row,
            labels: vec!["average".into()],
            eval_points: Vec::new(),
            deriv: spec.deriv,
            averaged: true,
            per_obs: Some(per_obs),
            measure: Some(measure),
        })
    } else {
        let points = spec.eval_points.clone().unwrap_or_else(|| dataset.unique_treatment());
        let mut rows = DMatrix::zeros(points.len(), m);
        let mut buf = vec![0.0; m];
        for (j, &w) in points.iter().enumerate() {
            row_at(w, &mut buf)?;
            for (k, v) in buf.iter().enumerate() {
                rows[(j, k)] = *v;
            }
        }
        Ok(LoadMatrix {
            rows,
            labels: points.iter().map(|w| w.to_string()).collect(),
            eval_points: points,
            deriv: spec.deriv,
            averaged: false,
            per_obs: None,
            measure: None,
        })
    }
}

fn validate_measure(mu: &[f64], n: usize) -> Result<()> {
    if mu.len() != n {
        return Err(LoadError::Measure(format!("{} weights for {n} observations", mu.len())));
    }
    if mu.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(LoadError::Measure("weights must be nonnegative".into()));
    }
    let total: f64 = mu.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(LoadError::Measure(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// `L B`: entry `(j, t)` is `l_j' beta_hat(tau_t)`, summed in coefficient
/// order.
pub fn apply_load_to(rows: &DMatrix<f64>, betas: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if rows.ncols() != betas.nrows() {
        return Err(LoadError::Dimension(format!(
            "load has {} columns, coefficients have {} rows",
            rows.ncols(),
            betas.nrows()
        )));
    }
    let (p, m) = rows.shape();
    let t = betas.ncols();
    let mut out = DMatrix::zeros(p, t);
    for j in 0..p {
        for c in 0..t {
            let mut acc = 0.0;
            for k in 0..m {
                acc += rows[(j, k)] * betas[(k, c)];
            }
            out[(j, c)] = acc;
        }
    }
    Ok(out)
}

/// Point estimates `p x |taus|` of the functional.
pub fn apply_load(load: &LoadMatrix, fit: &QrProcessFit) -> Result<DMatrix<f64>> {
    apply_load_to(&load.rows, &fit.betas)
}

/// Weighted variance over observations of `l_i' beta`, with the
/// small-sample factor `1 / (1 - sum mu_i^2)` (the usual `n - 1`
/// denominator for uniform weights).
pub fn per_obs_variance(load: &LoadMatrix, beta: &[f64]) -> Option<f64> {
    let per_obs = load.per_obs.as_ref()?;
    let mu = load.measure.as_ref()?;
    let n = per_obs.nrows();
    let vals: Vec<f64> = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, b) in beta.iter().enumerate() {
                acc += per_obs[(i, k)] * b;
            }
            acc
        })
        .collect();
    let mean: f64 = vals.iter().zip(mu).map(|(v, w)| v * w).sum();
    let ss: f64 = vals.iter().zip(mu).map(|(v, w)| w * (v - mean) * (v - mean)).sum();
    let denom = 1.0 - mu.iter().map(|w| w * w).sum::<f64>();
    Some(if denom > 0.0 { ss / denom } else { 0.0 })
}
