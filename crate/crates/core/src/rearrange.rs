//! Monotone rearrangement of estimate surfaces. Rows are indexed by
//! ascending evaluation point and columns by ascending quantile index.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::InferenceResult;

#[derive(Debug, Error, PartialEq)]
pub enum RearrangeError {
    #[error("cannot rearrange non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
}

pub type Result<T> = std::result::Result<T, RearrangeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RearrangeDims {
    /// Sort along the quantile index (within rows).
    #[default]
    Quantile,
    /// Sort along the covariate (within columns).
    Var,
    Both,
}

impl std::str::FromStr for RearrangeDims {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "quantile" => Ok(RearrangeDims::Quantile),
            "var" => Ok(RearrangeDims::Var),
            "both" => Ok(RearrangeDims::Both),
            _ => Err(format!("unknown rearrangement '{s}'")),
        }
    }
}

/// Composition used for two-dimensional rearrangement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BothOrder {
    /// Mean of the two sequential compositions.
    #[default]
    Average,
    QuantileFirst,
    VarFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RearrangeSpec {
    pub enabled: bool,
    pub dims: RearrangeDims,
    #[serde(default)]
    pub order: BothOrder,
    /// Also rearrange the band surfaces.
    #[serde(default = "yes")]
    pub bands: bool,
}

fn yes() -> bool {
    true
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(RearrangeError::NonFinite { row: r, col: c });
            }
        }
    }
    Ok(())
}

fn sort_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for r in 0..out.nrows() {
        let mut row: Vec<f64> = out.row(r).iter().cloned().collect();
        row.sort_by(f64::total_cmp);
        for (c, v) in row.into_iter().enumerate() {
            out[(r, c)] = v;
        }
    }
    out
}

fn sort_cols(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        col.as_mut_slice().sort_by(f64::total_cmp);
    }
    out
}

/// Rearranges `est` along the requested dimensions.
pub fn rearrange(est: &DMatrix<f64>, dims: RearrangeDims, order: BothOrder) -> Result<DMatrix<f64>> {
    check_finite(est)?;
    Ok(match dims {
        RearrangeDims::Quantile => sort_rows(est),
        RearrangeDims::Var => sort_cols(est),
        RearrangeDims::Both => match order {
            BothOrder::QuantileFirst => sort_cols(&sort_rows(est)),
            BothOrder::VarFirst => sort_rows(&sort_cols(est)),
            BothOrder::Average => {
                let a = sort_cols(&sort_rows(est));
                let b = sort_rows(&sort_cols(est));
                (a + b) * 0.5
            }
        },
    })
}

/// Whether `m` is weakly increasing along the requested dimensions.
pub fn is_monotone(m: &DMatrix<f64>, dims: RearrangeDims) -> bool {
    let rows_ok = || (0..m.nrows()).all(|r| (1..m.ncols()).all(|c| m[(r, c - 1)] <= m[(r, c)]));
    let cols_ok = || (0..m.ncols()).all(|c| (1..m.nrows()).all(|r| m[(r - 1, c)] <= m[(r, c)]));
    match dims {
        RearrangeDims::Quantile => rows_ok(),
        RearrangeDims::Var => cols_ok(),
        RearrangeDims::Both => rows_ok() && cols_ok(),
    }
}

/// Applies the rearrangement to the point estimates and, when requested,
/// to each bound surface of the bands.
pub fn rearrange_result(result: &mut InferenceResult, spec: &RearrangeSpec) -> Result<()> {
    if !spec.enabled {
        return Ok(());
    }
    let p = result.point_est.len();
    let nt = result.taus.len();
    let apply = |get: &dyn Fn(usize, usize) -> f64| -> Result<DMatrix<f64>> {
        rearrange(&DMatrix::from_fn(p, nt, |j, t| get(j, t)), spec.dims, spec.order)
    };
    let est = apply(&|j, t| result.point_est[j][t])?;
    for j in 0..p {
        for t in 0..nt {
            result.point_est[j][t] = est[(j, t)];
        }
    }
    if !spec.bands {
        return Ok(());
    }
    for band in [&mut result.ci, &mut result.ci_one_sided].into_iter().flatten() {
        for side in 0..2 {
            let surf = apply(&|j, t| band[j][t][side])?;
            for j in 0..p {
                for t in 0..nt {
                    band[j][t][side] = surf[(j, t)];
                }
            }
        }
    }
    Ok(())
}
