//! Fit, load construction, inference and output rendering.

use std::fmt::Write as _;
use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::basis::{BasisSpec, TauGrid};
use crate::dataio::{build_design, Dataset, DesignMatrix};
use crate::functional::{build_load, LoadMatrix, LoadSpec};
use crate::inference::{infer, InferenceConfig, InferenceResult, Process};
use crate::qrfit::{fit_process, ProcessOptions, QrProcessFit};
use crate::rearrange::rearrange_result;

use super::config::RunConfig;
use super::CliError;

/// Everything computed before inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub dataset: Dataset,
    pub basis: BasisSpec,
    pub design: DesignMatrix,
    pub grid: TauGrid,
    pub fit: QrProcessFit,
    pub load: LoadMatrix,
}

impl Model {
    /// Treatment values labelling the result rows: the evaluation points
    /// of a pointwise load, or the distinct observed values otherwise.
    pub fn var_unique(&self) -> Vec<f64> {
        if self.load.averaged {
            self.dataset.unique_treatment()
        } else {
            self.load.eval_points.clone()
        }
    }
}

/// Builds the basis and design, fits the quantile process and forms the
/// load matrix.
pub fn prepare(cfg: &RunConfig, dataset: Dataset) -> Result<Model, CliError> {
    cfg.validate()?;
    let basis = cfg.basis.build(&dataset.treatment)?;
    let design = build_design(&dataset, &cfg.model, &basis)?;
    let grid = cfg.taus.grid()?;
    let fit = fit_process(design.values(), &dataset.outcome, grid.taus(), None, None, None, &ProcessOptions::default())?;
    let spec = LoadSpec {
        deriv: cfg.functional.nderivs,
        average: cfg.functional.average,
        eval_points: cfg.functional.eval_points.clone(),
        control_profile: None,
        measure: if cfg.functional.average {
            cfg.functional.measure.weights(&dataset)
        } else {
            None
        },
    };
    let load = build_load(&spec, &basis, &dataset, &design)?;
    Ok(Model {
        dataset,
        basis,
        design,
        grid,
        fit,
        load,
    })
}

/// Runs inference under `inf` and applies the configured rearrangement.
pub fn estimate(model: &Model, cfg: &RunConfig, inf: &InferenceConfig) -> Result<InferenceResult, CliError> {
    let mut result = infer(
        model.design.values(),
        &model.dataset.outcome,
        &model.fit,
        &model.load,
        model.var_unique(),
        inf,
    )?;
    rearrange_result(&mut result, &cfg.rearrange)?;
    Ok(result)
}

fn functional_name(cfg: &RunConfig) -> String {
    let what = match cfg.functional.nderivs {
        0 => "Conditional quantile",
        1 => "First derivative",
        _ => "Second derivative",
    };
    if cfg.functional.average {
        format!("Average {}", what.to_lowercase())
    } else {
        what.to_string()
    }
}

/// Fixed-width table at the printed quantile indices plus the three tests.
pub fn render_table(result: &InferenceResult, grid: &TauGrid, cfg: &RunConfig, averaged: bool) -> String {
    let inf = &cfg.inference;
    let mut out = String::new();
    let _ = writeln!(out, "{}", functional_name(cfg));
    if inf.process != Process::None {
        let band = if inf.uniform { "uniform" } else { "pointwise" };
        let _ = writeln!(
            out,
            "process: {}, B = {}, {} {}% bands, {} standard errors",
            inf.process.name(),
            inf.draws,
            band,
            100.0 * (1.0 - inf.alpha),
            match inf.se {
                crate::inference::SeMode::Conditional => "conditional",
                crate::inference::SeMode::Unconditional => "unconditional",
            }
        );
    }
    let _ = writeln!(
        out,
        "{:>12} {:>8} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "w", "tau", "point.est", "std.error", "ci.lower", "ci.upper", "lower.1s", "upper.1s"
    );
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:>12.6}")).unwrap_or_else(|| format!("{:>12}", "."));
    for j in 0..result.point_est.len() {
        let label = if averaged {
            "average".to_string()
        } else {
            format!("{:.6}", result.var_unique[j])
        };
        for &t in grid.print_indices() {
            let _ = writeln!(
                out,
                "{:>12} {:>8.4} {} {} {} {} {} {}",
                label,
                result.taus[t],
                fmt(Some(result.point_est[j][t])),
                fmt(result.std_error.as_ref().map(|s| s[j][t])),
                fmt(result.ci.as_ref().map(|c| c[j][t][0])),
                fmt(result.ci.as_ref().map(|c| c[j][t][1])),
                fmt(result.ci_one_sided.as_ref().map(|c| c[j][t][0])),
                fmt(result.ci_one_sided.as_ref().map(|c| c[j][t][1])),
            );
        }
    }
    if let Some(p) = result.pvalues {
        let _ = writeln!(out);
        let _ = writeln!(out, "Hypothesis tests (sup over all evaluation points and quantile indices):");
        let _ = writeln!(out, "  H0: functional <= 0 everywhere    p-value = {:.4}", p[0]);
        let _ = writeln!(out, "  H0: functional >= 0 everywhere    p-value = {:.4}", p[1]);
        let _ = writeln!(out, "  H0: functional  = 0 everywhere    p-value = {:.4}", p[2]);
    }
    out
}

/// Writes the estimate surface: a header of quantile indices and one row
/// per evaluation point.
pub fn write_surface<W: Write>(result: &InferenceResult, averaged: bool, out: W) -> Result<(), CliError> {
    if averaged {
        return Err(CliError::Config(
            "surface needs a pointwise functional; set functional.average = false".into(),
        ));
    }
    let p = result.point_est.len();
    if result.var_unique.len() != p {
        return Err(CliError::Config("surface rows do not match the evaluation points".into()));
    }
    let csv_err = |e: csv::Error| CliError::io("surface", std::io::Error::other(e));
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["w".to_string()];
    header.extend(result.taus.iter().map(|t| t.to_string()));
    wtr.write_record(&header).map_err(csv_err)?;
    for j in 0..p {
        let mut rec = vec![result.var_unique[j].to_string()];
        rec.extend(result.point_est[j].iter().map(|v| v.to_string()));
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| CliError::io("surface", e))?;
    Ok(())
}

/// Parses a surface written by [`write_surface`] into
/// `(eval points, taus, estimates)`.
pub fn read_surface<R: Read>(src: R) -> Result<(Vec<f64>, Vec<f64>, DMatrix<f64>), CliError> {
    let bad = |msg: String| CliError::Config(format!("surface: {msg}"));
    let mut rdr = csv::Reader::from_reader(src);
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("not a number: {s}")));
    let taus = header.iter().skip(1).map(parse).collect::<Result<Vec<_>, _>>()?;
    let mut points = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        points.push(parse(&rec[0])?);
        for v in rec.iter().skip(1) {
            values.push(parse(v)?);
        }
    }
    let est = DMatrix::from_row_slice(points.len(), taus.len(), &values);
    Ok((points, taus, est))
}
