//! Monte-Carlo coverage harness on synthetic designs with known quantiles.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::dataio::ControlData;
use crate::inference::{bands_and_pvalues, draw_rng, simulate_functional, Process};
use crate::synth::Dgp;

use super::config::RunConfig;
use super::run::{prepare, Model};
use super::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub process: Process,
    /// Share of replications whose uniform band covers the truth at every
    /// evaluation point and quantile index.
    pub coverage_uniform: f64,
    /// Share of (replication, cell) pairs covered by the pointwise band.
    pub coverage_pointwise: f64,
    pub mean_uniform_width: f64,
    /// Mean two-sided sup-test p-value.
    pub mean_pvalue: f64,
    /// Wall-clock seconds spent on inference, summed over replications.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvalueDelta {
    pub first: Process,
    pub second: Process,
    pub mean_abs: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub dgp: Dgp,
    pub n: usize,
    pub replications: usize,
    pub draws: usize,
    pub alpha: f64,
    pub nderivs: usize,
    pub average: bool,
    pub taus: Vec<f64>,
    pub methods: Vec<MethodSummary>,
    pub pvalue_deltas: Vec<PvalueDelta>,
}

/// Seeds for replication `r`: (data, inference).
pub fn replication_seeds(seed: u64, r: usize) -> (u64, u64) {
    let mut rng = draw_rng(seed, r);
    (rng.next_u64(), rng.next_u64())
}

fn control_mean(model: &Model) -> f64 {
    model
        .dataset
        .controls
        .iter()
        .find_map(|c| match &c.data {
            ControlData::Numeric(v) => Some(v.iter().sum::<f64>() / v.len() as f64),
            _ => None,
        })
        .unwrap_or(0.0)
}

/// True functional on the result grid for the synthetic design.
pub fn truth(dgp: Dgp, model: &Model, cfg: &RunConfig) -> DMatrix<f64> {
    let deriv = cfg.functional.nderivs;
    let x = control_mean(model);
    let taus = model.grid.taus();
    if model.load.averaged {
        DMatrix::from_fn(1, taus.len(), |_, t| dgp.average_functional(deriv, taus[t], x))
    } else {
        let pts = &model.load.eval_points;
        DMatrix::from_fn(pts.len(), taus.len(), |j, t| dgp.functional(deriv, taus[t], pts[j], x))
    }
}

/// Runs the replications declared in `cfg.simulate`.
pub fn simulate(cfg: &RunConfig) -> Result<CoverageReport, CliError> {
    cfg.validate()?;
    let sim = cfg
        .simulate
        .clone()
        .ok_or_else(|| CliError::Config("simulate needs a [simulate] section".into()))?;
    let reps = sim.replications;
    let k = sim.methods.len();
    let mut covered_u = vec![0usize; k];
    let mut covered_p = vec![0.0f64; k];
    let mut width = vec![0.0f64; k];
    let mut seconds = vec![0.0f64; k];
    let mut pvals = vec![Vec::with_capacity(reps); k];
    let base = cfg.inference.to_config();
    let mut taus = Vec::new();
    for r in 0..reps {
        let (data_seed, inf_seed) = replication_seeds(sim.seed, r);
        let model = prepare(cfg, sim.dgp.generate(sim.n, data_seed))?;
        taus = model.grid.taus().to_vec();
        let target = truth(sim.dgp, &model, cfg);
        let n = model.design.nrows();
        for (mi, &process) in sim.methods.iter().enumerate() {
            let inf = crate::inference::InferenceConfig {
                process,
                seed: inf_seed,
                ..base.clone()
            };
            let start = Instant::now();
            let s = simulate_functional(model.design.values(), &model.dataset.outcome, &model.fit, &model.load, &inf)?;
            let uni = bands_and_pvalues(&s.point, &s.se, &s.projections, n, inf.alpha, true)?;
            seconds[mi] += start.elapsed().as_secs_f64();
            let pw = bands_and_pvalues(&s.point, &s.se, &s.projections, n, inf.alpha, false)?;
            let (p, nt) = target.shape();
            let mut all = true;
            let mut cells = 0usize;
            for j in 0..p {
                for t in 0..nt {
                    let v = target[(j, t)];
                    let [lo, hi] = uni.ci[j][t];
                    all &= lo <= v && v <= hi;
                    let [lo, hi] = pw.ci[j][t];
                    cells += usize::from(lo <= v && v <= hi);
                    width[mi] += (uni.ci[j][t][1] - uni.ci[j][t][0]) / (p * nt) as f64;
                }
            }
            covered_u[mi] += usize::from(all);
            covered_p[mi] += cells as f64 / (p * nt) as f64;
            pvals[mi].push(uni.pvalues[2]);
        }
        log::info!("replication {}/{} done", r + 1, reps);
    }
    let methods = (0..k)
        .map(|mi| MethodSummary {
            process: sim.methods[mi],
            coverage_uniform: covered_u[mi] as f64 / reps as f64,
            coverage_pointwise: covered_p[mi] / reps as f64,
            mean_uniform_width: width[mi] / reps as f64,
            mean_pvalue: pvals[mi].iter().sum::<f64>() / reps as f64,
            seconds: seconds[mi],
        })
        .collect();
    let mut pvalue_deltas = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let d: Vec<f64> = pvals[a].iter().zip(&pvals[b]).map(|(x, y)| (x - y).abs()).collect();
            pvalue_deltas.push(PvalueDelta {
                first: sim.methods[a],
                second: sim.methods[b],
                mean_abs: d.iter().sum::<f64>() / reps as f64,
                max_abs: d.iter().cloned().fold(0.0, f64::max),
            });
        }
    }
    Ok(CoverageReport {
        dgp: sim.dgp,
        n: sim.n,
        replications: reps,
        draws: base.draws,
        alpha: base.alpha,
        nderivs: cfg.functional.nderivs,
        average: cfg.functional.average,
        taus,
        methods,
        pvalue_deltas,
    })
}
