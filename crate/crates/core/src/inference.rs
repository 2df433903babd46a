//! Simulation-based inference on linear functionals of the quantile process:
//! the pivotal and Gaussian couplings, the weighted and gradient
//! bootstraps, standard errors, pointwise and uniform bands, and sup-test
//! p-values.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::basis::empirical_quantile;
use crate::functional::{apply_load_to, per_obs_variance, LoadError, LoadMatrix};
use crate::linalg::{robust_cholesky, symmetrize, weighted_gram};
use crate::par::{self, Execution};
use crate::qrfit::{fit_process, ProcessOptions, QrError, QrProcessFit};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("jacobian at tau={tau} is not positive definite ({reason}); try a larger bandwidth")]
    Jacobian { tau: f64, reason: String },
    #[error("bootstrap draw {draw} failed: {source}")]
    Refit {
        draw: usize,
        #[source]
        source: QrError,
    },
    #[error("bridge covariance of the tau grid could not be factored; taus must be distinct")]
    Bridge,
    #[error("{draws} draws are too few for alpha={alpha}; need draws * alpha >= 1")]
    TooFewDraws { draws: usize, alpha: f64 },
    #[error("draws have zero variance at row {row}, tau={tau}")]
    ZeroVariance { row: usize, tau: f64 },
    #[error("bootstrap inference is always unconditional; se_mode=conditional is not available for {0}")]
    ConditionalBootstrap(&'static str),
    #[error("invalid inference configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("load: {0}")]
    Load(#[from] LoadError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Process {
    #[default]
    Pivotal,
    Gaussian,
    WBootstrap,
    GBootstrap,
    None,
}

impl Process {
    pub fn name(self) -> &'static str {
        match self {
            Process::Pivotal => "pivotal",
            Process::Gaussian => "gaussian",
            Process::WBootstrap => "wbootstrap",
            Process::GBootstrap => "gbootstrap",
            Process::None => "none",
        }
    }

    pub fn is_bootstrap(self) -> bool {
        matches!(self, Process::WBootstrap | Process::GBootstrap)
    }
}

impl std::str::FromStr for Process {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pivotal" => Ok(Process::Pivotal),
            "gaussian" => Ok(Process::Gaussian),
            "wbootstrap" => Ok(Process::WBootstrap),
            "gbootstrap" => Ok(Process::GBootstrap),
            "none" => Ok(Process::None),
            _ => Err(format!("unknown process '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeMode {
    Conditional,
    #[default]
    Unconditional,
}

impl std::str::FromStr for SeMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "conditional" => Ok(SeMode::Conditional),
            "unconditional" => Ok(SeMode::Unconditional),
            _ => Err(format!("unknown se mode '{s}'")),
        }
    }
}

/// Rate for the quantile-scale half-width used by the sparsity estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `n^{-1/3}` rate.
    #[default]
    HallSheather,
    /// `n^{-1/5}` rate.
    Bofinger,
}

/// Level used inside the Hall-Sheather constant.
const BANDWIDTH_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    pub process: Process,
    /// Number of simulated draws.
    pub draws: usize,
    pub alpha: f64,
    pub uniform: bool,
    pub se_mode: SeMode,
    pub seed: u64,
    pub bandwidth: BandwidthRule,
    /// Use the closed-form sandwich for the conditional scale of the
    /// analytic processes instead of the draw standard deviation.
    pub closed_form_se: bool,
    pub exec: Execution,
    /// Solver settings for bootstrap refits.
    pub refit: ProcessOptions,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            process: Process::Pivotal,
            draws: 500,
            alpha: 0.05,
            uniform: true,
            se_mode: SeMode::Unconditional,
            seed: 1,
            bandwidth: BandwidthRule::HallSheather,
            closed_form_se: false,
            exec: Execution::Parallel,
            refit: ProcessOptions {
                exec: Execution::Sequential,
                ..ProcessOptions::default()
            },
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(InferenceError::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.process != Process::None && self.draws < 2 {
            return Err(InferenceError::Config(format!("need at least 2 draws, got {}", self.draws)));
        }
        if self.process.is_bootstrap() && self.se_mode == SeMode::Conditional {
            return Err(InferenceError::ConditionalBootstrap(self.process.name()));
        }
        Ok(())
    }
}

/// Kernel estimates of `E[f(Q(tau|X)|X) Z Z']` over the tau grid.
#[derive(Debug, Clone)]
pub struct JacobianEstimate {
    pub taus: Vec<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
    pub inverses: Vec<DMatrix<f64>>,
    /// Residual-scale bandwidth used at each tau.
    pub bandwidths: Vec<f64>,
    /// `n^{-1} sum Z_i Z_i'`.
    pub gram: DMatrix<f64>,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Half-width on the probability scale, kept inside `(0, 1)` around `tau`.
pub fn tau_bandwidth(rule: BandwidthRule, n: usize, tau: f64) -> f64 {
    let nd = std_normal();
    let x = nd.inverse_cdf(tau);
    let f = nd.pdf(x);
    let nf = n as f64;
    let h = match rule {
        BandwidthRule::HallSheather => {
            let z = nd.inverse_cdf(1.0 - BANDWIDTH_LEVEL / 2.0);
            nf.powf(-1.0 / 3.0) * z.powf(2.0 / 3.0) * (1.5 * f * f / (2.0 * x * x + 1.0)).powf(1.0 / 3.0)
        }
        BandwidthRule::Bofinger => {
            nf.powf(-0.2) * (4.5 * f.powi(4) / (2.0 * x * x + 1.0).powi(2)).powf(0.2)
        }
    };
    h.min(0.5 * tau.min(1.0 - tau))
}

/// Residual-scale bandwidth: the quantile-scale width mapped through the
/// normal quantile function and a robust residual spread.
pub fn residual_bandwidth(rule: BandwidthRule, residuals: &[f64], tau: f64) -> f64 {
    let n = residuals.len();
    let ht = tau_bandwidth(rule, n, tau);
    let nd = std_normal();
    let mean = residuals.iter().sum::<f64>() / n as f64;
    let sd = (residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n as f64 - 1.0).max(1.0)).sqrt();
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = empirical_quantile(&sorted, 0.75) - empirical_quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    (nd.inverse_cdf(tau + ht) - nd.inverse_cdf(tau - ht)) * spread
}

/// Uniform-kernel estimate `(2 n h)^{-1} sum_{|r_i| <= h} Z_i Z_i'`.
pub fn kernel_jacobian(design: &DMatrix<f64>, residuals: &[f64], h: f64) -> DMatrix<f64> {
    let n = design.nrows();
    let d: Vec<f64> = residuals
        .iter()
        .map(|r| if r.abs() <= h { 1.0 / (2.0 * n as f64 * h) } else { 0.0 })
        .collect();
    weighted_gram(design, &d)
}

fn check_definite(j: &DMatrix<f64>, tau: f64) -> Result<()> {
    let eig = SymmetricEigen::new(j.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || !(min > 1e-12 * max) {
        return Err(InferenceError::Jacobian {
            tau,
            reason: format!("eigenvalues in [{min:.3e}, {max:.3e}]"),
        });
    }
    Ok(())
}

fn invert_spd(j: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let chol = j.clone().cholesky().ok_or_else(|| InferenceError::Jacobian {
        tau,
        reason: "cholesky failed".into(),
    })?;
    Ok(symmetrize(chol.inverse()))
}

pub fn estimate_jacobian(design: &DMatrix<f64>, fit: &QrProcessFit, rule: BandwidthRule) -> Result<JacobianEstimate> {
    let n = design.nrows();
    let mut jacobians = Vec::with_capacity(fit.taus.len());
    let mut inverses = Vec::with_capacity(fit.taus.len());
    let mut bandwidths = Vec::with_capacity(fit.taus.len());
    for (t, &tau) in fit.taus.iter().enumerate() {
        let r = &fit.solutions[t].residuals;
        if r.len() != n {
            return Err(InferenceError::Dimension(format!("{} residuals for {n} rows", r.len())));
        }
        let h = residual_bandwidth(rule, r, tau);
        let j = kernel_jacobian(design, r, h);
        check_definite(&j, tau)?;
        inverses.push(invert_spd(&j, tau)?);
        jacobians.push(j);
        bandwidths.push(h);
    }
    let gram = weighted_gram(design, &vec![1.0 / n as f64; n]);
    Ok(JacobianEstimate {
        taus: fit.taus.clone(),
        jacobians,
        inverses,
        bandwidths,
        gram,
    })
}

/// Simulated copies of `sqrt(n) (beta* - beta_hat)`, each `m x |taus|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    pub process: Process,
    pub draws: Vec<DMatrix<f64>>,
}

impl Draws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Generator for draw `b`: one ChaCha stream per draw index, so every draw
/// is reproducible on its own regardless of scheduling.
pub fn draw_rng(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    rng
}

fn uniforms(seed: u64, b: usize, n: usize) -> Vec<f64> {
    let mut rng = draw_rng(seed, b);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Unscaled score sums `sum_i Z_i (tau - 1{U_i <= tau})` for every tau,
/// as an `m x |taus|` matrix. Observations are bucketed by the first grid
/// point they fall under, then accumulated in grid order.
pub fn score_sums(design: &DMatrix<f64>, taus: &[f64], u: &[f64]) -> DMatrix<f64> {
    let (n, m) = design.shape();
    let nt = taus.len();
    let mut buckets = DMatrix::<f64>::zeros(m, nt + 1);
    let mut total = vec![0.0; m];
    for i in 0..n {
        let k = taus.partition_point(|&t| t < u[i]);
        for j in 0..m {
            let z = design[(i, j)];
            buckets[(j, k)] += z;
            total[j] += z;
        }
    }
    let mut out = DMatrix::zeros(m, nt);
    for j in 0..m {
        let mut below = 0.0;
        for (t, &tau) in taus.iter().enumerate() {
            below += buckets[(j, t)];
            out[(j, t)] = tau * total[j] - below;
        }
    }
    out
}

/// `s_b(tau) = n^{-1/2} sum_i Z_i (tau - 1{U_i <= tau})` for draw `b`.
pub fn pivotal_scores(design: &DMatrix<f64>, taus: &[f64], seed: u64, b: usize) -> DMatrix<f64> {
    let n = design.nrows();
    let u = uniforms(seed, b, n);
    score_sums(design, taus, &u) / (n as f64).sqrt()
}

fn map_through_inverse(jac: &JacobianEstimate, s: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, nt) = s.shape();
    let mut out = DMatrix::zeros(m, nt);
    for t in 0..nt {
        let inv = &jac.inverses[t];
        for i in 0..m {
            let mut acc = 0.0;
            for k in 0..m {
                acc += inv[(i, k)] * s[(k, t)];
            }
            out[(i, t)] = acc;
        }
    }
    out
}

fn check_jacobian(jac: &JacobianEstimate, design: &DMatrix<f64>, taus: &[f64]) -> Result<()> {
    if jac.taus.as_slice() != taus || jac.gram.nrows() != design.ncols() {
        return Err(InferenceError::Dimension("jacobian does not match design or tau grid".into()));
    }
    Ok(())
}

pub fn draw_pivotal(
    design: &DMatrix<f64>,
    jac: &JacobianEstimate,
    taus: &[f64],
    draws: usize,
    seed: u64,
    exec: Execution,
) -> Result<Draws> {
    check_jacobian(jac, design, taus)?;
    let out = par::map_range(exec, draws, |b| map_through_inverse(jac, &pivotal_scores(design, taus, seed, b)));
    Ok(Draws {
        process: Process::Pivotal,
        draws: out,
    })
}

/// Brownian-bridge covariance `min(tau, tau') - tau tau'` on the grid.
pub fn bridge_covariance(taus: &[f64]) -> DMatrix<f64> {
    let t = taus.len();
    DMatrix::from_fn(t, t, |i, j| taus[i].min(taus[j]) - taus[i] * taus[j])
}

/// Cholesky factors of the score covariance: `(L_Z, L_T)`.
pub fn gaussian_factors(gram: &DMatrix<f64>, taus: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let lz = robust_cholesky(gram)
        .ok_or_else(|| InferenceError::Config("gram matrix is not positive definite".into()))?
        .l();
    let lt = bridge_covariance(taus).cholesky().ok_or(InferenceError::Bridge)?.l();
    Ok((lz, lt))
}

/// `S = L_Z G L_T'` with `G` standard normal, drawn from stream `b`.
pub fn gaussian_scores(lz: &DMatrix<f64>, lt: &DMatrix<f64>, seed: u64, b: usize) -> DMatrix<f64> {
    let m = lz.nrows();
    let nt = lt.nrows();
    let mut rng = draw_rng(seed, b);
    let g = DMatrix::from_fn(m, nt, |_, _| rng.sample::<f64, _>(StandardNormal));
    lz * g * lt.transpose()
}

pub fn draw_gaussian(
    design: &DMatrix<f64>,
    jac: &JacobianEstimate,
    taus: &[f64],
    draws: usize,
    seed: u64,
    exec: Execution,
) -> Result<Draws> {
    check_jacobian(jac, design, taus)?;
    let (lz, lt) = gaussian_factors(&jac.gram, taus)?;
    let out = par::map_range(exec, draws, |b| map_through_inverse(jac, &gaussian_scores(&lz, &lt, seed, b)));
    Ok(Draws {
        process: Process::Gaussian,
        draws: out,
    })
}

fn bootstrap_draw(fit: &QrProcessFit, refit: &QrProcessFit) -> DMatrix<f64> {
    let n = fit.solutions[0].residuals.len() as f64;
    (&refit.betas - &fit.betas) * n.sqrt()
}

/// Weighted bootstrap with standard exponential weights.
pub fn draw_wbootstrap(
    design: &DMatrix<f64>,
    y: &[f64],
    fit: &QrProcessFit,
    draws: usize,
    seed: u64,
    opts: &ProcessOptions,
    exec: Execution,
) -> Result<Draws> {
    let n = design.nrows();
    draw_wbootstrap_with(design, y, fit, draws, opts, exec, |b| {
        let mut rng = draw_rng(seed, b);
        (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect()
    })
}

/// Weighted bootstrap with caller-supplied weights for draw `b`.
pub fn draw_wbootstrap_with<F>(
    design: &DMatrix<f64>,
    y: &[f64],
    fit: &QrProcessFit,
    draws: usize,
    opts: &ProcessOptions,
    exec: Execution,
    weights: F,
) -> Result<Draws>
where
    F: Fn(usize) -> Vec<f64> + Sync + Send,
{
    let out = par::try_map_range(exec, draws, |b| {
        let w = weights(b);
        fit_process(design, y, &fit.taus, Some(&w), None, None, opts)
            .map(|r| bootstrap_draw(fit, &r))
            .map_err(|source| InferenceError::Refit { draw: b, source })
    })?;
    Ok(Draws {
        process: Process::WBootstrap,
        draws: out,
    })
}

/// Gradient bootstrap: each draw re-solves the quantile problems with the
/// linear term `sqrt(n) s_b(tau)`, using the same uniforms as the pivotal
/// draw with the same seed and index. A refit that does not converge,
/// which happens when the perturbed optimum is an unbounded flat ray, is
/// repeated anchored at `beta_hat`.
pub fn draw_gbootstrap(
    design: &DMatrix<f64>,
    y: &[f64],
    fit: &QrProcessFit,
    draws: usize,
    seed: u64,
    opts: &ProcessOptions,
    exec: Execution,
) -> Result<Draws> {
    let n = design.nrows();
    draw_gbootstrap_with(design, y, fit, draws, opts, exec, |b| {
        let u = uniforms(seed, b, n);
        let s = score_sums(design, &fit.taus, &u);
        s.column_iter().map(|c| c.iter().cloned().collect()).collect()
    })
}

/// Gradient bootstrap with caller-supplied per-tau shifts for draw `b`
/// (unnormalized: `sqrt(n) s_b(tau)`).
pub fn draw_gbootstrap_with<F>(
    design: &DMatrix<f64>,
    y: &[f64],
    fit: &QrProcessFit,
    draws: usize,
    opts: &ProcessOptions,
    exec: Execution,
    shifts: F,
) -> Result<Draws>
where
    F: Fn(usize) -> Vec<Vec<f64>> + Sync + Send,
{
    let out = par::try_map_range(exec, draws, |b| {
        let s = shifts(b);
        fit_process(design, y, &fit.taus, None, Some(&s), None, opts)
            .or_else(|_| fit_process(design, y, &fit.taus, None, Some(&s), Some(&fit.betas), opts))
            .map(|r| bootstrap_draw(fit, &r))
            .map_err(|source| InferenceError::Refit { draw: b, source })
    })?;
    Ok(Draws {
        process: Process::GBootstrap,
        draws: out,
    })
}

/// Load projections `l_j' draw_b(tau)`: one `p x |taus|` matrix per draw.
pub fn project(load: &LoadMatrix, draws: &Draws, exec: Execution) -> Result<Vec<DMatrix<f64>>> {
    par::try_map_range(exec, draws.len(), |b| apply_load_to(&load.rows, &draws.draws[b]).map_err(Into::into))
}

/// Standard errors of the functional estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct StdErrors {
    /// Reported standard errors (with the averaging correction when
    /// unconditional).
    pub reported: DMatrix<f64>,
    /// Scale of the draws, used to studentize them.
    pub draw_scale: DMatrix<f64>,
}

/// Draw standard deviation of each projection, divided by `sqrt(n)`.
pub fn draw_std_errors(projections: &[DMatrix<f64>], n: usize, taus: &[f64]) -> Result<DMatrix<f64>> {
    let bcount = projections.len();
    if bcount < 2 {
        return Err(InferenceError::Config("need at least 2 draws".into()));
    }
    let (p, nt) = projections[0].shape();
    let mut out = DMatrix::zeros(p, nt);
    for j in 0..p {
        for t in 0..nt {
            let mean = projections.iter().map(|d| d[(j, t)]).sum::<f64>() / bcount as f64;
            let ss: f64 = projections.iter().map(|d| (d[(j, t)] - mean).powi(2)).sum();
            let se = (ss / (bcount as f64 - 1.0)).sqrt() / (n as f64).sqrt();
            if !(se > 0.0) || !se.is_finite() {
                return Err(InferenceError::ZeroVariance { row: j, tau: taus[t] });
            }
            out[(j, t)] = se;
        }
    }
    Ok(out)
}

/// Closed-form conditional sandwich
/// `sqrt(tau (1 - tau) l' J^{-1} G J^{-1} l / n)`.
pub fn sandwich_std_errors(load: &LoadMatrix, jac: &JacobianEstimate, n: usize) -> DMatrix<f64> {
    let p = load.nrows();
    let nt = jac.taus.len();
    let mut out = DMatrix::zeros(p, nt);
    for (t, &tau) in jac.taus.iter().enumerate() {
        let cov = &jac.inverses[t] * &jac.gram * &jac.inverses[t];
        for j in 0..p {
            let l: DVector<f64> = load.rows.row(j).transpose();
            let v = (l.transpose() * &cov * &l)[(0, 0)];
            out[(j, t)] = (tau * (1.0 - tau) * v.max(0.0) / n as f64).sqrt();
        }
    }
    out
}

/// Adds `n^{-1} var_i(l_i' beta_hat(tau))` to the squared conditional
/// standard errors of an averaged load; other loads are returned unchanged.
pub fn unconditional_std_errors(conditional: &DMatrix<f64>, load: &LoadMatrix, betas: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut out = conditional.clone();
    if !load.averaged {
        return out;
    }
    for t in 0..betas.ncols() {
        let beta: Vec<f64> = betas.column(t).iter().cloned().collect();
        if let Some(v) = per_obs_variance(load, &beta) {
            for j in 0..out.nrows() {
                out[(j, t)] = (conditional[(j, t)].powi(2) + v / n as f64).sqrt();
            }
        }
    }
    out
}

/// Critical values, bands and p-values.
#[derive(Debug, Clone, PartialEq)]
pub struct Bands {
    /// `p x |taus|` two-sided critical values (constant when uniform).
    pub critical: DMatrix<f64>,
    /// Critical values for the one-sided lower and upper bounds.
    pub critical_lower: DMatrix<f64>,
    pub critical_upper: DMatrix<f64>,
    /// `[lower, upper]` per cell.
    pub ci: Vec<Vec<[f64; 2]>>,
    pub ci_one_sided: Vec<Vec<[f64; 2]>>,
    /// p-values for the nulls `<= 0`, `>= 0` and `= 0` everywhere.
    pub pvalues: [f64; 3],
}

/// Order statistic `ceil(q B)` (1-based) of an ascending sample.
pub fn order_quantile(sorted: &[f64], q: f64) -> f64 {
    let b = sorted.len();
    let k = ((q * b as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[k.min(b) - 1]
}

pub fn bands_and_pvalues(
    point_est: &DMatrix<f64>,
    se: &StdErrors,
    projections: &[DMatrix<f64>],
    n: usize,
    alpha: f64,
    uniform: bool,
) -> Result<Bands> {
    let bcount = projections.len();
    if (bcount as f64) * alpha < 1.0 - 1e-9 {
        return Err(InferenceError::TooFewDraws { draws: bcount, alpha });
    }
    let (p, nt) = point_est.shape();
    if se.reported.shape() != (p, nt) || projections.iter().any(|d| d.shape() != (p, nt)) {
        return Err(InferenceError::Dimension("estimates, standard errors and draws disagree".into()));
    }
    let sqrt_n = (n as f64).sqrt();
    let tstat = |b: usize, j: usize, t: usize| projections[b][(j, t)] / (sqrt_n * se.draw_scale[(j, t)]);

    let mut sup = Vec::with_capacity(bcount);
    let mut inf = Vec::with_capacity(bcount);
    let mut sup_abs = Vec::with_capacity(bcount);
    for b in 0..bcount {
        let (mut hi, mut lo, mut ab) = (f64::NEG_INFINITY, f64::INFINITY, 0.0f64);
        for t in 0..nt {
            for j in 0..p {
                let v = tstat(b, j, t);
                hi = hi.max(v);
                lo = lo.min(v);
                ab = ab.max(v.abs());
            }
        }
        sup.push(hi);
        inf.push(lo);
        sup_abs.push(ab);
    }

    let (mut obs_hi, mut obs_lo, mut obs_abs) = (f64::NEG_INFINITY, f64::INFINITY, 0.0f64);
    for t in 0..nt {
        for j in 0..p {
            let v = point_est[(j, t)] / se.reported[(j, t)];
            obs_hi = obs_hi.max(v);
            obs_lo = obs_lo.min(v);
            obs_abs = obs_abs.max(v.abs());
        }
    }
    let pv = |count: usize| (count as f64 + 1.0) / (bcount as f64 + 1.0);
    let pvalues = [
        pv(sup.iter().filter(|&&v| v >= obs_hi).count()),
        pv(inf.iter().filter(|&&v| v <= obs_lo).count()),
        pv(sup_abs.iter().filter(|&&v| v >= obs_abs).count()),
    ];

    let (critical, critical_lower, critical_upper) = if uniform {
        let sorted = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v
        };
        let k2 = order_quantile(&sorted(sup_abs), 1.0 - alpha);
        let kl = order_quantile(&sorted(sup), 1.0 - alpha).max(0.0);
        let ku = (-order_quantile(&sorted(inf), alpha)).max(0.0);
        (
            DMatrix::from_element(p, nt, k2),
            DMatrix::from_element(p, nt, kl),
            DMatrix::from_element(p, nt, ku),
        )
    } else {
        let mut k2 = DMatrix::zeros(p, nt);
        let mut kl = DMatrix::zeros(p, nt);
        let mut ku = DMatrix::zeros(p, nt);
        let mut buf = vec![0.0; bcount];
        for t in 0..nt {
            for j in 0..p {
                for (b, slot) in buf.iter_mut().enumerate() {
                    *slot = tstat(b, j, t);
                }
                buf.sort_by(f64::total_cmp);
                kl[(j, t)] = order_quantile(&buf, 1.0 - alpha).max(0.0);
                ku[(j, t)] = (-order_quantile(&buf, alpha)).max(0.0);
                for v in buf.iter_mut() {
                    *v = v.abs();
                }
                buf.sort_by(f64::total_cmp);
                k2[(j, t)] = order_quantile(&buf, 1.0 - alpha);
            }
        }
        (k2, kl, ku)
    };

    let ci = (0..p)
        .map(|j| {
            (0..nt)
                .map(|t| {
                    let e = point_est[(j, t)];
                    let w = critical[(j, t)] * se.reported[(j, t)];
                    [e - w, e + w]
                })
                .collect()
        })
        .collect();
    let ci_one_sided = (0..p)
        .map(|j| {
            (0..nt)
                .map(|t| {
                    let e = point_est[(j, t)];
                    let s = se.reported[(j, t)];
                    [e - critical_lower[(j, t)] * s, e + critical_upper[(j, t)] * s]
                })
                .collect()
        })
        .collect();
    Ok(Bands {
        critical,
        critical_lower,
        critical_upper,
        ci,
        ci_one_sided,
        pvalues,
    })
}

/// Extra quantities kept alongside a result but not serialized.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub conditional_se: Vec<Vec<f64>>,
    pub critical: Vec<Vec<f64>>,
    pub bandwidths: Vec<f64>,
}

/// Output of an inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub point_est: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_error: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_one_sided: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pvalues: Option<[f64; 3]>,
    pub taus: Vec<f64>,
    pub var_unique: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
    pub load: Vec<Vec<f64>>,
    #[serde(skip)]
    pub diagnostics: Diagnostics,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|j| m.row(j).iter().cloned().collect()).collect()
}

impl InferenceResult {
    pub fn point_matrix(&self) -> DMatrix<f64> {
        let p = self.point_est.len();
        let nt = self.taus.len();
        DMatrix::from_fn(p, nt, |j, t| self.point_est[j][t])
    }
}

/// Simulates the configured process.
pub fn simulate_draws(
    design: &DMatrix<f64>,
    y: &[f64],
    fit: &QrProcessFit,
    jac: Option<&JacobianEstimate>,
    config: &InferenceConfig,
) -> Result<Draws> {
    let need = || jac.ok_or_else(|| InferenceError::Config("analytic process needs a jacobian".into()));
    match config.process {
        Process::Pivotal => draw_pivotal(design, need()?, &fit.taus, config.draws, config.seed, config.exec),
        Process::Gaussian => draw_gaussian(design, need()?, &fit.taus, config.draws, config.seed, config.exec),
        Process::WBootstrap => draw_wbootstrap(design, y, fit, config.draws, config.seed, &config.refit, config.exec),
        Process::GBootstrap => draw_gbootstrap(design, y, fit, config.draws, config.seed, &config.refit, config.exec),
        Process::None => Err(InferenceError::Config("process none draws nothing".into())),
    }
}

/// Point estimates with their draw projections and standard errors: the
/// inputs to [`bands_and_pvalues`].
#[derive(Debug, Clone)]
pub struct Simulated {
    pub point: DMatrix<f64>,
    pub se: StdErrors,
    pub projections: Vec<DMatrix<f64>>,
    pub bandwidths: Vec<f64>,
}

/// Simulates the configured process and computes standard errors.
pub fn simulate_functional(
    design: &DMatrix<f64>,
    y: &[f64],
    fit: &QrProcessFit,
    load: &LoadMatrix,
    config: &InferenceConfig,
) -> Result<Simulated> {
    config.validate()?;
    if config.process == Process::None {
        return Err(InferenceError::Config("process none draws nothing".into()));
    }
    if (config.draws as f64) * config.alpha < 1.0 - 1e-9 {
        return Err(InferenceError::TooFewDraws {
            draws: config.draws,
            alpha: config.alpha,
        });
    }
    let n = design.nrows();
    let point = apply_load_to(&load.rows, &fit.betas)?;
    let jac = if config.process.is_bootstrap() {
        None
    } else {
        Some(estimate_jacobian(design, fit, config.bandwidth)?)
    };
    let draws = simulate_draws(design, y, fit, jac.as_ref(), config)?;
    let projections = project(load, &draws, config.exec)?;
    let draw_scale = match (&jac, config.closed_form_se) {
        (Some(j), true) => sandwich_std_errors(load, j, n),
        _ => draw_std_errors(&projections, n, &fit.taus)?,
    };
    let reported = match config.se_mode {
        SeMode::Conditional => draw_scale.clone(),
        SeMode::Unconditional => unconditional_std_errors(&draw_scale, load, &fit.betas, n),
    };
    Ok(Simulated {
        point,
        se: StdErrors { reported, draw_scale },
        projections,
        bandwidths: jac.map(|j| j.bandwidths).unwrap_or_default(),
    })
}

/// Point estimates, standard errors, bands and p-values for `load`.
pub fn infer(
    design: &DMatrix<f64>,
    y: &[f64],
    fit: &QrProcessFit,
    load: &LoadMatrix,
    var_unique: Vec<f64>,
    config: &InferenceConfig,
) -> Result<InferenceResult> {
    config.validate()?;
    let point = apply_load_to(&load.rows, &fit.betas)?;
    let mut result = InferenceResult {
        point_est: to_rows(&point),
        std_error: None,
        ci: None,
        ci_one_sided: None,
        pvalues: None,
        taus: fit.taus.clone(),
        var_unique,
        coefficients: to_rows(&fit.betas),
        load: load.to_rows(),
        diagnostics: Diagnostics::default(),
    };
    if config.process == Process::None {
        return Ok(result);
    }
    let sim = simulate_functional(design, y, fit, load, config)?;
    let n = design.nrows();
    let bands = bands_and_pvalues(&sim.point, &sim.se, &sim.projections, n, config.alpha, config.uniform)?;
    result.std_error = Some(to_rows(&sim.se.reported));
    result.ci = Some(bands.ci);
    result.ci_one_sided = Some(bands.ci_one_sided);
    result.pvalues = Some(bands.pvalues);
    result.diagnostics = Diagnostics {
        conditional_se: to_rows(&sim.se.draw_scale),
        critical: to_rows(&bands.critical),
        bandwidths: sim.bandwidths,
    };
    Ok(result)
}
