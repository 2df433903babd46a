//! Weighted quantile regression by a primal-dual interior-point method.
//!
//! For one quantile index `tau` the estimator solves
//!
//! ```text
//! min_beta  sum_i w_i rho_tau(y_i - z_i' beta) + shift' beta
//! ```
//!
//! with `rho_tau(u) = (tau - 1{u < 0}) u`. The solver works on the bounded
//! linear program dual to this problem,
//!
//! ```text
//! max_a  y'a   s.t.  Z'a = (1 - tau) Z'w + shift,   0 <= a <= w,
//! ```
//!
//! with a Mehrotra predictor-corrector iteration (Frisch–Newton family).
//! The coefficient vector is recovered from the equality multipliers.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::robust_cholesky;
use crate::par::{self, Execution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QrError {
    #[error("interior point did not converge after {iterations} iterations (duality gap {gap:e}, relative infeasibility {infeasibility:e})")]
    NotConverged {
        iterations: usize,
        gap: f64,
        infeasibility: f64,
    },
    #[error("design is rank deficient")]
    RankDeficient,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("tau = {0} is not in (0, 1)")]
    InvalidTau(f64),
    #[error("weights must be positive and finite")]
    InvalidWeights,
    #[error("non-finite input")]
    NonFinite,
    #[error("brute-force oracle limited to n <= 30 and m <= 4 (got n = {n}, m = {m})")]
    OracleTooLarge { n: usize, m: usize },
    #[error("every size-m subset of rows is singular")]
    AllSingular,
    #[error("fit failed at tau = {tau}: {source}")]
    AtTau {
        tau: f64,
        #[source]
        source: Box<QrError>,
    },
}

pub type Result<T> = std::result::Result<T, QrError>;

/// Interior-point controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop once `gap <= gap_tol * (1 + |objective|)`.
    pub gap_tol: f64,
    /// Relative tolerance on primal and dual equality residuals.
    pub feas_tol: f64,
    /// Fraction of the distance to the boundary taken per step.
    pub step_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 200,
            gap_tol: 1e-11,
            feas_tol: 1e-10,
            step_fraction: 0.9995,
        }
    }
}

/// One weighted quantile regression problem.
#[derive(Debug, Clone, Copy)]
pub struct QrProblem<'a> {
    pub design: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub tau: f64,
    /// Observation weights, all ones when `None`.
    pub weights: Option<&'a [f64]>,
    /// Linear term: the objective gains `shift' beta`, so optimality
    /// requires `sum_i w_i z_i psi_i = shift`.
    pub shift: Option<&'a [f64]>,
    /// Reference coefficients. When set, the objective gains the small
    /// proximal term `eps * sum_k rho_tau(anchor_k - beta_k)` with
    /// `eps = ANCHOR_REL * sum(w) * max|z|`, which selects the optimal
    /// solution nearest the anchor when the optimum is not unique or not
    /// bounded (as happens for some shifted problems).
    pub anchor: Option<&'a [f64]>,
}

/// Relative weight of the anchor term, an order of magnitude below the
/// subgradient tolerance.
pub const ANCHOR_REL: f64 = 1e-7;

impl<'a> QrProblem<'a> {
    pub fn new(design: &'a DMatrix<f64>, y: &'a [f64], tau: f64) -> Self {
        QrProblem {
            design,
            y,
            tau,
            weights: None,
            shift: None,
            anchor: None,
        }
    }

    pub fn with_weights(mut self, w: &'a [f64]) -> Self {
        self.weights = Some(w);
        self
    }

    pub fn with_shift(mut self, s: &'a [f64]) -> Self {
        self.shift = Some(s);
        self
    }

    pub fn with_anchor(mut self, a: &'a [f64]) -> Self {
        self.anchor = Some(a);
        self
    }

    /// Weight of each anchor pseudo-observation.
    pub fn anchor_weight(&self) -> f64 {
        let wsum: f64 = (0..self.y.len()).map(|i| self.weight(i)).sum();
        ANCHOR_REL * wsum * self.design.amax().max(f64::MIN_POSITIVE)
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = self.design.shape();
        if self.y.len() != n {
            return Err(QrError::Dimension(format!("y has {} entries, design has {n} rows", self.y.len())));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(QrError::InvalidTau(self.tau));
        }
        if let Some(w) = self.weights {
            if w.len() != n {
                return Err(QrError::Dimension(format!("{} weights for {n} rows", w.len())));
            }
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(QrError::InvalidWeights);
            }
        }
        if let Some(s) = self.shift {
            if s.len() != m {
                return Err(QrError::Dimension(format!("shift has {} entries, design has {m} columns", s.len())));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(QrError::NonFinite);
            }
        }
        if let Some(a) = self.anchor {
            if a.len() != m {
                return Err(QrError::Dimension(format!("anchor has {} entries, design has {m} columns", a.len())));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(QrError::NonFinite);
            }
        }
        if self.y.iter().any(|v| !v.is_finite()) || self.design.iter().any(|v| !v.is_finite()) {
            return Err(QrError::NonFinite);
        }
        Ok(())
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }

    /// Objective value at `beta`.
    pub fn objective(&self, beta: &[f64]) -> f64 {
        let b = DVector::from_column_slice(beta);
        let fitted = self.design * &b;
        let mut f = 0.0;
        for i in 0..self.y.len() {
            f += self.weight(i) * check_loss(self.tau, self.y[i] - fitted[i]);
        }
        if let Some(s) = self.shift {
            f += s.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
        }
        if let Some(a) = self.anchor {
            let eps = self.anchor_weight();
            f += eps * a.iter().zip(beta).map(|(a, b)| check_loss(self.tau, a - b)).sum::<f64>();
        }
        f
    }
}

/// `rho_tau(u) = (tau - 1{u < 0}) u`.
pub fn check_loss(tau: f64, u: f64) -> f64 {
    if u < 0.0 {
        (tau - 1.0) * u
    } else {
        tau * u
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QrSolution {
    pub beta: Vec<f64>,
    pub residuals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub duality_gap: f64,
}

/// Solves one problem, starting the multipliers at `warm_start` (a previous
/// coefficient vector) or at the least-squares fit.
pub fn fit_qr_with(problem: &QrProblem<'_>, opts: &SolverOptions, warm_start: Option<&[f64]>) -> Result<QrSolution> {
    problem.validate()?;
    let Some(anchor) = problem.anchor else {
        return solve_ipm(problem, opts, warm_start);
    };
    // Anchor rows: y = anchor_k, z = e_k, weight eps.
    let (n, m) = problem.design.shape();
    let eps = problem.anchor_weight();
    let mut z = DMatrix::zeros(n + m, m);
    z.view_mut((0, 0), (n, m)).copy_from(problem.design);
    for k in 0..m {
        z[(n + k, k)] = 1.0;
    }
    let mut y = problem.y.to_vec();
    y.extend_from_slice(anchor);
    let mut w: Vec<f64> = (0..n).map(|i| problem.weight(i)).collect();
    w.extend(std::iter::repeat_n(eps, m));
    let augmented = QrProblem {
        design: &z,
        y: &y,
        tau: problem.tau,
        weights: Some(&w),
        shift: problem.shift,
        anchor: None,
    };
    let mut sol = solve_ipm(&augmented, opts, warm_start)?;
    sol.residuals.truncate(n);
    sol.objective = problem.objective(&sol.beta);
    Ok(sol)
}

fn solve_ipm(problem: &QrProblem<'_>, opts: &SolverOptions, warm_start: Option<&[f64]>) -> Result<QrSolution> {
    let z = problem.design;
    let (n, m) = z.shape();
    let tau = problem.tau;
    let u: Vec<f64> = (0..n).map(|i| problem.weight(i)).collect();
    let c = DVector::from_iterator(n, problem.y.iter().map(|v| -v));
    let uvec = DVector::from_column_slice(&u);
    let mut b = z.tr_mul(&uvec) * (1.0 - tau);
    if let Some(s) = problem.shift {
        b += DVector::from_column_slice(s);
    }
    let const_term = (1.0 - tau) * problem.y.iter().zip(&u).map(|(a, w)| a * w).sum::<f64>();

    // Starting point.
    let gram = z.tr_mul(z);
    let chol = gram.clone().cholesky().ok_or(QrError::RankDeficient)?;
    let beta0 = match warm_start {
        Some(w0) if w0.len() == m => DVector::from_column_slice(w0),
        _ => chol.solve(&z.tr_mul(&DVector::from_column_slice(problem.y))),
    };
    let mut yd = -beta0;
    let mut x: DVector<f64> = uvec.map(|w| (1.0 - tau) * w);
    let mut s: DVector<f64> = uvec.map(|w| tau * w);
    let r0 = &c - z * &yd;
    let mean_abs = r0.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let delta = 0.1 * mean_abs + 1e-8 * (1.0 + c.amax());
    let mut zv = r0.map(|r| r.max(0.0) + delta);
    let mut wv = r0.map(|r| (-r).max(0.0) + delta);

    let b_scale = 1.0 + b.amax();
    let c_scale = 1.0 + c.amax();
    let frac = opts.step_fraction;

    for iter in 0..=opts.max_iter {
        let rp = &b - z.tr_mul(&x);
        let rd = &c - z * &yd - &zv + &wv;
        let gap = x.dot(&zv) + s.dot(&wv);
        let obj_est = -c.dot(&x) - const_term;
        if gap <= opts.gap_tol * (1.0 + obj_est.abs())
            && rp.amax() <= opts.feas_tol * b_scale
            && rd.amax() <= opts.feas_tol * c_scale
        {
            let beta: Vec<f64> = yd.iter().map(|v| -v).collect();
            let fitted = z * DVector::from_column_slice(&beta);
            let residuals: Vec<f64> = problem.y.iter().zip(fitted.iter()).map(|(a, f)| a - f).collect();
            let objective = problem.objective(&beta);
            return Ok(QrSolution {
                beta,
                residuals,
                objective,
                iterations: iter,
                duality_gap: gap,
            });
        }
        if iter == opts.max_iter {
            return Err(QrError::NotConverged {
                iterations: iter,
                gap,
                infeasibility: (rp.amax() / b_scale).max(rd.amax() / c_scale),
            });
        }

        let qinv: Vec<f64> = (0..n).map(|i| 1.0 / (zv[i] / x[i] + wv[i] / s[i])).collect();
        let normal = crate::linalg::weighted_gram(z, &qinv);
        let nchol = robust_cholesky(&normal).ok_or(QrError::RankDeficient)?;
        let solve_dir = |rho: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
            let qr = DVector::from_iterator(n, (0..n).map(|i| qinv[i] * rho[i]));
            let rhs = &rp + z.tr_mul(&qr);
            let dy = nchol.solve(&rhs);
            let zdy = z * &dy;
            let dx = DVector::from_iterator(n, (0..n).map(|i| qinv[i] * (zdy[i] - rho[i])));
            (dy, dx)
        };

        // predictor
        let rho = &rd + &zv - &wv;
        let (_, dx_a) = solve_dir(&rho);
        let ds_a = -&dx_a;
        let dz_a = DVector::from_iterator(n, (0..n).map(|i| -zv[i] - zv[i] / x[i] * dx_a[i]));
        let dw_a = DVector::from_iterator(n, (0..n).map(|i| -wv[i] + wv[i] / s[i] * dx_a[i]));
        let ap = max_step(&x, &dx_a).min(max_step(&s, &ds_a)).min(1.0);
        let ad = max_step(&zv, &dz_a).min(max_step(&wv, &dw_a)).min(1.0);
        let mu_aff: f64 = (0..n)
            .map(|i| {
                (x[i] + ap * dx_a[i]) * (zv[i] + ad * dz_a[i]) + (s[i] + ap * ds_a[i]) * (wv[i] + ad * dw_a[i])
            })
            .sum();
        let sigma = (mu_aff / gap).powi(3).min(1.0);
        let mu = sigma * gap / (2 * n) as f64;

        // corrector
        let cz = DVector::from_iterator(n, (0..n).map(|i| mu - x[i] * zv[i] - dx_a[i] * dz_a[i]));
        let cw = DVector::from_iterator(n, (0..n).map(|i| mu - s[i] * wv[i] - ds_a[i] * dw_a[i]));
        let rho = DVector::from_iterator(n, (0..n).map(|i| rd[i] - cz[i] / x[i] + cw[i] / s[i]));
        let (dy, dx) = solve_dir(&rho);
        let ds = -&dx;
        let dz = DVector::from_iterator(n, (0..n).map(|i| (cz[i] - zv[i] * dx[i]) / x[i]));
        let dw = DVector::from_iterator(n, (0..n).map(|i| (cw[i] + wv[i] * dx[i]) / s[i]));
        let ap = (frac * max_step(&x, &dx).min(max_step(&s, &ds))).min(1.0);
        let ad = (frac * max_step(&zv, &dz).min(max_step(&wv, &dw))).min(1.0);

        x.axpy(ap, &dx, 1.0);
        s.axpy(ap, &ds, 1.0);
        yd.axpy(ad, &dy, 1.0);
        zv.axpy(ad, &dz, 1.0);
        wv.axpy(ad, &dw, 1.0);
    }
    unreachable!()
}

/// Solves one problem from the least-squares starting point.
pub fn fit_qr(problem: &QrProblem<'_>) -> Result<QrSolution> {
    fit_qr_with(problem, &SolverOptions::default(), None)
}

/// Largest `a` with `v + a dv >= 0` (infinite when no component decreases).
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(a, d)| -a / d)
        .fold(f64::INFINITY, f64::min)
}

/// Sup-norm of the best admissible subgradient of the objective at `beta`.
///
/// Residuals with `|r_i| <= zero_tol` may take any sign weight in
/// `[tau - 1, tau]`; their values minimize the Euclidean residual over that
/// box (minimum-norm least squares, clipped, then refined by projected
/// coordinate descent). Returns the residual norm together
/// with the scale `sum(w) * max_i ||z_i||_inf` it is compared against.
pub fn subgradient_residual(problem: &QrProblem<'_>, beta: &[f64], zero_tol: f64) -> (f64, f64) {
    let z = problem.design;
    let (n, m) = z.shape();
    let tau = problem.tau;
    let fitted = z * DVector::from_column_slice(beta);
    let mut g = DVector::zeros(m);
    if let Some(s) = problem.shift {
        g -= DVector::from_column_slice(s);
    }
    let mut zero_set = Vec::new();
    for i in 0..n {
        let r = problem.y[i] - fitted[i];
        if r.abs() <= zero_tol {
            zero_set.push(i);
        } else {
            let psi = if r < 0.0 { tau - 1.0 } else { tau };
            for j in 0..m {
                g[j] += problem.weight(i) * z[(i, j)] * psi;
            }
        }
    }
    if !zero_set.is_empty() {
        let k = zero_set.len();
        let a = DMatrix::from_fn(m, k, |j, c| problem.weight(zero_set[c]) * z[(zero_set[c], j)]);
        let target = -&g;
        let psi = a
            .clone()
            .svd(true, true)
            .solve(&target, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(k))
            .map(|p| p.clamp(tau - 1.0, tau));
        g += box_refine(&a, psi, &g, tau - 1.0, tau);
    }
    let wsum: f64 = (0..n).map(|i| problem.weight(i)).sum();
    let zmax = z.amax();
    (g.amax(), wsum * zmax)
}

/// Projected coordinate descent on `|g + a psi|^2` over `lo <= psi <= hi`,
/// started at `psi`; returns `a psi` at the end.
fn box_refine(a: &DMatrix<f64>, mut psi: DVector<f64>, g: &DVector<f64>, lo: f64, hi: f64) -> DVector<f64> {
    let norms: Vec<f64> = a.column_iter().map(|c| c.norm_squared()).collect();
    let mut r = g + a * &psi;
    let scale = g.amax().max(a.amax());
    for _ in 0..2_000_000 {
        let mut moved = 0.0f64;
        for c in 0..psi.len() {
            if norms[c] == 0.0 {
                continue;
            }
            let col = a.column(c);
            let next = (psi[c] - col.dot(&r) / norms[c]).clamp(lo, hi);
            let step = next - psi[c];
            if step != 0.0 {
                r.axpy(step, &col, 1.0);
                psi[c] = next;
                moved = moved.max(step.abs() * norms[c].sqrt());
            }
        }
        if moved <= 1e-15 * scale {
            break;
        }
    }
    r - g
}

/// Exhaustive oracle for small problems: an optimal coefficient vector
/// interpolates `m` observations, so it suffices to solve every nonsingular
/// `m x m` row subsystem and keep the best objective.
pub fn brute_force_qr(problem: &QrProblem<'_>) -> Result<QrSolution> {
    problem.validate()?;
    let z = problem.design;
    let (n, m) = z.shape();
    if n > 30 || m > 4 {
        return Err(QrError::OracleTooLarge { n, m });
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        let a = DMatrix::from_fn(m, m, |r, c| z[(idx[r], c)]);
        let rhs = DVector::from_iterator(m, idx.iter().map(|&i| problem.y[i]));
        let lu = a.clone().lu();
        let det = lu.determinant();
        let scale = a.abs().max().powi(m as i32).max(f64::MIN_POSITIVE);
        if det.abs() > 1e-12 * scale {
            if let Some(sol) = lu.solve(&rhs) {
                let beta: Vec<f64> = sol.iter().cloned().collect();
                let f = problem.objective(&beta);
                if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                    best = Some((f, beta));
                }
            }
        }
        // next combination in lexicographic order
        let mut k = m;
        loop {
            if k == 0 {
                let (objective, beta) = best.ok_or(QrError::AllSingular)?;
                let fitted = z * DVector::from_column_slice(&beta);
                let residuals = problem.y.iter().zip(fitted.iter()).map(|(a, f)| a - f).collect();
                return Ok(QrSolution {
                    beta,
                    residuals,
                    objective,
                    iterations: 0,
                    duality_gap: 0.0,
                });
            }
            k -= 1;
            if idx[k] < n - m + k {
                idx[k] += 1;
                for j in k + 1..m {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Options for fitting a whole quantile process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessOptions {
    pub solver: SolverOptions,
    /// Start each tau from the previous tau's coefficients. Forces a
    /// sequential sweep over the grid.
    pub warm_start: bool,
    pub exec: Execution,
}

impl Default for ProcessOptions {
    fn default() -> Self {
        ProcessOptions {
            solver: SolverOptions::default(),
            warm_start: true,
            exec: Execution::Parallel,
        }
    }
}

/// Solutions over an ascending tau grid.
#[derive(Debug, Clone)]
pub struct QrProcessFit {
    pub taus: Vec<f64>,
    /// `m x |taus|`: column `t` is `beta_hat(taus[t])`.
    pub betas: DMatrix<f64>,
    pub solutions: Vec<QrSolution>,
}

impl QrProcessFit {
    pub fn beta(&self, t: usize) -> &[f64] {
        &self.solutions[t].beta
    }
}

/// Fits every tau of the grid. `shifts`, when given, supplies one linear
/// term per tau; `anchors` (`m x |taus|`) one anchor per tau.
pub fn fit_process(
    design: &DMatrix<f64>,
    y: &[f64],
    taus: &[f64],
    weights: Option<&[f64]>,
    shifts: Option<&[Vec<f64>]>,
    anchors: Option<&DMatrix<f64>>,
    opts: &ProcessOptions,
) -> Result<QrProcessFit> {
    if let Some(s) = shifts {
        if s.len() != taus.len() {
            return Err(QrError::Dimension(format!("{} shifts for {} taus", s.len(), taus.len())));
        }
    }
    if let Some(a) = anchors {
        if a.shape() != (design.ncols(), taus.len()) {
            return Err(QrError::Dimension("anchors must be m x |taus|".into()));
        }
    }
    let problem_at = |t: usize| QrProblem {
        design,
        y,
        tau: taus[t],
        weights,
        shift: shifts.map(|s| s[t].as_slice()),
        anchor: anchors.map(|a| &a.as_slice()[t * a.nrows()..(t + 1) * a.nrows()]),
    };
    let wrap = |t: usize, e: QrError| QrError::AtTau {
        tau: taus[t],
        source: Box::new(e),
    };
    let solutions = if opts.warm_start {
        let mut out: Vec<QrSolution> = Vec::with_capacity(taus.len());
        for t in 0..taus.len() {
            let warm = out.last().map(|s| s.beta.as_slice());
            out.push(fit_qr_with(&problem_at(t), &opts.solver, warm).map_err(|e| wrap(t, e))?);
        }
        out
    } else {
        par::try_map_range(opts.exec, taus.len(), |t| {
            fit_qr_with(&problem_at(t), &opts.solver, None).map_err(|e| wrap(t, e))
        })?
    };
    let m = design.ncols();
    let betas = DMatrix::from_fn(m, taus.len(), |j, t| solutions[t].beta[j]);
    Ok(QrProcessFit {
        taus: taus.to_vec(),
        betas,
        solutions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn median_of_three() {
        let z = ones(3);
        let y = [1.0, 2.0, 3.0];
        let sol = fit_qr(&QrProblem::new(&z, &y, 0.5)).unwrap();
        assert_abs_diff_eq!(sol.beta[0], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn upper_quantile_of_two_points() {
        let z = ones(2);
        let y = [0.0, 10.0];
        let sol = fit_qr(&QrProblem::new(&z, &y, 0.9)).unwrap();
        assert_abs_diff_eq!(sol.beta[0], 10.0, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn even_median_lands_on_flat_face() {
        let z = ones(4);
        let y = [1.0, 2.0, 3.0, 4.0];
        let sol = fit_qr(&QrProblem::new(&z, &y, 0.5)).unwrap();
        assert_abs_diff_eq!(sol.objective, 2.0, epsilon = 1e-9);
        assert!(sol.beta[0] >= 2.0 - 1e-8 && sol.beta[0] <= 3.0 + 1e-8);
    }

    #[test]
    fn brute_force_edge_cases() {
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let y = [3.0, 5.0];
        let sol = brute_force_qr(&QrProblem::new(&z, &y, 0.3)).unwrap();
        assert_abs_diff_eq!(sol.objective, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.beta[1], 2.0, epsilon = 1e-12);

        let singular = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(brute_force_qr(&QrProblem::new(&singular, &[1.0, 2.0, 3.0], 0.5)), Err(QrError::AllSingular));
        let big = DMatrix::from_element(31, 1, 1.0);
        assert!(matches!(
            brute_force_qr(&QrProblem::new(&big, &[0.0; 31], 0.5)),
            Err(QrError::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn matches_brute_force_with_weights_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let n = rng.random_range(8..=25);
            let m = rng.random_range(1..=3);
            let z = DMatrix::from_fn(n, m, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
            let shift: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
            let tau = rng.random_range(0.15..0.85);
            let p = QrProblem::new(&z, &y, tau).with_weights(&w).with_shift(&shift);
            let ip = fit_qr(&p).unwrap();
            let bf = brute_force_qr(&p).unwrap();
            assert!(
                (ip.objective - bf.objective).abs() <= 1e-8 * (1.0 + bf.objective.abs()),
                "{} vs {}",
                ip.objective,
                bf.objective
            );
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let z = ones(3);
        assert_eq!(fit_qr(&QrProblem::new(&z, &[1.0, 2.0, 3.0], 1.0)).unwrap_err(), QrError::InvalidTau(1.0));
        assert!(matches!(fit_qr(&QrProblem::new(&z, &[1.0, 2.0], 0.5)), Err(QrError::Dimension(_))));
        assert_eq!(
            fit_qr(&QrProblem::new(&z, &[1.0, 2.0, 3.0], 0.5).with_weights(&[1.0, 0.0, 1.0])).unwrap_err(),
            QrError::InvalidWeights
        );
        let dup = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(fit_qr(&QrProblem::new(&dup, &[1.0, 2.0, 3.0], 0.5)).unwrap_err(), QrError::RankDeficient);
    }

    #[test]
    fn process_singleton_grid_equals_single_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = DMatrix::from_fn(40, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(0.0..1.0) });
        let y: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
        let single = fit_qr(&QrProblem::new(&z, &y, 0.3)).unwrap();
        let proc = fit_process(&z, &y, &[0.3], None, None, None, &ProcessOptions::default()).unwrap();
        assert_eq!(proc.solutions[0], single);
    }

    #[test]
    fn scaling_weights_leaves_fit_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = DMatrix::from_fn(60, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let y: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..60).map(|_| rng.random_range(0.5..2.0)).collect();
        let w7: Vec<f64> = w.iter().map(|v| v * 7.0).collect();
        let a = fit_qr(&QrProblem::new(&z, &y, 0.4).with_weights(&w)).unwrap();
        let b = fit_qr(&QrProblem::new(&z, &y, 0.4).with_weights(&w7)).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(a.beta[j], b.beta[j], epsilon = 1e-6);
        }
    }
    #[test]
    fn anchor_bounds_a_flat_shifted_problem() {
        // Shifting the first group's score to its upper limit makes every
        // coefficient below the group minimum optimal.
        let z = DMatrix::from_fn(10, 2, |i, j| f64::from(u8::from((i < 5) == (j == 0))));
        let y: Vec<f64> = (0..10).map(|i| 1.0 + 0.1 * i as f64).collect();
        let tau = 0.3;
        let shift = [tau * 5.0, 0.0];
        let anchor = [0.0, 1.6];
        let p = QrProblem::new(&z, &y, tau).with_shift(&shift).with_anchor(&anchor);
        let sol = fit_qr(&p).unwrap();
        assert_abs_diff_eq!(sol.beta[0], 0.0, epsilon = 1e-6);
        assert_eq!(sol.residuals.len(), 10);
        let flat = QrProblem::new(&z, &y, tau).with_shift(&shift);
        assert_abs_diff_eq!(sol.objective, flat.objective(&[1.0, 1.6]), epsilon = 1e-8);
    }

    #[test]
    fn anchor_leaves_regular_fits_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = DMatrix::from_fn(80, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let y: Vec<f64> = (0..80).map(|_| rng.random_range(-1.0..1.0)).collect();
        let plain = fit_qr(&QrProblem::new(&z, &y, 0.35)).unwrap();
        let anchor = [5.0, -5.0, 5.0];
        let p = QrProblem::new(&z, &y, 0.35).with_anchor(&anchor);
        let anchored = fit_qr(&p).unwrap();
        let penalty: f64 = (0..3).map(|k| p.anchor_weight() * check_loss(0.35, anchor[k] - plain.beta[k])).sum();
        assert!(anchored.objective >= plain.objective - 1e-9);
        assert!(anchored.objective <= plain.objective + penalty + 1e-9);
    }
}
