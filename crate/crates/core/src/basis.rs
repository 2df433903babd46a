//! Series bases for the nonparametric block `Z(w)` and their analytic
//! derivatives.
//!
//! Four families are supported: cubic (or any degree) B-splines on a
//! breakpoint sequence, sample-orthonormal polynomials, a Fourier basis
//! and a fully saturated indicator basis. All evaluators are pure functions
//! of an immutable spec, so they can be shared freely across threads.

use thiserror::Error;

/// Largest derivative order supported by [`BasisSpec::eval`].
pub const MAX_DERIV: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("derivative undefined for indicator basis")]
    IndicatorDerivative,
    #[error("derivative order {0} not supported (maximum is 2)")]
    DerivOrder(usize),
    #[error("w = {w} is outside the basis domain [{lo}, {hi}]")]
    OutOfDomain { w: f64, lo: f64, hi: f64 },
    #[error("value {0} is not a level of the indicator basis")]
    UnseenLevel(f64),
    #[error("breakpoints must be finite, strictly increasing and have at least 2 entries")]
    InvalidBreakpoints,
    #[error("degree must be at least 1, got {0}")]
    InvalidDegree(usize),
    #[error("fourier nbasis must be odd and at least 3, got {0}")]
    InvalidNBasis(usize),
    #[error("fourier period must be positive and finite, got {0}")]
    InvalidPeriod(f64),
    #[error("basis range [{0}, {1}] is invalid")]
    InvalidRange(f64, f64),
    #[error("indicator basis needs at least one level")]
    NoLevels,
    #[error("no treatment values supplied")]
    Empty,
    #[error("treatment values are all identical")]
    Degenerate,
    #[error("non-finite treatment value")]
    NonFinite,
    #[error("polynomial degree {degree} needs more than {degree} distinct values, found {distinct}")]
    DegreeTooLarge { degree: usize, distinct: usize },
    #[error("quantile probabilities must be sorted and lie in [0, 1]")]
    InvalidProbs,
    #[error("quantile breakpoints collapsed to fewer than 2 distinct values")]
    TooFewBreakpoints,
    #[error("tau grid: {0}")]
    TauGrid(String),
}

pub type Result<T> = std::result::Result<T, BasisError>;

/// Declarative description of the treatment basis.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisSpec {
    BSpline(BSplineBasis),
    Polynomial(PolynomialBasis),
    Fourier(FourierBasis),
    Indicator(IndicatorBasis),
}

impl BasisSpec {
    /// Number of columns `m_w` of the nonparametric block.
    pub fn dim(&self) -> usize {
        match self {
            BasisSpec::BSpline(b) => b.dim(),
            BasisSpec::Polynomial(b) => b.degree,
            BasisSpec::Fourier(b) => b.nbasis,
            BasisSpec::Indicator(b) => b.levels.len(),
        }
    }

    /// Closed evaluation domain.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            BasisSpec::BSpline(b) => (b.breakpoints[0], *b.breakpoints.last().unwrap()),
            BasisSpec::Polynomial(b) => (b.lo, b.hi),
            BasisSpec::Fourier(b) => (b.lo, b.hi),
            BasisSpec::Indicator(b) => (b.levels[0], *b.levels.last().unwrap()),
        }
    }

    /// Whether the column space of the basis contains the constant function.
    /// Designs built on such a basis need no separate intercept.
    pub fn spans_constant(&self) -> bool {
        !matches!(self, BasisSpec::Polynomial(_))
    }

    pub fn supports_derivatives(&self) -> bool {
        !matches!(self, BasisSpec::Indicator(_))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BasisSpec::BSpline(_) => "bspline",
            BasisSpec::Polynomial(_) => "polynomial",
            BasisSpec::Fourier(_) => "fourier",
            BasisSpec::Indicator(_) => "indicator",
        }
    }

    /// Column labels, used for design and load exports.
    pub fn column_names(&self, var: &str) -> Vec<String> {
        match self {
            BasisSpec::Indicator(b) => b.levels.iter().map(|l| format!("{var}={l}")).collect(),
            _ => (0..self.dim()).map(|j| format!("{var}.{}{}", self.kind(), j + 1)).collect(),
        }
    }

    /// `d^deriv Z(w) / dw^deriv`.
    pub fn eval(&self, w: f64, deriv: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(w, deriv, &mut out)?;
        Ok(out)
    }

    /// Same as [`eval`](Self::eval) but writes into a caller-provided slice of
    /// length [`dim`](Self::dim).
    pub fn eval_into(&self, w: f64, deriv: usize, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.dim());
        if deriv > MAX_DERIV {
            return Err(BasisError::DerivOrder(deriv));
        }
        if let BasisSpec::Indicator(b) = self {
            if deriv > 0 {
                return Err(BasisError::IndicatorDerivative);
            }
            return b.eval_into(w, out);
        }
        let (lo, hi) = self.domain();
        if !(w >= lo && w <= hi) {
            return Err(BasisError::OutOfDomain { w, lo, hi });
        }
        match self {
            BasisSpec::BSpline(b) => b.eval_into(w, deriv, out),
            BasisSpec::Polynomial(b) => b.eval_into(w, deriv, out),
            BasisSpec::Fourier(b) => b.eval_into(w, deriv, out),
            BasisSpec::Indicator(_) => unreachable!(),
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// B-splines

/// B-spline basis of the given degree on a strictly increasing breakpoint
/// sequence, with `degree + 1` coincident knots at each boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    degree: usize,
    breakpoints: Vec<f64>,
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(degree: usize, breakpoints: Vec<f64>) -> Result<Self> {
        if degree == 0 {
            return Err(BasisError::InvalidDegree(degree));
        }
        if breakpoints.len() < 2
            || breakpoints.iter().any(|b| !b.is_finite())
            || breakpoints.windows(2).any(|p| p[0] >= p[1])
        {
            return Err(BasisError::InvalidBreakpoints);
        }
        let lo = breakpoints[0];
        let hi = *breakpoints.last().unwrap();
        let mut knots = vec![lo; degree + 1];
        knots.extend_from_slice(&breakpoints[1..breakpoints.len() - 1]);
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(BSplineBasis {
            degree,
            breakpoints,
            knots,
        })
    }

    /// Cubic B-splines, the common default.
    pub fn cubic(breakpoints: Vec<f64>) -> Result<Self> {
        Self::new(3, breakpoints)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// `breaks + degree - 1`.
    pub fn dim(&self) -> usize {
        self.breakpoints.len() + self.degree - 1
    }

    /// Knot span index `i` with `t_i <= w < t_{i+1}`; the right endpoint is
    /// assigned to the last non-empty span.
    fn span(&self, w: f64) -> usize {
        let p = self.degree;
        let n = self.dim();
        if w >= self.knots[n] {
            return n - 1;
        }
        // first knot strictly greater than w, minus one
        let idx = self.knots.partition_point(|&t| t <= w);
        idx.saturating_sub(1).clamp(p, n - 1)
    }

    fn eval_into(&self, w: f64, deriv: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let p = self.degree;
        let span = self.span(w);
        let ders = ders_basis_funs(span, w, p, deriv.min(p), &self.knots);
        if deriv > p {
            return;
        }
        for (j, v) in ders[deriv].iter().enumerate() {
            out[span - p + j] = *v;
        }
    }
}

/// Nonzero basis functions and their derivatives up to order `nd` at `u`
/// in knot span `i` (triangular Cox–de Boor table with the derivative
/// recurrence on the stored differences).
fn ders_basis_funs(i: usize, u: f64, p: usize, nd: usize, t: &[f64]) -> Vec<Vec<f64>> {
    let mut ndu = vec![vec![0.0; p + 1]; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    ndu[0][0] = 1.0;
    for j in 1..=p {
        left[j] = u - t[i + 1 - j];
        right[j] = t[i + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }
    let mut ders = vec![vec![0.0; p + 1]; nd + 1];
    for j in 0..=p {
        ders[0][j] = ndu[j][p];
    }
    let mut a = [vec![0.0; p + 1], vec![0.0; p + 1]];
    let (pi, ndi) = (p as isize, nd as isize);
    for r in 0..=pi {
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = 1.0;
        for k in 1..=ndi {
            let mut d = 0.0;
            let rk = r - k;
            let pk = pi - k;
            if r >= k {
                a[s2][0] = a[s1][0] / ndu[(pk + 1) as usize][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk as usize];
            }
            let j1 = if rk >= -1 { 1 } else { -rk };
            let j2 = if r - 1 <= pk { k - 1 } else { pi - r };
            for j in j1..=j2 {
                let ju = j as usize;
                a[s2][ju] = (a[s1][ju] - a[s1][ju - 1]) / ndu[(pk + 1) as usize][(rk + j) as usize];
                d += a[s2][ju] * ndu[(rk + j) as usize][pk as usize];
            }
            if r <= pk {
                a[s2][k as usize] = -a[s1][(k - 1) as usize] / ndu[(pk + 1) as usize][r as usize];
                d += a[s2][k as usize] * ndu[r as usize][pk as usize];
            }
            ders[k as usize][r as usize] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut factor = p as f64;
    for (k, row) in ders.iter_mut().enumerate().skip(1) {
        for v in row.iter_mut() {
            *v *= factor;
        }
        factor *= (p - k) as f64;
    }
    ders
}

/// Empirical quantiles of `w` at `probs` (linear interpolation between
/// order statistics), with exact duplicates removed.
pub fn quantile_breakpoints(w: &[f64], probs: &[f64]) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(BasisError::Empty);
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(BasisError::NonFinite);
    }
    if probs.is_empty()
        || probs.iter().any(|p| !(0.0..=1.0).contains(p))
        || probs.windows(2).any(|p| p[0] > p[1])
    {
        return Err(BasisError::InvalidProbs);
    }
    let mut sorted = w.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(BasisError::Degenerate);
    }
    let mut out: Vec<f64> = probs.iter().map(|&p| empirical_quantile(&sorted, p)).collect();
    out.dedup();
    if out.len() < 2 {
        return Err(BasisError::TooFewBreakpoints);
    }
    Ok(out)
}

/// Linear-interpolation quantile of an ascending sample.
pub(crate) fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

// ---------------------------------------------------------------------------
// Orthogonal polynomials

/// Polynomials of degree `1..=degree` orthonormal over the fitting sample
/// (each column has zero sample mean and unit Euclidean norm).
///
/// The columns are stored through their three-term recurrence in the
/// standardized variable `t = (w - center) / scale`, which keeps
/// evaluation and differentiation exact and stable at high degree.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialBasis {
    degree: usize,
    center: f64,
    scale: f64,
    /// recurrence shifts `a_j`, `j = 0..degree`
    alpha: Vec<f64>,
    /// squared norms of the monic polynomials `p_0..=p_degree`
    norm2: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl PolynomialBasis {
    pub fn fit(w: &[f64], degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(BasisError::InvalidDegree(0));
        }
        if w.is_empty() {
            return Err(BasisError::Empty);
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(BasisError::NonFinite);
        }
        let mut distinct = w.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() <= degree {
            return Err(BasisError::DegreeTooLarge {
                degree,
                distinct: distinct.len(),
            });
        }
        let lo = distinct[0];
        let hi = *distinct.last().unwrap();
        let n = w.len() as f64;
        let center = w.iter().sum::<f64>() / n;
        let scale = 0.5 * (hi - lo);
        let t: Vec<f64> = w.iter().map(|v| (v - center) / scale).collect();

        // Stieltjes procedure on the empirical measure.
        let mut alpha = Vec::with_capacity(degree);
        let mut norm2 = Vec::with_capacity(degree + 1);
        let mut prev = vec![0.0; t.len()];
        let mut cur = vec![1.0; t.len()];
        norm2.push(n);
        for j in 0..degree {
            let a = t.iter().zip(&cur).map(|(x, p)| x * p * p).sum::<f64>() / norm2[j];
            let b = if j == 0 { 0.0 } else { norm2[j] / norm2[j - 1] };
            let next: Vec<f64> = t
                .iter()
                .zip(cur.iter().zip(&prev))
                .map(|(x, (p, q))| (x - a) * p - b * q)
                .collect();
            let nn = next.iter().map(|v| v * v).sum::<f64>();
            alpha.push(a);
            norm2.push(nn);
            prev = std::mem::replace(&mut cur, next);
        }
        Ok(PolynomialBasis {
            degree,
            center,
            scale,
            alpha,
            norm2,
            lo,
            hi,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    fn eval_into(&self, w: f64, deriv: usize, out: &mut [f64]) {
        let t = (w - self.center) / self.scale;
        // value, first and second derivative of p_{j-1} and p_j in t
        let (mut p0, mut d0, mut s0) = (0.0, 0.0, 0.0);
        let (mut p1, mut d1, mut s1) = (1.0, 0.0, 0.0);
        let chain = self.scale.powi(-(deriv as i32));
        for j in 0..self.degree {
            let a = self.alpha[j];
            let b = if j == 0 { 0.0 } else { self.norm2[j] / self.norm2[j - 1] };
            let p2 = (t - a) * p1 - b * p0;
            let d2 = p1 + (t - a) * d1 - b * d0;
            let s2 = 2.0 * d1 + (t - a) * s1 - b * s0;
            let v = match deriv {
                0 => p2,
                1 => d2,
                _ => s2,
            };
            out[j] = v * chain / self.norm2[j + 1].sqrt();
            (p0, d0, s0) = (p1, d1, s1);
            (p1, d1, s1) = (p2, d2, s2);
        }
    }

    /// Monomial coefficients of each column in the standardized variable
    /// `t = (w - center) / scale`: row `j` holds the coefficients of column
    /// `j + 1` for powers `t^0..=t^degree`.
    pub fn coefficient_map(&self) -> (f64, f64, Vec<Vec<f64>>) {
        let d = self.degree;
        let mut prev = vec![0.0; d + 1];
        let mut cur = vec![0.0; d + 1];
        cur[0] = 1.0;
        let mut rows = Vec::with_capacity(d);
        for j in 0..d {
            let a = self.alpha[j];
            let b = if j == 0 { 0.0 } else { self.norm2[j] / self.norm2[j - 1] };
            let mut next = vec![0.0; d + 1];
            for k in 0..=d {
                if k > 0 {
                    next[k] += cur[k - 1];
                }
                next[k] -= a * cur[k] + b * prev[k];
            }
            let s = self.norm2[j + 1].sqrt();
            rows.push(next.iter().map(|c| c / s).collect());
            prev = std::mem::replace(&mut cur, next);
        }
        (self.center, self.scale, rows)
    }
}

// ---------------------------------------------------------------------------
// Fourier

/// Constant plus `(nbasis - 1) / 2` sine/cosine pairs, orthonormal over one
/// period: `1/sqrt(P)`, `sqrt(2/P) sin(2 pi j w / P)`, `sqrt(2/P) cos(2 pi j w / P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBasis {
    nbasis: usize,
    period: f64,
    lo: f64,
    hi: f64,
}

impl FourierBasis {
    pub fn new(nbasis: usize, period: f64, range: (f64, f64)) -> Result<Self> {
        if nbasis < 3 || nbasis % 2 == 0 {
            return Err(BasisError::InvalidNBasis(nbasis));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(BasisError::InvalidPeriod(period));
        }
        let (lo, hi) = range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(BasisError::InvalidRange(lo, hi));
        }
        Ok(FourierBasis {
            nbasis,
            period,
            lo,
            hi,
        })
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    fn eval_into(&self, w: f64, deriv: usize, out: &mut [f64]) {
        let omega = 2.0 * std::f64::consts::PI / self.period;
        let c = (2.0 / self.period).sqrt();
        out[0] = if deriv == 0 { 1.0 / self.period.sqrt() } else { 0.0 };
        for j in 1..=(self.nbasis - 1) / 2 {
            let f = omega * j as f64;
            let (s, co) = (f * w).sin_cos();
            let (vs, vc) = match deriv {
                0 => (s, co),
                1 => (f * co, -f * s),
                _ => (-f * f * s, -f * f * co),
            };
            out[2 * j - 1] = c * vs;
            out[2 * j] = c * vc;
        }
    }
}

// ---------------------------------------------------------------------------
// Indicators

/// One dummy column per distinct treatment value.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorBasis {
    levels: Vec<f64>,
}

impl IndicatorBasis {
    /// Levels are sorted and deduplicated.
    pub fn new(mut levels: Vec<f64>) -> Result<Self> {
        if levels.iter().any(|v| !v.is_finite()) {
            return Err(BasisError::NonFinite);
        }
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        if levels.is_empty() {
            return Err(BasisError::NoLevels);
        }
        Ok(IndicatorBasis { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    fn eval_into(&self, w: f64, out: &mut [f64]) -> Result<()> {
        let k = self
            .levels
            .binary_search_by(|l| l.total_cmp(&w))
            .map_err(|_| BasisError::UnseenLevel(w))?;
        out.iter_mut().for_each(|v| *v = 0.0);
        out[k] = 1.0;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Quantile-index grid

/// Strictly increasing quantile indices in `(0, 1)` plus the subset that is
/// printed in reports.
#[derive(Debug, Clone, PartialEq)]
pub struct TauGrid {
    taus: Vec<f64>,
    print_idx: Vec<usize>,
}

impl TauGrid {
    /// `print_taus` values that are not grid points are replaced by the
    /// nearest grid point with a warning. An empty `print_taus` prints the
    /// whole grid.
    pub fn new(taus: Vec<f64>, print_taus: &[f64]) -> Result<Self> {
        if taus.is_empty() {
            return Err(BasisError::TauGrid("empty grid".into()));
        }
        if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(BasisError::TauGrid(format!("tau {t} not in (0, 1)")));
        }
        if taus.windows(2).any(|p| p[0] >= p[1]) {
            return Err(BasisError::TauGrid(
                "taus must be strictly increasing without duplicates".into(),
            ));
        }
        let mut print_idx = Vec::new();
        if print_taus.is_empty() {
            print_idx.extend(0..taus.len());
        }
        for &pt in print_taus {
            let (k, _) = taus
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - pt).abs().total_cmp(&(b.1 - pt).abs()))
                .unwrap();
            if taus[k] != pt {
                log::warn!("print tau {pt} is not on the grid; using nearest grid point {}", taus[k]);
            }
            if !print_idx.contains(&k) {
                print_idx.push(k);
            }
        }
        print_idx.sort_unstable();
        Ok(TauGrid { taus, print_idx })
    }

    /// Evenly spaced grid `k / (count + 1)`, `k = 1..=count`.
    pub fn uniform(count: usize) -> Result<Self> {
        let taus = (1..=count).map(|k| k as f64 / (count + 1) as f64).collect();
        Self::new(taus, &[])
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn print_indices(&self) -> &[usize] {
        &self.print_idx
    }

    pub fn print_taus(&self) -> Vec<f64> {
        self.print_idx.iter().map(|&k| self.taus[k]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct recursive Cox–de Boor definition, used as an independent check.
    fn naive_bspline(t: &[f64], i: usize, p: usize, x: f64, right_end: bool) -> f64 {
        if p == 0 {
            let inside = t[i] <= x && x < t[i + 1];
            let at_end = right_end && x == t[i + 1] && t[i] < t[i + 1] && t[i + 1..].iter().all(|&k| k == t[i + 1]);
            return if inside || at_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = t[i + p] - t[i];
        if d1 > 0.0 {
            v += (x - t[i]) / d1 * naive_bspline(t, i, p - 1, x, right_end);
        }
        let d2 = t[i + p + 1] - t[i + 1];
        if d2 > 0.0 {
            v += (t[i + p + 1] - x) / d2 * naive_bspline(t, i + 1, p - 1, x, right_end);
        }
        v
    }

    fn naive_bspline_deriv(t: &[f64], i: usize, p: usize, x: f64, k: usize) -> f64 {
        if k == 0 {
            return naive_bspline(t, i, p, x, true);
        }
        let mut v = 0.0;
        let d1 = t[i + p] - t[i];
        if d1 > 0.0 {
            v += p as f64 / d1 * naive_bspline_deriv(t, i, p - 1, x, k - 1);
        }
        let d2 = t[i + p + 1] - t[i + 1];
        if d2 > 0.0 {
            v -= p as f64 / d2 * naive_bspline_deriv(t, i + 1, p - 1, x, k - 1);
        }
        v
    }

    fn breaks11() -> Vec<f64> {
        vec![0.0, 1.0, 2.5, 3.0, 4.5, 6.0, 7.0, 8.2, 9.0, 9.5, 12.0]
    }

    #[test]
    fn bspline_dimension_with_eleven_breakpoints() {
        let b = BSplineBasis::cubic(breaks11()).unwrap();
        assert_eq!(b.dim(), 13);
        // independent count: knots minus order
        assert_eq!(b.knots().len() - 4, 13);
    }

    #[test]
    fn bspline_matches_naive_recursion() {
        let b = BSplineBasis::cubic(breaks11()).unwrap();
        let spec = BasisSpec::BSpline(b.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..12.0)).collect();
        pts.extend(breaks11());
        for &x in &pts {
            for k in 0..=2 {
                let fast = spec.eval(x, k).unwrap();
                for (i, f) in fast.iter().enumerate() {
                    let slow = naive_bspline_deriv(b.knots(), i, 3, x, k);
                    // derivatives are one-sided at breakpoints; skip those for k=2
                    if k == 2 && breaks11().contains(&x) {
                        continue;
                    }
                    assert_abs_diff_eq!(*f, slow, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn bspline_partition_of_unity_and_local_support() {
        let spec = BasisSpec::BSpline(BSplineBasis::cubic(breaks11()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let x = rng.random_range(0.0..=12.0);
            let v = spec.eval(x, 0).unwrap();
            assert_abs_diff_eq!(v.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(v.iter().filter(|c| **c != 0.0).count() <= 4);
            let d = spec.eval(x, 1).unwrap();
            assert_abs_diff_eq!(d.iter().sum::<f64>(), 0.0, epsilon = 1e-10);
        }
        // right endpoint uses the last span
        let v = spec.eval(12.0, 0).unwrap();
        assert_abs_diff_eq!(v[12], 1.0, epsilon = 1e-15);
        assert!(matches!(spec.eval(12.0001, 0), Err(BasisError::OutOfDomain { .. })));
    }

    #[test]
    fn linear_spline_second_derivative_is_zero() {
        let spec = BasisSpec::BSpline(BSplineBasis::new(1, vec![0.0, 1.0, 2.0]).unwrap());
        assert_eq!(spec.eval(0.5, 2).unwrap(), vec![0.0; 3]);
        assert_eq!(spec.eval(0.5, 0).unwrap(), vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn quantile_breakpoints_examples() {
        let w: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile_breakpoints(&w, &[0.0, 0.5, 1.0]).unwrap(), vec![1.0, 50.5, 100.0]);
        assert_eq!(quantile_breakpoints(&w, &[0.0, 1.0]).unwrap(), vec![1.0, 100.0]);
        assert_eq!(quantile_breakpoints(&[2.0; 5], &[0.0, 1.0]), Err(BasisError::Degenerate));
        // ties collapse
        let tied = [1.0, 1.0, 1.0, 1.0, 2.0];
        assert_eq!(quantile_breakpoints(&tied, &[0.0, 0.25, 0.5, 1.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn polynomial_three_points_degree_one() {
        let p = PolynomialBasis::fit(&[-1.0, 0.0, 1.0], 1).unwrap();
        let spec = BasisSpec::Polynomial(p);
        let s = 2f64.sqrt();
        for (w, want) in [(-1.0, -1.0 / s), (0.0, 0.0), (1.0, 1.0 / s)] {
            assert_abs_diff_eq!(spec.eval(w, 0).unwrap()[0], want, epsilon = 1e-14);
        }
        assert_eq!(PolynomialBasis::fit(&[1.0, 2.0], 0), Err(BasisError::InvalidDegree(0)));
        assert!(matches!(
            PolynomialBasis::fit(&[1.0, 2.0, 2.0], 2),
            Err(BasisError::DegreeTooLarge { .. })
        ));
    }

    #[test]
    fn polynomial_degree_twelve_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = (0..2000).map(|_| rng.random_range(0..60) as f64).collect();
        let p = PolynomialBasis::fit(&w, 12).unwrap();
        let spec = BasisSpec::Polynomial(p);
        let cols: Vec<Vec<f64>> = w.iter().map(|&x| spec.eval(x, 0).unwrap()).collect();
        for a in 0..12 {
            let mean: f64 = cols.iter().map(|r| r[a]).sum();
            assert!(mean.abs() < 1e-10, "column {a} sum {mean}");
            for b in a..12 {
                let ip: f64 = cols.iter().map(|r| r[a] * r[b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((ip - want).abs() < 1e-10, "<{a},{b}> = {ip}");
            }
        }
    }

    #[test]
    fn polynomial_coefficient_map_reproduces_values() {
        let w = [0.0, 1.0, 3.0, 4.0, 7.0, 9.0];
        let p = PolynomialBasis::fit(&w, 3).unwrap();
        let (c, s, rows) = p.coefficient_map();
        let spec = BasisSpec::Polynomial(p);
        for &x in &[0.5, 2.0, 8.9] {
            let t = (x - c) / s;
            let v = spec.eval(x, 0).unwrap();
            for (j, row) in rows.iter().enumerate() {
                let direct: f64 = row.iter().enumerate().map(|(k, a)| a * t.powi(k as i32)).sum();
                assert_abs_diff_eq!(direct, v[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fourier_first_derivative_symbolic() {
        let period = 7.0;
        let spec = BasisSpec::Fourier(FourierBasis::new(3, period, (0.0, 10.0)).unwrap());
        let w = 2.3;
        let om = 2.0 * std::f64::consts::PI / period;
        let c = (2.0 / period).sqrt();
        let d = spec.eval(w, 1).unwrap();
        assert_eq!(d[0], 0.0);
        assert_abs_diff_eq!(d[1], c * om * (om * w).cos(), epsilon = 1e-14);
        assert_abs_diff_eq!(d[2], -c * om * (om * w).sin(), epsilon = 1e-14);
        assert!(FourierBasis::new(4, 1.0, (0.0, 1.0)).is_err());
    }

    #[test]
    fn finite_differences_agree_for_smooth_bases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..10.0)).collect();
        let probs: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        let specs = vec![
            BasisSpec::BSpline(BSplineBasis::cubic(quantile_breakpoints(&w, &probs).unwrap()).unwrap()),
            BasisSpec::Polynomial(PolynomialBasis::fit(&w, 8).unwrap()),
            BasisSpec::Fourier(FourierBasis::new(9, 20.0, (0.0, 10.0)).unwrap()),
        ];
        let h = 1e-5;
        for spec in &specs {
            let (lo, hi) = spec.domain();
            for _ in 0..100 {
                let x = rng.random_range(lo + 1e-3..hi - 1e-3);
                for k in 1..=2 {
                    let up = spec.eval(x + h, k - 1).unwrap();
                    let dn = spec.eval(x - h, k - 1).unwrap();
                    let d = spec.eval(x, k).unwrap();
                    for j in 0..d.len() {
                        let fd = (up[j] - dn[j]) / (2.0 * h);
                        assert!((fd - d[j]).abs() <= 1e-5, "{} k={k} j={j}: {fd} vs {}", spec.kind(), d[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn indicator_basis() {
        let spec = BasisSpec::Indicator(IndicatorBasis::new(vec![3.0, 1.0, 2.0, 1.0]).unwrap());
        assert_eq!(spec.dim(), 3);
        assert_eq!(spec.eval(2.0, 0).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(spec.eval(2.0, 1), Err(BasisError::IndicatorDerivative));
        assert_eq!(spec.eval(2.5, 0), Err(BasisError::UnseenLevel(2.5)));
        assert_eq!(IndicatorBasis::new(vec![]), Err(BasisError::NoLevels));
    }

    #[test]
    fn tau_grid_validation() {
        let g = TauGrid::new((1..=24).map(|k| k as f64 / 25.0).collect(), &[0.2, 0.4, 0.61]).unwrap();
        assert_eq!(g.print_taus(), vec![0.2, 0.4, 0.6]);
        assert!(TauGrid::new(vec![0.5, 0.5], &[]).is_err());
        assert!(TauGrid::new(vec![0.0, 0.5], &[]).is_err());
        assert!(TauGrid::new(vec![], &[]).is_err());
        assert_eq!(TauGrid::uniform(3).unwrap().taus(), &[0.25, 0.5, 0.75]);
    }
}
