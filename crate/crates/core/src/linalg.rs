//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Outcome of a column-pivoted Householder QR rank check.
#[derive(Debug, Clone)]
pub struct PivotedRank {
    pub rank: usize,
    /// Column order chosen by the pivoting.
    pub order: Vec<usize>,
    /// Absolute diagonal of `R` in pivot order.
    pub pivots: Vec<f64>,
}

impl PivotedRank {
    /// Columns judged linearly dependent on the preceding ones.
    pub fn dependent(&self) -> Vec<usize> {
        let mut d = self.order[self.rank..].to_vec();
        d.sort_unstable();
        d
    }
}

/// Numerical rank of `a` via Householder QR with column pivoting; pivots
/// below `rel_tol` times the largest pivot count as zero.
pub fn pivoted_rank(a: &DMatrix<f64>, rel_tol: f64) -> PivotedRank {
    let (n, m) = a.shape();
    let mut r = a.clone();
    let mut order: Vec<usize> = (0..m).collect();
    let mut norms: Vec<f64> = (0..m).map(|j| r.column(j).norm_squared()).collect();
    let mut pivots = Vec::with_capacity(m.min(n));
    let steps = m.min(n);
    for k in 0..steps {
        // recompute trailing norms exactly to avoid downdating drift
        for j in k..m {
            norms[j] = r.view((k, j), (n - k, 1)).norm_squared();
        }
        let p = (k..m).max_by(|&x, &y| norms[x].total_cmp(&norms[y])).unwrap();
        if p != k {
            r.swap_columns(k, p);
            order.swap(k, p);
            norms.swap(k, p);
        }
        let mut v: DVector<f64> = r.view((k, k), (n - k, 1)).column(0).into_owned();
        let alpha = v.norm();
        pivots.push(alpha);
        if alpha == 0.0 {
            continue;
        }
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vn2 = v.norm_squared();
        for j in k..m {
            let dot: f64 = (0..n - k).map(|i| v[i] * r[(k + i, j)]).sum();
            let f = 2.0 * dot / vn2;
            for i in 0..n - k {
                r[(k + i, j)] -= f * v[i];
            }
        }
    }
    let largest = pivots.iter().cloned().fold(0.0, f64::max);
    let rank = pivots.iter().take_while(|&&p| p > rel_tol * largest && largest > 0.0).count();
    PivotedRank {
        rank,
        order,
        pivots,
    }
}

/// `Z' diag(d) Z` for an `n x m` matrix `z`.
pub fn weighted_gram(z: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let mut zd = z.clone();
    for mut col in zd.column_iter_mut() {
        for (v, w) in col.iter_mut().zip(d) {
            *v *= w;
        }
    }
    let g = zd.tr_mul(z);
    symmetrize(g)
}

pub fn symmetrize(mut g: DMatrix<f64>) -> DMatrix<f64> {
    let m = g.nrows();
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Cholesky factorization that retries with a growing diagonal ridge when
/// the matrix is numerically semidefinite. Returns `None` if even the
/// regularized matrix fails.
pub fn robust_cholesky(a: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = a.clone().cholesky() {
        return Some(c);
    }
    let scale = a.diagonal().iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut ridge = 1e-14 * scale;
    for _ in 0..6 {
        let mut b = a.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += ridge;
        }
        if let Some(c) = b.cholesky() {
            return Some(c);
        }
        ridge *= 100.0;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_duplicate_column() {
        let a = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 2.0, 1.0, 0.5, 0.5, 1.0, -1.0, -1.0, 1.0, 3.0, 3.0]);
        let pr = pivoted_rank(&a, 1e-10);
        assert_eq!(pr.rank, 2);
        assert_eq!(pr.dependent().len(), 1);
        assert!(pr.dependent()[0] == 1 || pr.dependent()[0] == 2);
    }

    #[test]
    fn full_rank_identity() {
        let pr = pivoted_rank(&DMatrix::identity(5, 3), 1e-10);
        assert_eq!(pr.rank, 3);
        assert!(pr.dependent().is_empty());
    }

    #[test]
    fn weighted_gram_matches_direct() {
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = [1.0, 0.5, 2.0];
        let g = weighted_gram(&z, &d);
        let direct = z.transpose() * DMatrix::from_diagonal(&DVector::from_row_slice(&d)) * &z;
        assert!((g - direct).abs().max() < 1e-12);
    }
}
