//! Small dense symmetric helpers: PD repair, working covariance factors, SPD solves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Eigenvalues below this mark a matrix as needing repair.
pub const PD_THRESHOLD: f64 = 1e-8;
/// Repaired eigenvalues are floored to this value.
pub const PD_FLOOR: f64 = 1e-6;

/// Outcome of [`repair_pd`].
#[derive(Debug, Clone)]
pub struct Repaired {
    pub matrix: DMatrix<f64>,
    pub repaired: bool,
}

/// Returns `m` unchanged when its smallest eigenvalue is at least [`PD_THRESHOLD`];
/// otherwise floors the spectrum at [`PD_FLOOR`] and reassembles. `None` if the
/// eigendecomposition produces non-finite values.
pub fn repair_pd(m: DMatrix<f64>) -> Option<Repaired> {
    let n = m.nrows();
    if n == 0 {
        return Some(Repaired {
            matrix: m,
            repaired: false,
        });
    }
    // Cholesky of (m - t I) succeeds iff every eigenvalue exceeds t.
    let mut shifted = m.clone();
    for i in 0..n {
        shifted[(i, i)] -= PD_THRESHOLD;
    }
    if Cholesky::new(shifted).is_some() {
        return Some(Repaired {
            matrix: m,
            repaired: false,
        });
    }
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.iter().any(|e| !e.is_finite()) {
        return None;
    }
    let floored = eig.eigenvalues.map(|e| e.max(PD_FLOOR));
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&floored) * q.transpose();
    // restore exact symmetry lost in the product
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Some(Repaired {
        matrix: out,
        repaired: true,
    })
}

/// A factored working covariance `Delta^{1/2} R Delta^{1/2}`.
#[derive(Debug, Clone)]
pub enum WorkingCov {
    /// `R` is the identity.
    Diagonal(DVector<f64>),
    Dense {
        matrix: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
    },
}

impl WorkingCov {
    /// `None` when the dense matrix cannot be factored.
    pub fn new(delta: &DVector<f64>, corr: Option<&DMatrix<f64>>) -> Option<WorkingCov> {
        match corr {
            None => Some(WorkingCov::Diagonal(delta.clone())),
            Some(r) => {
                let sd = delta.map(crate::math::sqrt);
                let n = sd.len();
                let matrix = DMatrix::from_fn(n, n, |i, j| sd[i] * r[(i, j)] * sd[j]);
                let chol = Cholesky::new(matrix.clone())?;
                Some(WorkingCov::Dense { matrix, chol })
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            WorkingCov::Diagonal(d) => d.len(),
            WorkingCov::Dense { matrix, .. } => matrix.nrows(),
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            WorkingCov::Diagonal(d) => DMatrix::from_diagonal(d),
            WorkingCov::Dense { matrix, .. } => matrix.clone(),
        }
    }

    /// `V^{-1} b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            WorkingCov::Diagonal(d) => {
                let mut out = b.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row /= d[i];
                }
                out
            }
            WorkingCov::Dense { chol, .. } => chol.solve(b),
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            WorkingCov::Diagonal(d) => b.component_div(d),
            WorkingCov::Dense { chol, .. } => chol.solve(b),
        }
    }
}

/// Relative pivot size below which a symmetric matrix is treated as singular.
pub const SINGULAR_RTOL: f64 = 1e-13;

/// Cholesky factor of `m`, rejected when a pivot is negligible relative to the diagonal.
fn well_conditioned_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let scale = m.diagonal().amax();
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let ch = Cholesky::new(m.clone())?;
    let l = ch.l_dirty();
    let ok = (0..m.nrows()).all(|i| l[(i, i)] * l[(i, i)] > SINGULAR_RTOL * scale);
    ok.then_some(ch)
}

/// Inverse of a symmetric positive-definite matrix. `None` for singular or indefinite input.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let inv = well_conditioned_cholesky(m)?.inverse();
    inv.iter().all(|x| x.is_finite()).then_some(inv)
}

/// Solves `m x = b` for symmetric positive-definite `m`.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if m.nrows() == 0 {
        return Some(DVector::zeros(0));
    }
    let x = well_conditioned_cholesky(m)?.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pd_matrix_is_untouched() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let r = repair_pd(m.clone()).unwrap();
        assert!(!r.repaired);
        assert_eq!(r.matrix, m);
    }

    #[test]
    fn indefinite_matrix_is_floored() {
        // eigenvalues 1 +- 0.999 and a third unit pair that makes it indefinite
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.99, 0.99, 0.99, 1.0, -0.99, 0.99, -0.99, 1.0]);
        assert!(min_eigenvalue(&m) < 0.0);
        let r = repair_pd(m).unwrap();
        assert!(r.repaired);
        assert!(min_eigenvalue(&r.matrix) >= PD_FLOOR * (1.0 - 1e-6));
        assert_eq!(r.matrix, r.matrix.transpose());
    }

    #[test]
    fn working_cov_solves_agree() {
        let delta = DVector::from_vec(alloc::vec![2.0, 3.0]);
        let diag = WorkingCov::new(&delta, None).unwrap();
        let dense = WorkingCov::new(&delta, Some(&DMatrix::identity(2, 2))).unwrap();
        let b = DVector::from_vec(alloc::vec![1.0, -1.0]);
        assert_relative_eq!(diag.solve_vec(&b), dense.solve_vec(&b), epsilon = 1e-14);
        let bm = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(diag.solve(&bm), dense.solve(&bm), epsilon = 1e-14);
    }

    #[test]
    fn spd_inverse_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(alloc::vec![2.0, 4.0]));
        let inv = spd_inverse(&m).unwrap();
        assert_relative_eq!(inv[(1, 1)], 0.25);
        assert!(spd_inverse(&DMatrix::zeros(2, 2)).is_none());
        assert!(spd_inverse(&DMatrix::from_element(2, 2, 2.0)).is_none());
    }
}
