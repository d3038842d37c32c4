//! Residual transforms, working covariances and the three stacked estimating functions.
//!
//! For cluster `i` with residuals `eps = y - mu`:
//!
//! * `s_ij = eps_ij^2 / v_ij`
//! * `z_ijk = eps_ij eps_ik / sqrt(phi_ij v_ij phi_ik v_ik)`
//!
//! and the estimating functions are
//! `U1 = sum D1' V1^{-1} (y - mu)`, `U2 = sum D2' V2^{-1} (s - phi)`,
//! `U3 = sum D3' V3^{-1} (z - rho)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Component, Error, Result};
use crate::linalg::{repair_pd, WorkingCov};
use crate::math;
use crate::model::{
    evaluate_marginals, evaluate_marginals_with, pair_indices, Cluster, ClusterDataset, LinkSpec, Marginals, ThetaVector,
    V3Mode, VarianceFunction, WorkingCorrelation, WorkingStructure,
};

/// Everything the estimating equations need from one cluster.
#[derive(Debug, Clone)]
pub struct ClusterQuantities {
    pub marginals: Marginals,
    pub eps: DVector<f64>,
    pub s: DVector<f64>,
    pub z: DVector<f64>,
    /// `d mu / d beta'`, `m x p`.
    pub d1: DMatrix<f64>,
    /// `d phi / d lambda'`, `m x r`.
    pub d2: DMatrix<f64>,
    /// `d rho / d gamma'`, `pairs x q`.
    pub d3: DMatrix<f64>,
    pub v1: WorkingCov,
    pub v2: WorkingCov,
    pub v3: WorkingCov,
    /// Number of working correlation matrices that went through eigenvalue flooring.
    pub pd_repairs: usize,
}

impl ClusterQuantities {
    /// Per-cluster estimating-function contributions `(D1'V1^{-1}eps, D2'V2^{-1}(s-phi), D3'V3^{-1}(z-rho))`.
    pub fn contributions(&self) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let m = &self.marginals;
        let g1 = self.d1.tr_mul(&self.v1.solve_vec(&self.eps));
        let g2 = self.d2.tr_mul(&self.v2.solve_vec(&(&self.s - &m.phi)));
        let g3 = self.d3.tr_mul(&self.v3.solve_vec(&(&self.z - &m.rho)));
        (g1, g2, g3)
    }
}

/// `(eps, s, z)` for one cluster.
pub fn residual_transforms(
    cluster: &Cluster,
    marg: &Marginals,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let eps = &cluster.y - &marg.mu;
    let s = DVector::from_fn(eps.len(), |j, _| eps[j] * eps[j] / marg.v[j]);
    let sd = DVector::from_fn(eps.len(), |j, _| math::sqrt(marg.phi[j] * marg.v[j]));
    let m = eps.len();
    let z = DVector::from_iterator(
        cluster.n_pairs(),
        pair_indices(m).map(|(j, k)| eps[j] * eps[k] / (sd[j] * sd[k])),
    );
    (eps, s, z)
}

/// Builds the `m x m` correlation matrix whose stacked upper triangle is `rho`.
pub fn correlation_matrix(m: usize, rho: &DVector<f64>) -> DMatrix<f64> {
    let mut r = DMatrix::identity(m, m);
    for (idx, (j, k)) in pair_indices(m).enumerate() {
        r[(j, k)] = rho[idx];
        r[(k, j)] = rho[idx];
    }
    r
}

fn scaled_rows(x: &DMatrix<f64>, scale: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= scale[i];
    }
    out
}

fn working_cov(
    id: u64,
    delta: &DVector<f64>,
    corr: Option<DMatrix<f64>>,
    repairs: &mut usize,
) -> Result<WorkingCov> {
    let corr = match corr {
        None => None,
        Some(r) => {
            let rep = repair_pd(r).ok_or(Error::IrreparableCovariance { cluster: id })?;
            if rep.repaired {
                *repairs += 1;
            }
            Some(rep.matrix)
        }
    };
    WorkingCov::new(delta, corr.as_ref()).ok_or(Error::SingularCovariance { cluster: id })
}

fn fixed_corr(wc: WorkingCorrelation, dim: usize) -> Option<DMatrix<f64>> {
    if wc.is_independence() || dim <= 1 {
        None
    } else {
        Some(wc.matrix(dim))
    }
}

pub(crate) fn build_v1(cluster: &Cluster, marg: &Marginals, repairs: &mut usize) -> Result<WorkingCov> {
    let m = cluster.size();
    let delta = marg.phi.component_mul(&marg.v);
    let corr = if marg.rho.iter().all(|&r| r == 0.0) {
        None
    } else {
        Some(correlation_matrix(m, &marg.rho))
    };
    working_cov(cluster.id, &delta, corr, repairs)
}

pub(crate) fn build_v2(
    cluster: &Cluster,
    marg: &Marginals,
    ws: &WorkingStructure,
    repairs: &mut usize,
) -> Result<WorkingCov> {
    let delta = marg.phi.map(|f| 2.0 * f * f);
    working_cov(cluster.id, &delta, fixed_corr(ws.r2, cluster.size()), repairs)
}

pub(crate) fn build_v3(
    cluster: &Cluster,
    marg: &Marginals,
    ws: &WorkingStructure,
    repairs: &mut usize,
) -> Result<WorkingCov> {
    let delta = match ws.v3_mode {
        V3Mode::DeltaScaled => marg.rho.map(|r| 1.0 + r * r),
        V3Mode::PlainIdentity => DVector::from_element(marg.rho.len(), 1.0),
    };
    working_cov(cluster.id, &delta, fixed_corr(ws.r3, cluster.n_pairs()), repairs)
}

/// Residual transforms, derivative matrices and working covariances for one cluster.
pub fn cluster_quantities(
    cluster: &Cluster,
    theta: &ThetaVector,
    links: &LinkSpec,
    vf: &VarianceFunction,
    ws: &WorkingStructure,
) -> Result<ClusterQuantities> {
    let marginals = evaluate_marginals(cluster, theta, links, vf)?;
    let (eps, s, z) = residual_transforms(cluster, &marginals);
    let d1 = scaled_rows(&cluster.x_mean, &marginals.dmu);
    let d2 = scaled_rows(&cluster.x_scale, &marginals.dphi);
    let d3 = scaled_rows(&cluster.x_corr, &marginals.drho);
    let mut pd_repairs = 0;
    let v1 = build_v1(cluster, &marginals, &mut pd_repairs)?;
    let v2 = build_v2(cluster, &marginals, ws, &mut pd_repairs)?;
    let v3 = build_v3(cluster, &marginals, ws, &mut pd_repairs)?;
    Ok(ClusterQuantities {
        marginals,
        eps,
        s,
        z,
        d1,
        d2,
        d3,
        v1,
        v2,
        v3,
        pd_repairs,
    })
}

/// Per-cluster `(D'V^{-1}D, D'V^{-1} r)` for a single component, used by the
/// successive-update fitter. Only the working covariance of that component is built.
#[derive(Debug, Clone)]
pub(crate) struct ComponentTerms {
    pub info: DMatrix<f64>,
    pub score: DVector<f64>,
    pub pd_repairs: usize,
    pub clamped: usize,
}

pub(crate) fn component_terms(
    cluster: &Cluster,
    theta: &ThetaVector,
    links: &LinkSpec,
    vf: &VarianceFunction,
    ws: &WorkingStructure,
    component: Component,
) -> Result<ComponentTerms> {
    let marg = evaluate_marginals_with(cluster, theta, links, vf, component != Component::Scale)?;
    let mut pd_repairs = 0;
    let (d, v, resid) = match component {
        Component::Mean => {
            let d = scaled_rows(&cluster.x_mean, &marg.dmu);
            let v = build_v1(cluster, &marg, &mut pd_repairs)?;
            (d, v, &cluster.y - &marg.mu)
        }
        Component::Scale => {
            let d = scaled_rows(&cluster.x_scale, &marg.dphi);
            let v = build_v2(cluster, &marg, ws, &mut pd_repairs)?;
            let resid = DVector::from_fn(cluster.size(), |j, _| {
                let e = cluster.y[j] - marg.mu[j];
                e * e / marg.v[j] - marg.phi[j]
            });
            (d, v, resid)
        }
        Component::Correlation => {
            let d = scaled_rows(&cluster.x_corr, &marg.drho);
            let v = build_v3(cluster, &marg, ws, &mut pd_repairs)?;
            let (_, _, z) = residual_transforms(cluster, &marg);
            (d, v, z - &marg.rho)
        }
    };
    let vinv_d = v.solve(&d);
    Ok(ComponentTerms {
        info: d.tr_mul(&vinv_d),
        score: vinv_d.tr_mul(&resid),
        pd_repairs,
        clamped: marg.clamped,
    })
}

/// The three stacked estimating functions.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatingFunctions {
    pub u1: DVector<f64>,
    pub u2: DVector<f64>,
    pub u3: DVector<f64>,
}

impl EstimatingFunctions {
    pub fn stacked(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.u1.len() + self.u2.len() + self.u3.len());
        out.rows_mut(0, self.u1.len()).copy_from(&self.u1);
        out.rows_mut(self.u1.len(), self.u2.len()).copy_from(&self.u2);
        out.rows_mut(self.u1.len() + self.u2.len(), self.u3.len())
            .copy_from(&self.u3);
        out
    }

    /// Max-norm of each component.
    pub fn max_norms(&self) -> [f64; 3] {
        [&self.u1, &self.u2, &self.u3].map(|u| u.iter().fold(0.0f64, |a, b| a.max(b.abs())))
    }
}

/// `U1, U2, U3` summed over clusters in cluster-id order.
pub fn estimating_functions(
    data: &ClusterDataset,
    theta: &ThetaVector,
    links: &LinkSpec,
    vf: &VarianceFunction,
    ws: &WorkingStructure,
) -> Result<EstimatingFunctions> {
    theta.check_dataset(data)?;
    let (p, r, q) = data.dims();
    let mut u = EstimatingFunctions {
        u1: DVector::zeros(p),
        u2: DVector::zeros(r),
        u3: DVector::zeros(q),
    };
    for cluster in data.clusters() {
        let cq = cluster_quantities(cluster, theta, links, vf, ws)?;
        let (g1, g2, g3) = cq.contributions();
        u.u1 += g1;
        u.u2 += g2;
        u.u3 += g3;
    }
    Ok(u)
}

/// Analytic derivatives of the residual transforms with respect to `beta` and `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDerivatives {
    /// `d s / d beta'`, `m x p`.
    pub ds_dbeta: DMatrix<f64>,
    /// `d z / d beta'`, `pairs x p`.
    pub dz_dbeta: DMatrix<f64>,
    /// `d z / d lambda'`, `pairs x r`.
    pub dz_dlambda: DMatrix<f64>,
}

/// Derivatives of `s` and `z` for one cluster.
pub fn score_residual_derivatives(
    cluster: &Cluster,
    theta: &ThetaVector,
    links: &LinkSpec,
    vf: &VarianceFunction,
) -> Result<ResidualDerivatives> {
    let marg = evaluate_marginals(cluster, theta, links, vf)?;
    let eps = &cluster.y - &marg.mu;
    let d1 = scaled_rows(&cluster.x_mean, &marg.dmu);
    let d2 = scaled_rows(&cluster.x_scale, &marg.dphi);
    Ok(residual_derivatives_from(&marg, &eps, &d1, &d2))
}

pub(crate) fn residual_derivatives_from(
    marg: &Marginals,
    eps: &DVector<f64>,
    d1: &DMatrix<f64>,
    d2: &DMatrix<f64>,
) -> ResidualDerivatives {
    let m = eps.len();
    let (p, r) = (d1.ncols(), d2.ncols());
    let (v, dv, phi) = (&marg.v, &marg.dv, &marg.phi);

    let ds_dbeta = DMatrix::from_fn(m, p, |j, c| {
        let vj = v[j];
        (-2.0 * d1[(j, c)] * eps[j] * vj - eps[j] * eps[j] * dv[j] * d1[(j, c)]) / (vj * vj)
    });

    let pairs: alloc::vec::Vec<(usize, usize)> = pair_indices(m).collect();
    let np = pairs.len();
    let mut dz_dbeta = DMatrix::zeros(np, p);
    let mut dz_dlambda = DMatrix::zeros(np, r);
    for (row, &(j, k)) in pairs.iter().enumerate() {
        let inv_sd = 1.0 / math::sqrt(phi[j] * v[j] * phi[k] * v[k]);
        let ee = eps[j] * eps[k];
        for c in 0..p {
            let var_term = dv[j] * d1[(j, c)] / v[j] + dv[k] * d1[(k, c)] / v[k];
            dz_dbeta[(row, c)] =
                inv_sd * (-d1[(j, c)] * eps[k] - d1[(k, c)] * eps[j] - 0.5 * ee * var_term);
        }
        for c in 0..r {
            dz_dlambda[(row, c)] =
                -0.5 * ee * inv_sd * (d2[(j, c)] / phi[j] + d2[(k, c)] / phi[k]);
        }
    }
    ResidualDerivatives {
        ds_dbeta,
        dz_dbeta,
        dz_dlambda,
    }
}
