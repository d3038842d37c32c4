//! Slope matrix, meat matrix and the two sandwich covariance estimators.
//!
//! The slope matrix of the stacked equations is block lower triangular,
//!
//! ```text
//!   [  A   0   0 ]
//!   [ -B   C   0 ]
//!   [ -D  -E   F ]
//! ```
//!
//! with `A = sum D1'V1^{-1}D1`, `B = sum D2'V2^{-1} ds/dbeta'`, `C = sum D2'V2^{-1}D2`,
//! `D = sum D3'V3^{-1} dz/dbeta'`, `E = sum D3'V3^{-1} dz/dlambda'`, `F = sum D3'V3^{-1}D3`.
//! The full ("YF") estimator inverts this matrix; the block-diagonal ("LP") estimator
//! keeps only `A`, `C`, `F`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::equations::{cluster_quantities, residual_derivatives_from, ClusterQuantities};
use crate::error::{Component, Error, Result};
use crate::linalg::spd_inverse;
use crate::model::{ClusterDataset, LinkSpec, ThetaVector, VarianceFunction, WorkingStructure};

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeMatrix {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

impl SlopeMatrix {
    pub fn zeros(p: usize, r: usize, q: usize) -> Self {
        SlopeMatrix {
            a: DMatrix::zeros(p, p),
            b: DMatrix::zeros(r, p),
            c: DMatrix::zeros(r, r),
            d: DMatrix::zeros(q, p),
            e: DMatrix::zeros(q, r),
            f: DMatrix::zeros(q, q),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a.nrows(), self.c.nrows(), self.f.nrows())
    }

    /// Dense `(p+r+q)` square matrix `[[A,0,0],[-B,C,0],[-D,-E,F]]`.
    pub fn assembled(&self) -> DMatrix<f64> {
        let (p, r, q) = self.dims();
        let mut out = DMatrix::zeros(p + r + q, p + r + q);
        out.view_mut((0, 0), (p, p)).copy_from(&self.a);
        out.view_mut((p, 0), (r, p)).copy_from(&(-&self.b));
        out.view_mut((p, p), (r, r)).copy_from(&self.c);
        out.view_mut((p + r, 0), (q, p)).copy_from(&(-&self.d));
        out.view_mut((p + r, p), (q, r)).copy_from(&(-&self.e));
        out.view_mut((p + r, p + r), (q, q)).copy_from(&self.f);
        out
    }

    /// The same matrix with the off-diagonal blocks `B`, `D`, `E` zeroed.
    pub fn block_diagonal(&self) -> SlopeMatrix {
        let (p, r, q) = self.dims();
        SlopeMatrix {
            a: self.a.clone(),
            b: DMatrix::zeros(r, p),
            c: self.c.clone(),
            d: DMatrix::zeros(q, p),
            e: DMatrix::zeros(q, r),
            f: self.f.clone(),
        }
    }

    pub fn diagonal_block(&self, component: Component) -> &DMatrix<f64> {
        match component {
            Component::Mean => &self.a,
            Component::Scale => &self.c,
            Component::Correlation => &self.f,
        }
    }

    fn diagonal_inverses(&self) -> Result<[DMatrix<f64>; 3]> {
        let inv = |m: &DMatrix<f64>, component| {
            spd_inverse(m).ok_or(Error::NonIdentifiable { component })
        };
        Ok([
            inv(&self.a, Component::Mean)?,
            inv(&self.c, Component::Scale)?,
            inv(&self.f, Component::Correlation)?,
        ])
    }

    /// Inverse by block forward substitution:
    ///
    /// ```text
    ///   [ A^-1                          0            0    ]
    ///   [ C^-1 B A^-1                   C^-1         0    ]
    ///   [ F^-1 (D A^-1 + E C^-1 B A^-1)  F^-1 E C^-1  F^-1 ]
    /// ```
    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        let (p, r, q) = self.dims();
        let [ai, ci, fi] = self.diagonal_inverses()?;
        let cba = &ci * &self.b * &ai;
        let lower_left = &fi * (&self.d * &ai + &self.e * &cba);
        let lower_mid = &fi * &self.e * &ci;
        let mut out = DMatrix::zeros(p + r + q, p + r + q);
        out.view_mut((0, 0), (p, p)).copy_from(&ai);
        out.view_mut((p, 0), (r, p)).copy_from(&cba);
        out.view_mut((p, p), (r, r)).copy_from(&ci);
        out.view_mut((p + r, 0), (q, p)).copy_from(&lower_left);
        out.view_mut((p + r, p), (q, r)).copy_from(&lower_mid);
        out.view_mut((p + r, p + r), (q, q)).copy_from(&fi);
        Ok(out)
    }

    /// `blkdiag(A^-1, C^-1, F^-1)`.
    pub fn block_diagonal_inverse(&self) -> Result<DMatrix<f64>> {
        let (p, r, q) = self.dims();
        let [ai, ci, fi] = self.diagonal_inverses()?;
        let mut out = DMatrix::zeros(p + r + q, p + r + q);
        out.view_mut((0, 0), (p, p)).copy_from(&ai);
        out.view_mut((p, p), (r, r)).copy_from(&ci);
        out.view_mut((p + r, p + r), (q, q)).copy_from(&fi);
        Ok(out)
    }

    fn accumulate(&mut self, cq: &ClusterQuantities) {
        let deriv = residual_derivatives_from(&cq.marginals, &cq.eps, &cq.d1, &cq.d2);
        let w1 = cq.v1.solve(&cq.d1);
        let w2 = cq.v2.solve(&cq.d2);
        let w3 = cq.v3.solve(&cq.d3);
        self.a += cq.d1.tr_mul(&w1);
        self.b += w2.tr_mul(&deriv.ds_dbeta);
        self.c += cq.d2.tr_mul(&w2);
        self.d += w3.tr_mul(&deriv.dz_dbeta);
        self.e += w3.tr_mul(&deriv.dz_dlambda);
        self.f += cq.d3.tr_mul(&w3);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichResult {
    pub sigma1: SlopeMatrix,
    /// Meat: sum of outer products of the stacked per-cluster contributions.
    pub sigma2: DMatrix<f64>,
    /// Full block-triangular bread.
    pub v_yf: DMatrix<f64>,
    /// Block-diagonal bread.
    pub v_lp: DMatrix<f64>,
    pub se_yf: DVector<f64>,
    pub se_lp: DVector<f64>,
}

impl SandwichResult {
    /// Diagonal block of the covariance for one component.
    pub fn block(&self, which: SandwichFlavor, component: Component) -> DMatrix<f64> {
        let (p, r, q) = self.sigma1.dims();
        let (off, len) = match component {
            Component::Mean => (0, p),
            Component::Scale => (p, r),
            Component::Correlation => (p + r, q),
        };
        let v = match which {
            SandwichFlavor::Yf => &self.v_yf,
            SandwichFlavor::Lp => &self.v_lp,
        };
        v.view((off, off), (len, len)).into_owned()
    }
}

/// Which bread the covariance uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SandwichFlavor {
    /// Block lower-triangular bread.
    Yf,
    /// Block-diagonal bread.
    Lp,
}

impl SandwichFlavor {
    pub fn name(self) -> &'static str {
        match self {
            SandwichFlavor::Yf => "yf",
            SandwichFlavor::Lp => "lp",
        }
    }
}

fn stacked_contribution(cq: &ClusterQuantities) -> DVector<f64> {
    let (g1, g2, g3) = cq.contributions();
    let mut g = DVector::zeros(g1.len() + g2.len() + g3.len());
    g.rows_mut(0, g1.len()).copy_from(&g1);
    g.rows_mut(g1.len(), g2.len()).copy_from(&g2);
    g.rows_mut(g1.len() + g2.len(), g3.len()).copy_from(&g3);
    g
}

fn each_cluster(
    data: &ClusterDataset,
    theta: &ThetaVector,
    links: &LinkSpec,
    vf: &VarianceFunction,
    ws: &WorkingStructure,
    mut f: impl FnMut(&ClusterQuantities),
) -> Result<()> {
    theta.check_dataset(data)?;
    for c in data.clusters() {
        let cq = cluster_quantities(c, theta, links, vf, ws)?;
        f(&cq);
    }
    Ok(())
}

/// Slope matrix blocks at `theta`.
pub fn slope_matrix(
    data: &ClusterDataset,
    theta: &ThetaVector,
    links: &LinkSpec,
    vf: &VarianceFunction,
    ws: &WorkingStructure,
) -> Result<SlopeMatrix> {
    let (p, r, q) = data.dims();
    let mut slope = SlopeMatrix::zeros(p, r, q);
    each_cluster(data, theta, links, vf, ws, |cq| slope.accumulate(cq))?;
    Ok(slope)
}

/// `sum_i g_i g_i'` with `g_i` the stacked estimating-function contributions of cluster `i`.
pub fn meat_matrix(
    data: &ClusterDataset,
    theta: &ThetaVector,
    links: &LinkSpec,
    vf: &VarianceFunction,
    ws: &WorkingStructure,
) -> Result<DMatrix<f64>> {
    let k = theta.len();
    let mut meat = DMatrix::zeros(k, k);
    each_cluster(data, theta, links, vf, ws, |cq| {
        let g = stacked_contribution(cq);
        meat += &g * g.transpose();
    })?;
    Ok(meat)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

fn standard_errors(v: &DMatrix<f64>) -> DVector<f64> {
    v.diagonal().map(|x| crate::math::sqrt(x.max(0.0)))
}

/// Both sandwich estimators from a slope matrix and a meat matrix.
pub fn sandwich_from_parts(sigma1: SlopeMatrix, sigma2: DMatrix<f64>) -> Result<SandwichResult> {
    let full = sigma1.inverse()?;
    let diag = sigma1.block_diagonal_inverse()?;
    let mut v_yf = &full * &sigma2 * full.transpose();
    let mut v_lp = &diag * &sigma2 * diag.transpose();
    symmetrize(&mut v_yf);
    symmetrize(&mut v_lp);
    let se_yf = standard_errors(&v_yf);
    let se_lp = standard_errors(&v_lp);
    Ok(SandwichResult {
        sigma1,
        sigma2,
        v_yf,
        v_lp,
        se_yf,
        se_lp,
    })
}

/// Slope, meat, and both sandwich covariances from a single pass over the clusters.
pub fn sandwich(
    data: &ClusterDataset,
    theta: &ThetaVector,
    links: &LinkSpec,
    vf: &VarianceFunction,
    ws: &WorkingStructure,
) -> Result<SandwichResult> {
    let (p, r, q) = data.dims();
    let mut slope = SlopeMatrix::zeros(p, r, q);
    let mut meat = DMatrix::zeros(p + r + q, p + r + q);
    each_cluster(data, theta, links, vf, ws, |cq| {
        slope.accumulate(cq);
        let g = stacked_contribution(cq);
        meat += &g * g.transpose();
    })?;
    sandwich_from_parts(slope, meat)
}

/// Equal-width histogram over a closed range.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lower: f64,
    pub upper: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lower: f64, upper: f64, bins: usize) -> Self {
        Histogram {
            lower,
            upper,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, x: f64) {
        let bins = self.counts.len();
        let t = (x - self.lower) / (self.upper - self.lower);
        let idx = crate::math::floor(t * bins as f64).clamp(0.0, (bins - 1) as f64) as usize;
        self.counts[idx] += 1;
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        let bins = self.counts.len();
        (0..=bins)
            .map(|i| self.lower + (self.upper - self.lower) * i as f64 / bins as f64)
            .collect()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// How far the fitted model is from the regime where the block-diagonal bread is adequate.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagnostics {
    /// Frobenius norms of `B/n`, `D/n`, `E/n`.
    pub norm_b: f64,
    pub norm_d: f64,
    pub norm_e: f64,
    /// Average of `dz_ijk / dlambda'` over every pair in the data (length `r`).
    /// With a log scale link and an intercept column its intercept entry tracks `-mean(rho)`.
    pub pair_mean_dz_dlambda: DVector<f64>,
    /// Largest absolute entry of `pair_mean_dz_dlambda`.
    pub e_block_magnitude: f64,
    pub rho_mean: f64,
    /// Fitted correlations over [-1, 1], 20 bins.
    pub rho_histogram: Histogram,
}

pub const RHO_HISTOGRAM_BINS: usize = 20;

pub fn block_diagnostics(
    data: &ClusterDataset,
    theta: &ThetaVector,
    links: &LinkSpec,
    vf: &VarianceFunction,
    ws: &WorkingStructure,
) -> Result<BlockDiagnostics> {
    let (p, r, q) = data.dims();
    let mut slope = SlopeMatrix::zeros(p, r, q);
    let mut dz_sum = DVector::zeros(r);
    let mut hist = Histogram::new(-1.0, 1.0, RHO_HISTOGRAM_BINS);
    let mut rho_sum = 0.0;
    let mut pairs = 0usize;
    each_cluster(data, theta, links, vf, ws, |cq| {
        slope.accumulate(cq);
        let deriv = residual_derivatives_from(&cq.marginals, &cq.eps, &cq.d1, &cq.d2);
        for row in deriv.dz_dlambda.row_iter() {
            dz_sum += row.transpose();
        }
        for &rho in cq.marginals.rho.iter() {
            hist.add(rho);
            rho_sum += rho;
        }
        pairs += cq.marginals.rho.len();
    })?;
    let n = data.n_clusters() as f64;
    let denom = pairs.max(1) as f64;
    let pair_mean = dz_sum / denom;
    Ok(BlockDiagnostics {
        norm_b: slope.b.norm() / n,
        norm_d: slope.d.norm() / n,
        norm_e: slope.e.norm() / n,
        e_block_magnitude: pair_mean.amax(),
        pair_mean_dz_dlambda: pair_mean,
        rho_mean: rho_sum / denom,
        rho_histogram: hist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Cluster;
    use approx::assert_relative_eq;

    fn small_data() -> ClusterDataset {
        let clusters = (0..5u64)
            .map(|id| {
                let t = id as f64;
                Cluster::new(
                    id,
                    DVector::from_vec(vec![0.3 * t - 0.5, 1.0 - 0.2 * t, 0.7, -0.1 * t]),
                    DMatrix::from_fn(4, 2, |j, c| if c == 0 { 1.0 } else { (j as f64 - t) * 0.3 }),
                    DMatrix::from_fn(4, 2, |j, c| if c == 0 { 1.0 } else { 0.2 * j as f64 }),
                    DMatrix::from_fn(6, 1, |_, _| 1.0),
                )
                .unwrap()
            })
            .collect();
        ClusterDataset::new(clusters).unwrap()
    }

    #[test]
    fn single_unit_a_block_is_gram() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let c = Cluster::new(
            0,
            DVector::from_element(1, 0.5),
            x.clone(),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(0, 1),
        )
        .unwrap();
        let data = ClusterDataset::new(vec![c]).unwrap();
        let theta = ThetaVector::from_slices(&[0.0, 0.0], &[0.0], &[0.0]);
        let s = slope_matrix(
            &data,
            &theta,
            &LinkSpec::default(),
            &VarianceFunction::ConstantOne,
            &WorkingStructure::default(),
        )
        .unwrap();
        assert_eq!(s.a, x.transpose() * &x);
    }

    #[test]
    fn inverse_matches_dense() {
        let data = small_data();
        let theta = ThetaVector::from_slices(&[0.1, 0.2], &[-0.3, 0.1], &[0.2]);
        let s = slope_matrix(
            &data,
            &theta,
            &LinkSpec::default(),
            &VarianceFunction::TanhShift,
            &WorkingStructure::default(),
        )
        .unwrap();
        let dense = s.assembled().try_inverse().unwrap();
        assert_relative_eq!(s.inverse().unwrap(), dense, max_relative = 1e-10, epsilon = 1e-12);
    }

    #[test]
    fn zeroed_off_diagonal_blocks_make_flavors_agree() {
        let data = small_data();
        let theta = ThetaVector::from_slices(&[0.1, 0.2], &[-0.3, 0.1], &[0.2]);
        let (links, vf, ws) = (LinkSpec::default(), VarianceFunction::TanhShift, WorkingStructure::default());
        let sw = sandwich(&data, &theta, &links, &vf, &ws).unwrap();
        let forced = sandwich_from_parts(sw.sigma1.block_diagonal(), sw.sigma2.clone()).unwrap();
        assert_eq!(forced.v_yf, forced.v_lp);
        // the mean block never sees the off-diagonal blocks
        assert_relative_eq!(
            sw.block(SandwichFlavor::Yf, Component::Mean),
            sw.block(SandwichFlavor::Lp, Component::Mean),
            epsilon = 1e-12
        );
    }

    #[test]
    fn one_cluster_meat_is_rank_one() {
        let data = ClusterDataset::new(vec![small_data().clusters()[1].clone()]).unwrap();
        let theta = ThetaVector::from_slices(&[0.1, 0.2], &[-0.3, 0.1], &[0.2]);
        let meat = meat_matrix(
            &data,
            &theta,
            &LinkSpec::default(),
            &VarianceFunction::ConstantOne,
            &WorkingStructure::default(),
        )
        .unwrap();
        let sv = meat.clone().singular_values();
        let positive = sv.iter().filter(|&&s| s > 1e-10 * sv.max()).count();
        assert_eq!(positive, 1);
    }

    #[test]
    fn zero_residual_mean_block_vanishes() {
        let c = Cluster::new(
            0,
            DVector::from_element(3, 1.0),
            DMatrix::from_element(3, 1, 1.0),
            DMatrix::from_element(3, 1, 1.0),
            DMatrix::from_element(3, 1, 1.0),
        )
        .unwrap();
        let data = ClusterDataset::new(vec![c]).unwrap();
        let theta = ThetaVector::from_slices(&[1.0], &[0.0], &[0.1]);
        let meat = meat_matrix(
            &data,
            &theta,
            &LinkSpec::default(),
            &VarianceFunction::ConstantOne,
            &WorkingStructure::default(),
        )
        .unwrap();
        assert_eq!(meat[(0, 0)], 0.0);
    }

    #[test]
    fn histogram_binning() {
        let mut h = Histogram::new(-1.0, 1.0, 4);
        for x in [-1.0, -0.4, 0.0, 0.49, 1.0] {
            h.add(x);
        }
        assert_eq!(h.counts, vec![1, 1, 2, 1]);
        assert_eq!(h.bin_edges(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }
}
