//! Clustered data, link and variance functions, and parameter vectors.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Component, Error, Result};
use crate::math;

/// Identity-link correlations are kept inside `[-RHO_CLAMP, RHO_CLAMP]`.
pub const RHO_CLAMP: f64 = 0.99;

/// Link functions for the three regression components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Link {
    Identity,
    Log,
    /// `atanh` forward map, `tanh` inverse; maps (-1, 1) onto the real line.
    FisherZ,
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
            Link::FisherZ => "fisher-z",
        }
    }

    pub fn from_name(name: &str) -> Option<Link> {
        match name {
            "identity" => Some(Link::Identity),
            "log" => Some(Link::Log),
            "fisher-z" | "fisherz" | "atanh" => Some(Link::FisherZ),
            _ => None,
        }
    }

    /// Forward map `g(x)`.
    pub fn link(self, x: f64) -> f64 {
        match self {
            Link::Identity => x,
            Link::Log => math::ln(x),
            Link::FisherZ => math::atanh(x),
        }
    }

    /// Inverse map `g^{-1}(eta)`.
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => math::exp(eta),
            Link::FisherZ => math::tanh(eta),
        }
    }

    /// `d g^{-1}(eta) / d eta`.
    pub fn inverse_deriv(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Log => math::exp(eta),
            Link::FisherZ => {
                let t = math::tanh(eta);
                1.0 - t * t
            }
        }
    }

    /// `(g^{-1}(eta), d g^{-1}(eta) / d eta)` with one transcendental evaluation.
    pub fn inverse_with_deriv(self, eta: f64) -> (f64, f64) {
        match self {
            Link::Identity => (eta, 1.0),
            Link::Log => {
                let e = math::exp(eta);
                (e, e)
            }
            Link::FisherZ => {
                let t = math::tanh(eta);
                (t, 1.0 - t * t)
            }
        }
    }

    /// `d^2 g^{-1}(eta) / d eta^2`.
    pub fn inverse_second_deriv(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 0.0,
            Link::Log => math::exp(eta),
            Link::FisherZ => {
                let t = math::tanh(eta);
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

/// Links for mean, scale and correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkSpec {
    pub mean: Link,
    pub scale: Link,
    pub corr: Link,
}

impl LinkSpec {
    pub fn new(mean: Link, scale: Link, corr: Link) -> Result<Self> {
        if mean == Link::FisherZ {
            return Err(Error::InvalidSpec("mean link must be identity or log".into()));
        }
        if scale == Link::FisherZ {
            return Err(Error::InvalidSpec("scale link must be log or identity".into()));
        }
        if corr == Link::Log {
            return Err(Error::InvalidSpec(
                "correlation link must be identity or fisher-z".into(),
            ));
        }
        Ok(LinkSpec { mean, scale, corr })
    }
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec {
            mean: Link::Identity,
            scale: Link::Log,
            corr: Link::Identity,
        }
    }
}

/// User-supplied variance function and its derivative.
#[derive(Debug, Clone, Copy)]
pub struct CustomVariance {
    pub v: fn(f64) -> f64,
    pub dv: fn(f64) -> f64,
}

impl PartialEq for CustomVariance {
    fn eq(&self, other: &Self) -> bool {
        core::ptr::fn_addr_eq(self.v, other.v) && core::ptr::fn_addr_eq(self.dv, other.dv)
    }
}

/// Variance function `v(mu)` of the mean response.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum VarianceFunction {
    #[default]
    ConstantOne,
    /// `v(mu) = 1 + 0.35 tanh(mu)`.
    TanhShift,
    Custom(CustomVariance),
}

impl VarianceFunction {
    pub fn name(&self) -> &'static str {
        match self {
            VarianceFunction::ConstantOne => "constant",
            VarianceFunction::TanhShift => "tanh-shift",
            VarianceFunction::Custom(_) => "custom",
        }
    }

    pub fn from_name(name: &str) -> Option<VarianceFunction> {
        match name {
            "constant" | "constant-one" | "one" => Some(VarianceFunction::ConstantOne),
            "tanh-shift" | "tanh" => Some(VarianceFunction::TanhShift),
            _ => None,
        }
    }

    pub fn value(&self, mu: f64) -> f64 {
        match self {
            VarianceFunction::ConstantOne => 1.0,
            VarianceFunction::TanhShift => 1.0 + 0.35 * math::tanh(mu),
            VarianceFunction::Custom(c) => (c.v)(mu),
        }
    }

    pub fn derivative(&self, mu: f64) -> f64 {
        match self {
            VarianceFunction::ConstantOne => 0.0,
            VarianceFunction::TanhShift => {
                let t = math::tanh(mu);
                0.35 * (1.0 - t * t)
            }
            VarianceFunction::Custom(c) => (c.dv)(mu),
        }
    }

    /// `(v(mu), v'(mu))`.
    pub fn value_with_derivative(&self, mu: f64) -> (f64, f64) {
        match self {
            VarianceFunction::ConstantOne => (1.0, 0.0),
            VarianceFunction::TanhShift => {
                let t = math::tanh(mu);
                (1.0 + 0.35 * t, 0.35 * (1.0 - t * t))
            }
            VarianceFunction::Custom(c) => ((c.v)(mu), (c.dv)(mu)),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, VarianceFunction::ConstantOne)
    }
}

/// Number of within-cluster pairs for a cluster of size `m`.
pub fn pair_count(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

/// Zero-based pairs `(j, k)`, `j < k`, in stacked upper-triangle order
/// `(0,1), (0,2), ..., (m-2, m-1)`.
pub fn pair_indices(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |j| (j + 1..m).map(move |k| (j, k)))
}

/// One independent cluster of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: u64,
    pub y: DVector<f64>,
    /// `m x p` mean covariates.
    pub x_mean: DMatrix<f64>,
    /// `m x r` scale covariates.
    pub x_scale: DMatrix<f64>,
    /// `m(m-1)/2 x q` pair-level correlation covariates in stacked upper-triangle order.
    pub x_corr: DMatrix<f64>,
}

impl Cluster {
    pub fn new(
        id: u64,
        y: DVector<f64>,
        x_mean: DMatrix<f64>,
        x_scale: DMatrix<f64>,
        x_corr: DMatrix<f64>,
    ) -> Result<Self> {
        let m = y.len();
        let fail = |reason: alloc::string::String| Err(Error::InvalidCluster { id, reason });
        if m == 0 {
            return fail("empty response vector".into());
        }
        if x_mean.nrows() != m || x_scale.nrows() != m {
            return fail(format!(
                "unit design rows ({}, {}) do not match cluster size {m}",
                x_mean.nrows(),
                x_scale.nrows()
            ));
        }
        if x_corr.nrows() != pair_count(m) {
            return fail(format!(
                "pair design has {} rows, expected {}",
                x_corr.nrows(),
                pair_count(m)
            ));
        }
        let finite = y.iter().all(|v| v.is_finite())
            && x_mean.iter().all(|v| v.is_finite())
            && x_scale.iter().all(|v| v.is_finite())
            && x_corr.iter().all(|v| v.is_finite());
        if !finite {
            return fail("non-finite value in response or design".into());
        }
        Ok(Cluster {
            id,
            y,
            x_mean,
            x_scale,
            x_corr,
        })
    }

    pub fn size(&self) -> usize {
        self.y.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.x_corr.nrows()
    }
}

/// Immutable collection of clusters sharing column dimensions, ordered by cluster id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDataset {
    clusters: Vec<Cluster>,
    p: usize,
    r: usize,
    q: usize,
}

impl ClusterDataset {
    /// Clusters are sorted by id; duplicate ids are rejected.
    pub fn new(mut clusters: Vec<Cluster>) -> Result<Self> {
        let first = clusters
            .first()
            .ok_or_else(|| Error::InvalidDataset("at least one cluster is required".into()))?;
        let (p, r, q) = (first.x_mean.ncols(), first.x_scale.ncols(), first.x_corr.ncols());
        for c in &clusters {
            if c.x_mean.ncols() != p || c.x_scale.ncols() != r || c.x_corr.ncols() != q {
                return Err(Error::InvalidDataset(format!(
                    "cluster {} has column dimensions ({}, {}, {}), expected ({p}, {r}, {q})",
                    c.id,
                    c.x_mean.ncols(),
                    c.x_scale.ncols(),
                    c.x_corr.ncols()
                )));
            }
        }
        if p == 0 || r == 0 {
            return Err(Error::InvalidDataset(
                "mean and scale designs need at least one column".into(),
            ));
        }
        clusters.sort_by_key(|c| c.id);
        if let Some(w) = clusters.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidDataset(format!("duplicate cluster id {}", w[0].id)));
        }
        Ok(ClusterDataset { clusters, p, r, q })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.p, self.r, self.q)
    }

    pub fn n_units(&self) -> usize {
        self.clusters.iter().map(Cluster::size).sum()
    }

    pub fn n_pairs(&self) -> usize {
        self.clusters.iter().map(Cluster::n_pairs).sum()
    }

    /// Keeps only the listed columns of each design matrix.
    pub fn select_columns(&self, mean: &[usize], scale: &[usize], corr: &[usize]) -> Result<Self> {
        let check = |cols: &[usize], dim: usize, what: &str| -> Result<()> {
            match cols.iter().find(|&&c| c >= dim) {
                Some(c) => Err(Error::DimensionMismatch(format!(
                    "{what} column {c} out of range ({dim} columns)"
                ))),
                None => Ok(()),
            }
        };
        check(mean, self.p, "mean")?;
        check(scale, self.r, "scale")?;
        check(corr, self.q, "correlation")?;
        let clusters = self
            .clusters
            .iter()
            .map(|c| Cluster {
                id: c.id,
                y: c.y.clone(),
                x_mean: c.x_mean.select_columns(mean),
                x_scale: c.x_scale.select_columns(scale),
                x_corr: c.x_corr.select_columns(corr),
            })
            .collect();
        Ok(ClusterDataset {
            clusters,
            p: mean.len(),
            r: scale.len(),
            q: corr.len(),
        })
    }
}

/// Stacked parameter vector `(beta, lambda, gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub beta: DVector<f64>,
    pub lambda: DVector<f64>,
    pub gamma: DVector<f64>,
}

impl ThetaVector {
    pub fn new(beta: DVector<f64>, lambda: DVector<f64>, gamma: DVector<f64>) -> Self {
        ThetaVector {
            beta,
            lambda,
            gamma,
        }
    }

    pub fn from_slices(beta: &[f64], lambda: &[f64], gamma: &[f64]) -> Self {
        ThetaVector::new(
            DVector::from_column_slice(beta),
            DVector::from_column_slice(lambda),
            DVector::from_column_slice(gamma),
        )
    }

    pub fn zeros(p: usize, r: usize, q: usize) -> Self {
        ThetaVector::new(DVector::zeros(p), DVector::zeros(r), DVector::zeros(q))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.beta.len(), self.lambda.len(), self.gamma.len())
    }

    pub fn len(&self) -> usize {
        self.beta.len() + self.lambda.len() + self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stacked(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        let (p, r, _) = self.dims();
        out.rows_mut(0, p).copy_from(&self.beta);
        out.rows_mut(p, r).copy_from(&self.lambda);
        out.rows_mut(p + r, self.gamma.len()).copy_from(&self.gamma);
        out
    }

    pub fn from_stacked(v: &DVector<f64>, p: usize, r: usize, q: usize) -> Result<Self> {
        if v.len() != p + r + q {
            return Err(Error::DimensionMismatch(format!(
                "stacked length {} != {p} + {r} + {q}",
                v.len()
            )));
        }
        Ok(ThetaVector::new(
            v.rows(0, p).into_owned(),
            v.rows(p, r).into_owned(),
            v.rows(p + r, q).into_owned(),
        ))
    }

    pub fn component(&self, c: Component) -> &DVector<f64> {
        match c {
            Component::Mean => &self.beta,
            Component::Scale => &self.lambda,
            Component::Correlation => &self.gamma,
        }
    }

    pub fn component_mut(&mut self, c: Component) -> &mut DVector<f64> {
        match c {
            Component::Mean => &mut self.beta,
            Component::Scale => &mut self.lambda,
            Component::Correlation => &mut self.gamma,
        }
    }

    /// Offset of a component inside the stacked vector.
    pub fn offset(&self, c: Component) -> usize {
        match c {
            Component::Mean => 0,
            Component::Scale => self.beta.len(),
            Component::Correlation => self.beta.len() + self.lambda.len(),
        }
    }

    pub(crate) fn check_dataset(&self, data: &ClusterDataset) -> Result<()> {
        if self.dims() != data.dims() {
            let (p, r, q) = self.dims();
            let (dp, dr, dq) = data.dims();
            return Err(Error::DimensionMismatch(format!(
                "theta dimensions ({p}, {r}, {q}) do not match design ({dp}, {dr}, {dq})"
            )));
        }
        Ok(())
    }
}

/// Fixed working correlation used inside `V2` or `V3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WorkingCorrelation {
    Independence,
    /// Compound symmetry with a fixed parameter.
    Exchangeable(f64),
    Ar1(f64),
}

impl WorkingCorrelation {
    pub fn is_independence(&self) -> bool {
        matches!(self, WorkingCorrelation::Independence)
    }

    pub fn matrix(&self, dim: usize) -> DMatrix<f64> {
        match *self {
            WorkingCorrelation::Independence => DMatrix::identity(dim, dim),
            WorkingCorrelation::Exchangeable(u) => {
                DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { u })
            }
            WorkingCorrelation::Ar1(u) => DMatrix::from_fn(dim, dim, |i, j| {
                math::powi(u, (i as i64 - j as i64).unsigned_abs() as i32)
            }),
        }
    }

    fn parameter(&self) -> Option<f64> {
        match *self {
            WorkingCorrelation::Independence => None,
            WorkingCorrelation::Exchangeable(u) | WorkingCorrelation::Ar1(u) => Some(u),
        }
    }
}

/// How `V3` is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum V3Mode {
    /// `V3 = D^{1/2} R3 D^{1/2}` with `D = diag(1 + rho^2)`.
    DeltaScaled,
    /// `V3 = R3`.
    PlainIdentity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkingStructure {
    pub r2: WorkingCorrelation,
    pub r3: WorkingCorrelation,
    pub v3_mode: V3Mode,
}

impl WorkingStructure {
    pub fn new(r2: WorkingCorrelation, r3: WorkingCorrelation, v3_mode: V3Mode) -> Result<Self> {
        for u in [r2.parameter(), r3.parameter()].into_iter().flatten() {
            if !(u > -1.0 && u < 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "working correlation parameter {u} outside (-1, 1)"
                )));
            }
        }
        Ok(WorkingStructure { r2, r3, v3_mode })
    }
}

impl Default for WorkingStructure {
    fn default() -> Self {
        WorkingStructure {
            r2: WorkingCorrelation::Independence,
            r3: WorkingCorrelation::Independence,
            v3_mode: V3Mode::DeltaScaled,
        }
    }
}

/// Links, variance function and working structure: everything but the data and designs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ModelSpec {
    pub links: LinkSpec,
    pub variance: VarianceFunction,
    pub working: WorkingStructure,
}

/// Marginal quantities of one cluster at a parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub mu: DVector<f64>,
    pub phi: DVector<f64>,
    pub rho: DVector<f64>,
    pub v: DVector<f64>,
    /// `dv/dmu` at each unit.
    pub dv: DVector<f64>,
    /// `d mu / d eta1`.
    pub dmu: DVector<f64>,
    /// `d phi / d eta2`.
    pub dphi: DVector<f64>,
    /// `d rho / d eta3`.
    pub drho: DVector<f64>,
    /// Number of identity-link correlations pulled back into `[-0.99, 0.99]`.
    pub clamped: usize,
}

fn split_map(x: &DVector<f64>, mut f: impl FnMut(f64) -> (f64, f64)) -> (DVector<f64>, DVector<f64>) {
    let mut a = DVector::zeros(x.len());
    let mut b = DVector::zeros(x.len());
    for (i, &xi) in x.iter().enumerate() {
        (a[i], b[i]) = f(xi);
    }
    (a, b)
}

fn all_rows(x: &DMatrix<f64>, coef: &DVector<f64>, ok: impl Fn(f64) -> bool) -> bool {
    (0..x.nrows()).all(|i| {
        let eta: f64 = (0..x.ncols()).map(|k| x[(i, k)] * coef[k]).sum();
        eta.is_finite() && ok(eta)
    })
}

/// Whether the linear predictor of one component maps to admissible values everywhere.
pub(crate) fn component_admissible(
    data: &ClusterDataset,
    theta: &ThetaVector,
    links: &LinkSpec,
    vf: &VarianceFunction,
    component: Component,
) -> bool {
    data.clusters().iter().all(|c| match component {
        Component::Mean => all_rows(&c.x_mean, &theta.beta, |eta| {
            let mu = links.mean.inverse(eta);
            let v = vf.value(mu);
            mu.is_finite() && v.is_finite() && v > 0.0
        }),
        Component::Scale => all_rows(&c.x_scale, &theta.lambda, |eta| {
            let phi = links.scale.inverse(eta);
            phi.is_finite() && phi > 0.0
        }),
        Component::Correlation => all_rows(&c.x_corr, &theta.gamma, |eta| links.corr.inverse(eta).is_finite()),
    })
}

/// Applies the three inverse links and the variance function to one cluster.
pub fn evaluate_marginals(
    cluster: &Cluster,
    theta: &ThetaVector,
    links: &LinkSpec,
    vf: &VarianceFunction,
) -> Result<Marginals> {
    evaluate_marginals_with(cluster, theta, links, vf, true)
}

/// As [`evaluate_marginals`]; with `with_corr == false` the pair-level fields are left empty.
pub(crate) fn evaluate_marginals_with(
    cluster: &Cluster,
    theta: &ThetaVector,
    links: &LinkSpec,
    vf: &VarianceFunction,
    with_corr: bool,
) -> Result<Marginals> {
    let (p, r, q) = theta.dims();
    if cluster.x_mean.ncols() != p || cluster.x_scale.ncols() != r || cluster.x_corr.ncols() != q {
        return Err(Error::DimensionMismatch(format!(
            "theta dimensions ({p}, {r}, {q}) do not match cluster {}",
            cluster.id
        )));
    }
    let id = cluster.id;
    let eta1 = &cluster.x_mean * &theta.beta;
    let eta2 = &cluster.x_scale * &theta.lambda;
    let eta3 = if with_corr {
        &cluster.x_corr * &theta.gamma
    } else {
        DVector::zeros(0)
    };
    if eta1.iter().chain(eta2.iter()).chain(eta3.iter()).any(|e| !e.is_finite()) {
        return Err(Error::DivergentPredictor { cluster: id });
    }

    let (mu, dmu) = split_map(&eta1, |e| links.mean.inverse_with_deriv(e));
    let (phi, dphi) = split_map(&eta2, |e| links.scale.inverse_with_deriv(e));
    if phi.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(Error::NonPositiveScale { cluster: id });
    }
    let (v, dv) = split_map(&mu, |m| vf.value_with_derivative(m));
    if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::NonPositiveVariance { cluster: id });
    }

    let mut clamped = 0;
    let (rho, drho) = split_map(&eta3, |e| {
        let (r, d) = links.corr.inverse_with_deriv(e);
        if links.corr == Link::Identity && r.abs() > RHO_CLAMP {
            clamped += 1;
            (r.clamp(-RHO_CLAMP, RHO_CLAMP), d)
        } else {
            (r, d)
        }
    });

    Ok(Marginals {
        mu,
        phi,
        rho,
        v,
        dv,
        dmu,
        dphi,
        drho,
        clamped,
    })
}
