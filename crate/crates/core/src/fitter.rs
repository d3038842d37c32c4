//! Successive (Gauss-Seidel) updates of `beta`, `lambda` and `gamma`.
//!
//! Each sweep performs, in order,
//! `beta += (sum D1'V1^{-1}D1)^{-1} U1`, then `lambda += (sum D2'V2^{-1}D2)^{-1} U2`,
//! then `gamma += (sum D3'V3^{-1}D3)^{-1} U3`, every step evaluated at the most
//! recently updated parameters.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::equations::{component_terms, estimating_functions, residual_transforms};
use crate::error::{Component, Error, Result};
use crate::linalg::spd_solve;
use crate::model::{
    component_admissible, evaluate_marginals, ClusterDataset, LinkSpec, ThetaVector, VarianceFunction, WorkingStructure,
};

/// Number of step halvings tried before an update is declared divergent.
const MAX_HALVINGS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    /// Working-independence start.
    Auto,
    User(ThetaVector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence threshold on the max-norm of the stacked parameter update.
    pub tol: f64,
    pub init: InitMode,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 100,
            tol: 1e-8,
            init: InitMode::Auto,
        }
    }
}

impl FitOptions {
    pub fn warm(theta: ThetaVector) -> Self {
        FitOptions {
            init: InitMode::User(theta),
            ..FitOptions::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidSpec("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidSpec("tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: ThetaVector,
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm of the stacked update after each sweep.
    pub update_trace: Vec<f64>,
    /// Identity-link correlation clamp events over the whole fit.
    pub clamp_count: usize,
    /// Clamped correlations at the returned estimate; nonzero flags a boundary fit.
    pub clamped_at_estimate: usize,
    pub pd_repair_count: usize,
    /// Max-norms of `U1, U2, U3` at the returned estimate.
    pub u_norms: [f64; 3],
    pub n_clusters: usize,
}

/// Working-independence starting values.
///
/// `beta` solves the mean equation with `R1 = I` and unit scale, `lambda` matches
/// the average of `s` through the scale link, and `gamma` is zero.
pub fn initialize(
    data: &ClusterDataset,
    links: &LinkSpec,
    vf: &VarianceFunction,
) -> Result<ThetaVector> {
    let (p, r, q) = data.dims();
    let mut theta = ThetaVector::zeros(p, r, q);

    for _ in 0..100 {
        let mut info = DMatrix::zeros(p, p);
        let mut score = DVector::zeros(p);
        for c in data.clusters() {
            let marg = evaluate_marginals(c, &theta, links, vf)?;
            for j in 0..c.size() {
                let d = c.x_mean.row(j).transpose() * marg.dmu[j];
                let w = 1.0 / marg.v[j];
                info += &d * d.transpose() * w;
                score += &d * ((c.y[j] - marg.mu[j]) * w);
            }
        }
        let delta = spd_solve(&info, &score).ok_or(Error::RankDeficient {
            component: Component::Mean,
        })?;
        theta.beta += &delta;
        if delta.amax() <= 1e-12 * (1.0 + theta.beta.amax()) {
            break;
        }
    }

    let mut s_total = 0.0;
    for c in data.clusters() {
        let marg = evaluate_marginals(c, &theta, links, vf)?;
        let (_, s, _) = residual_transforms(c, &marg);
        s_total += s.sum();
    }
    let s_bar = s_total / data.n_units() as f64;
    let target = links.scale.link(s_bar);
    if !target.is_finite() {
        return Err(Error::DivergentPredictor {
            cluster: data.clusters()[0].id,
        });
    }
    let mut gram = DMatrix::zeros(r, r);
    let mut rhs = DVector::zeros(r);
    for c in data.clusters() {
        gram += c.x_scale.tr_mul(&c.x_scale);
        rhs += c.x_scale.row_sum().transpose() * target;
    }
    theta.lambda = spd_solve(&gram, &rhs).ok_or(Error::RankDeficient {
        component: Component::Scale,
    })?;
    Ok(theta)
}

struct StepOutcome {
    delta: DVector<f64>,
    pd_repairs: usize,
    clamped: usize,
}

fn newton_direction(
    data: &ClusterDataset,
    theta: &ThetaVector,
    links: &LinkSpec,
    vf: &VarianceFunction,
    ws: &WorkingStructure,
    component: Component,
) -> Result<StepOutcome> {
    let k = theta.component(component).len();
    let mut info = DMatrix::zeros(k, k);
    let mut score = DVector::zeros(k);
    let (mut pd_repairs, mut clamped) = (0, 0);
    for c in data.clusters() {
        let t = component_terms(c, theta, links, vf, ws, component)?;
        info += t.info;
        score += t.score;
        pd_repairs += t.pd_repairs;
        clamped += t.clamped;
    }
    let delta = spd_solve(&info, &score).ok_or(Error::RankDeficient { component })?;
    Ok(StepOutcome {
        delta,
        pd_repairs,
        clamped,
    })
}

/// Fits all three components.
pub fn fit(
    data: &ClusterDataset,
    links: &LinkSpec,
    vf: &VarianceFunction,
    ws: &WorkingStructure,
    opts: &FitOptions,
) -> Result<FitResult> {
    fit_components(data, links, vf, ws, opts, [true; 3])
}

/// Fits only the components flagged in `free` (indexed mean, scale, correlation);
/// the others stay at their starting values.
pub fn fit_components(
    data: &ClusterDataset,
    links: &LinkSpec,
    vf: &VarianceFunction,
    ws: &WorkingStructure,
    opts: &FitOptions,
    free: [bool; 3],
) -> Result<FitResult> {
    opts.validate()?;
    let mut theta = match &opts.init {
        InitMode::Auto => initialize(data, links, vf)?,
        InitMode::User(t) => t.clone(),
    };
    theta.check_dataset(data)?;

    let mut trace = Vec::new();
    let (mut clamp_count, mut pd_repair_count) = (0, 0);
    let mut step_converged = false;
    let mut iterations = 0;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        let mut max_update = 0.0f64;
        for component in Component::ALL {
            if !free[component.index()] || theta.component(component).is_empty() {
                continue;
            }
            let step = newton_direction(data, &theta, links, vf, ws, component)?;
            clamp_count += step.clamped;
            pd_repair_count += step.pd_repairs;
            if step.delta.iter().any(|d| !d.is_finite()) {
                return Err(Error::Diverged { iteration: iter });
            }
            let base = theta.component(component).clone();
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                *theta.component_mut(component) = &base + &step.delta * scale;
                if component_admissible(data, &theta, links, vf, component) {
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                return Err(Error::Diverged { iteration: iter });
            }
            max_update = max_update.max((&step.delta * scale).amax());
        }
        trace.push(max_update);
        if max_update <= opts.tol {
            step_converged = true;
            break;
        }
    }

    let u = estimating_functions(data, &theta, links, vf, ws)?;
    let u_norms = u.max_norms();
    let n = data.n_clusters() as f64;
    let u_small = Component::ALL
        .iter()
        .filter(|c| free[c.index()])
        .all(|c| u_norms[c.index()] <= 1e-6 * n);
    let clamped_at_estimate = data
        .clusters()
        .iter()
        .map(|c| evaluate_marginals(c, &theta, links, vf).map(|m| m.clamped))
        .sum::<Result<usize>>()?;

    Ok(FitResult {
        theta_hat: theta,
        converged: step_converged && u_small,
        iterations,
        update_trace: trace,
        clamp_count,
        clamped_at_estimate,
        pd_repair_count,
        u_norms,
        n_clusters: data.n_clusters(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Cluster;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn intercept_cluster(id: u64, y: &[f64]) -> Cluster {
        let m = y.len();
        Cluster::new(
            id,
            DVector::from_row_slice(y),
            DMatrix::from_element(m, 1, 1.0),
            DMatrix::from_element(m, 1, 1.0),
            DMatrix::from_element(m * (m - 1) / 2, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn initial_values_intercept_only() {
        let data = ClusterDataset::new(vec![
            intercept_cluster(1, &[1.0, 2.0]),
            intercept_cluster(2, &[3.0, 6.0]),
        ])
        .unwrap();
        let theta = initialize(&data, &LinkSpec::default(), &VarianceFunction::ConstantOne).unwrap();
        assert_relative_eq!(theta.beta[0], 3.0, epsilon = 1e-12);
        // s = (4, 1, 0, 9), mean 3.5
        assert_relative_eq!(theta.lambda[0], libm::log(3.5), epsilon = 1e-12);
        assert_eq!(theta.gamma.as_slice(), &[0.0]);
    }

    #[test]
    fn rank_deficient_mean_design() {
        let c = Cluster::new(
            0,
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let data = ClusterDataset::new(vec![c]).unwrap();
        let err = initialize(&data, &LinkSpec::default(), &VarianceFunction::ConstantOne).unwrap_err();
        assert_eq!(err, Error::RankDeficient { component: Component::Mean });
    }

    /// Residual patterns `(+a, +a)` and `(+a, -a)` around `mu = 2` with `a^2 = phi`
    /// and their mirror images zero all three estimating functions at `beta = 2`,
    /// `lambda = log a^2`, `gamma = 0`.
    fn exact_root_data() -> ClusterDataset {
        let a = 1.5;
        let mut clusters = Vec::new();
        for id in 0..4u64 {
            let y = match id % 4 {
                0 => [2.0 + a, 2.0 + a],
                1 => [2.0 + a, 2.0 - a],
                2 => [2.0 - a, 2.0 - a],
                _ => [2.0 - a, 2.0 + a],
            };
            clusters.push(intercept_cluster(id, &y));
        }
        ClusterDataset::new(clusters).unwrap()
    }

    #[test]
    fn exact_roots_converge_immediately() {
        let data = exact_root_data();
        let res = fit(
            &data,
            &LinkSpec::default(),
            &VarianceFunction::ConstantOne,
            &WorkingStructure::default(),
            &FitOptions::default(),
        )
        .unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 2);
        assert_relative_eq!(res.theta_hat.beta[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(res.theta_hat.lambda[0], libm::log(2.25), epsilon = 1e-12);
        assert_relative_eq!(res.theta_hat.gamma[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn options_are_validated() {
        let data = exact_root_data();
        let opts = FitOptions {
            max_iter: 0,
            ..FitOptions::default()
        };
        assert!(fit(
            &data,
            &LinkSpec::default(),
            &VarianceFunction::ConstantOne,
            &WorkingStructure::default(),
            &opts
        )
        .is_err());
    }

    #[test]
    fn max_iter_without_convergence_still_returns() {
        let data = ClusterDataset::new(vec![
            intercept_cluster(0, &[0.3, 1.1, -0.4]),
            intercept_cluster(1, &[2.0, 0.1, 0.9]),
            intercept_cluster(2, &[-1.0, 0.5, 0.2]),
        ])
        .unwrap();
        let opts = FitOptions {
            max_iter: 1,
            tol: 1e-14,
            init: InitMode::Auto,
        };
        let res = fit(
            &data,
            &LinkSpec::default(),
            &VarianceFunction::ConstantOne,
            &WorkingStructure::default(),
            &opts,
        )
        .unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.update_trace.len(), 1);
    }
}
