mod common;

use common::random_instance;
use geemvc_core::equations::{cluster_quantities, estimating_functions};
use geemvc_core::linalg::min_eigenvalue;
use geemvc_core::simulate::generate_dataset;
use geemvc_core::{
    fit, Cluster, ClusterDataset, FitOptions, Link, Scenario, ScenarioConfig, ThetaVector, VarianceFunction,
    WorkingStructure,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use std::ops::AddAssign;

fn inverse_link(link: Link, eta: f64) -> (f64, f64) {
    match link {
        Link::Identity => (eta, 1.0),
        Link::Log => (eta.exp(), eta.exp()),
        Link::FisherZ => (eta.tanh(), 1.0 - eta.tanh().powi(2)),
    }
}

fn variance(vf: &VarianceFunction, mu: f64) -> f64 {
    match vf {
        VarianceFunction::ConstantOne => 1.0,
        VarianceFunction::TanhShift => 1.0 + 0.35 * mu.tanh(),
        VarianceFunction::Custom(c) => (c.v)(mu),
    }
}

fn mapped(x: &DMatrix<f64>, coef: &DVector<f64>, link: Link) -> (DVector<f64>, DMatrix<f64>) {
    let eta = x * coef;
    let mut value = DVector::zeros(eta.len());
    let mut d = x.clone();
    for i in 0..eta.len() {
        let (v, dv) = inverse_link(link, eta[i]);
        value[i] = v;
        d.row_mut(i).scale_mut(dv);
    }
    (value, d)
}

/// Stacked `U` written out directly from the moment definitions, with dense inverses.
fn reference_u(data: &ClusterDataset, theta: &ThetaVector, links: &geemvc_core::LinkSpec, vf: &VarianceFunction) -> DVector<f64> {
    let (p, r, q) = theta.dims();
    let mut u = DVector::zeros(p + r + q);
    for c in data.clusters() {
        let m = c.size();
        let (mu, d1) = mapped(&c.x_mean, &theta.beta, links.mean);
        let (phi, d2) = mapped(&c.x_scale, &theta.lambda, links.scale);
        let (rho, d3) = mapped(&c.x_corr, &theta.gamma, links.corr);
        let v = mu.map(|x| variance(vf, x));
        let e = &c.y - &mu;
        let sd = DVector::from_fn(m, |j, _| (phi[j] * v[j]).sqrt());
        let mut corr = DMatrix::identity(m, m);
        let mut z = DVector::zeros(rho.len());
        let mut l = 0;
        for j in 0..m {
            for k in j + 1..m {
                corr[(j, k)] = rho[l];
                corr[(k, j)] = rho[l];
                z[l] = e[j] * e[k] / (sd[j] * sd[k]);
                l += 1;
            }
        }
        let v1 = DMatrix::from_fn(m, m, |j, k| sd[j] * corr[(j, k)] * sd[k]);
        let v2 = DMatrix::from_diagonal(&phi.map(|f| 2.0 * f * f));
        let v3 = DMatrix::from_diagonal(&rho.map(|x| 1.0 + x * x));
        let s = DVector::from_fn(m, |j, _| e[j] * e[j] / v[j]);
        let g1 = d1.transpose() * v1.try_inverse().unwrap() * &e;
        let g2 = d2.transpose() * v2.try_inverse().unwrap() * (s - &phi);
        let g3 = d3.transpose() * v3.try_inverse().unwrap() * (z - &rho);
        u.rows_mut(0, p).add_assign(&g1);
        u.rows_mut(p, r).add_assign(&g2);
        u.rows_mut(p + r, q).add_assign(&g3);
    }
    u
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn estimating_functions_match_reference(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let ws = WorkingStructure::default();
        let u = estimating_functions(&inst.data, &inst.theta, &inst.links, &inst.vf, &ws).unwrap().stacked();
        let reference = reference_u(&inst.data, &inst.theta, &inst.links, &inst.vf);
        let scale = reference.amax().max(1.0);
        prop_assert!((u - reference).amax() <= 1e-10 * scale);
    }

    #[test]
    fn working_covariances_are_symmetric_and_pd(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let ws = WorkingStructure::default();
        for c in inst.data.clusters() {
            let cq = cluster_quantities(c, &inst.theta, &inst.links, &inst.vf, &ws).unwrap();
            for v in [cq.v1.matrix(), cq.v2.matrix(), cq.v3.matrix()] {
                prop_assert!((&v - v.transpose()).amax() <= 1e-12 * v.amax());
                prop_assert!(min_eigenvalue(&v) > 0.0);
            }
        }
    }
}

fn scenario_data(scenario: Scenario, n: usize, replicate: usize) -> (ScenarioConfig, ClusterDataset) {
    let mut cfg = ScenarioConfig::preset(scenario);
    cfg.n_clusters = n;
    let data = generate_dataset(&cfg, replicate).unwrap().data;
    (cfg, data)
}

#[test]
fn converged_fits_solve_the_equations() {
    for (scenario, rep) in [(Scenario::EstI, 0), (Scenario::EstII, 1), (Scenario::SelI, 2), (Scenario::SelII, 3)] {
        let (cfg, data) = scenario_data(scenario, 150, rep);
        let spec = cfg.model_spec();
        let f = fit(&data, &spec.links, &spec.variance, &spec.working, &FitOptions::default()).unwrap();
        assert!(f.converged, "{}", scenario.name());
        let n = data.n_clusters() as f64;
        let worst = f.u_norms.iter().fold(0.0f64, |a, b| a.max(*b));
        assert!(worst / n <= 1e-6, "{}: {worst}", scenario.name());
        let reference = reference_u(&data, &f.theta_hat, &spec.links, &spec.variance);
        assert!(reference.amax() / n <= 1e-6, "{}", scenario.name());
    }
}

#[test]
fn cluster_order_does_not_change_the_fit() {
    let (cfg, data) = scenario_data(Scenario::EstII, 100, 4);
    let spec = cfg.model_spec();
    let reversed: Vec<Cluster> = data.clusters().iter().rev().cloned().collect();
    let shuffled = ClusterDataset::new(reversed).unwrap();
    let opts = FitOptions::default();
    let a = fit(&data, &spec.links, &spec.variance, &spec.working, &opts).unwrap();
    let b = fit(&shuffled, &spec.links, &spec.variance, &spec.working, &opts).unwrap();
    assert!((a.theta_hat.stacked() - b.theta_hat.stacked()).amax() <= 1e-10);
}

#[test]
fn constant_variance_matches_lp_path() {
    let (cfg, data) = scenario_data(Scenario::EstI, 120, 5);
    let spec = cfg.model_spec();
    let opts = FitOptions::default();
    let ours = fit(&data, &spec.links, &spec.variance, &spec.working, &opts).unwrap();
    let lp = geemvc_core::simulate::lp_constant_variance_fit(&data, &spec.links, &spec.working, &opts).unwrap();
    assert_eq!(ours.theta_hat, lp.theta_hat);
    // the LP estimate also zeroes the independently coded equations
    let reference = reference_u(&data, &lp.theta_hat, &spec.links, &VarianceFunction::ConstantOne);
    assert!(reference.amax() / 120.0 <= 1e-6);
}
