mod common;

use common::{numeric, numeric_slope, random_instance, rel_err};
use geemvc_core::equations::score_residual_derivatives;
use geemvc_core::simulate::generate_dataset;
use geemvc_core::variance::slope_matrix;
use geemvc_core::{Link, Scenario, ScenarioConfig, VarianceFunction, WorkingStructure};
use nalgebra::DVector;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn residual_derivatives_match_central_differences(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let (p, _, _) = inst.theta.dims();
        let r = inst.theta.lambda.len();
        for c in 0..inst.data.n_clusters() {
            let cluster = &inst.data.clusters()[c];
            let an = score_residual_derivatives(cluster, &inst.theta, &inst.links, &inst.vf).unwrap();
            let (ds_b, dz_b) = numeric(&inst, c, 0, p);
            let (_, dz_l) = numeric(&inst, c, p, r);
            prop_assert!(rel_err(&an.ds_dbeta, &ds_b, 1e-3) < 1e-5, "ds/dbeta seed {seed}");
            prop_assert!(rel_err(&an.dz_dbeta, &dz_b, 1e-3) < 1e-5, "dz/dbeta seed {seed}");
            prop_assert!(rel_err(&an.dz_dlambda, &dz_l, 1e-3) < 1e-5, "dz/dlambda seed {seed}");
        }
    }

    #[test]
    fn slope_matrix_is_the_frozen_weight_jacobian(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let ws = WorkingStructure::default();
        let analytic = slope_matrix(&inst.data, &inst.theta, &inst.links, &inst.vf, &ws)
            .unwrap()
            .assembled();
        let numeric = numeric_slope(&inst, &ws);
        let err = rel_err(&analytic, &numeric, 1e-8);
        prop_assert!(err < 1e-4, "relative error {err:e} for seed {seed}");
    }

    #[test]
    fn link_round_trip(eta in -4.0f64..4.0, small in -0.98f64..0.98) {
        for link in [Link::Log, Link::FisherZ] {
            let back = link.link(link.inverse(eta));
            prop_assert!((back - eta).abs() <= 1e-10, "{link:?} at {eta}");
        }
        prop_assert!((Link::Identity.link(Link::Identity.inverse(small)) - small).abs() <= 1e-10);
    }

    #[test]
    fn tanh_shift_derivative(mu in -6.0f64..6.0) {
        let vf = VarianceFunction::TanhShift;
        let t = mu.tanh();
        prop_assert!((vf.derivative(mu) - 0.35 * (1.0 - t * t)).abs() < 1e-15);
        let h = 1e-5;
        let fd = (vf.value(mu + h) - vf.value(mu - h)) / (2.0 * h);
        prop_assert!((fd - vf.derivative(mu)).abs() < 1e-7);
    }
}

#[test]
fn slope_matrix_matches_jacobian_at_estimate() {
    let mut cfg = ScenarioConfig::preset(Scenario::EstII);
    cfg.n_clusters = 60;
    let data = generate_dataset(&cfg, 0).unwrap().data;
    let spec = cfg.model_spec();
    let fit = geemvc_core::fit(&data, &spec.links, &spec.variance, &spec.working, &Default::default()).unwrap();
    assert!(fit.converged);
    let inst = common::Instance {
        data,
        theta: fit.theta_hat,
        links: spec.links,
        vf: spec.variance,
    };
    let analytic = slope_matrix(&inst.data, &inst.theta, &inst.links, &inst.vf, &spec.working)
        .unwrap()
        .assembled();
    let err = rel_err(&analytic, &numeric_slope(&inst, &spec.working), 1e-8);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn constant_variance_score_derivatives_have_zero_mean() {
    let mut cfg = ScenarioConfig::preset(Scenario::EstI);
    cfg.n_clusters = 2500;
    let data = generate_dataset(&cfg, 0).unwrap().data;
    let p = cfg.true_theta.beta.len();
    // one score sum per cluster
    let mut sums: Vec<DVector<f64>> = Vec::new();
    for c in data.clusters() {
        let d = score_residual_derivatives(c, &cfg.true_theta, &cfg.links, &cfg.variance).unwrap();
        let mut row = DVector::zeros(2 * p);
        for k in 0..p {
            row[k] = d.ds_dbeta.column(k).sum();
            row[p + k] = d.dz_dbeta.column(k).sum();
        }
        sums.push(row);
    }
    let n = sums.len() as f64;
    let mean = sums.iter().fold(DVector::zeros(2 * p), |a, b| a + b) / n;
    for k in 0..2 * p {
        let var = sums.iter().map(|s| (s[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!(mean[k].abs() <= 3.0 * se, "entry {k}: mean {} se {se}", mean[k]);
    }
}
