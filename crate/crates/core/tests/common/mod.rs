#![allow(dead_code)]

use geemvc_core::equations::{cluster_quantities, residual_transforms};
use geemvc_core::model::{evaluate_marginals, pair_count};
use geemvc_core::{Cluster, ClusterDataset, Link, LinkSpec, ThetaVector, VarianceFunction, WorkingStructure};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small random dataset with a parameter value inside every link's domain.
pub struct Instance {
    pub data: ClusterDataset,
    pub theta: ThetaVector,
    pub links: LinkSpec,
    pub vf: VarianceFunction,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=5usize);
    let (p, r, q) = (
        rng.random_range(1..=3usize),
        rng.random_range(1..=3usize),
        rng.random_range(1..=3usize),
    );
    let links = LinkSpec::new(
        if rng.random_bool(0.5) { Link::Identity } else { Link::Log },
        if rng.random_bool(0.7) { Link::Log } else { Link::Identity },
        if rng.random_bool(0.5) { Link::Identity } else { Link::FisherZ },
    )
    .unwrap();
    let vf = if rng.random_bool(0.5) {
        VarianceFunction::ConstantOne
    } else {
        VarianceFunction::TanhShift
    };

    let small = |rng: &mut ChaCha8Rng, k: usize, scale: f64| {
        DVector::from_fn(k, |_, _| uniform(rng, -scale, scale))
    };
    let mut beta = small(&mut rng, p, 0.5);
    let mut lambda = small(&mut rng, r, 0.3);
    let gamma = small(&mut rng, q, 0.1);
    // positive intercepts keep identity-link scales away from zero
    if links.scale == Link::Identity {
        lambda[0] = 1.0 + uniform(&mut rng, 0.0, 0.5);
    }
    if links.mean == Link::Log {
        beta[0] = uniform(&mut rng, 0.0, 0.5);
    }
    let theta = ThetaVector::new(beta, lambda, gamma);

    let clusters = (0..n as u64)
        .map(|id| {
            let m = rng.random_range(2..=4usize);
            let unit = |k: usize, rng: &mut ChaCha8Rng| {
                DMatrix::from_fn(m, k, |_, c| if c == 0 { 1.0 } else { uniform(rng, -0.5, 0.5) })
            };
            let x_mean = unit(p, &mut rng);
            let x_scale = unit(r, &mut rng);
            let x_corr = DMatrix::from_fn(pair_count(m), q, |_, _| uniform(&mut rng, -1.0, 1.0));
            let y = DVector::from_fn(m, |_, _| uniform(&mut rng, -2.0, 3.0));
            Cluster::new(id, y, x_mean, x_scale, x_corr).unwrap()
        })
        .collect();
    Instance {
        data: ClusterDataset::new(clusters).unwrap(),
        theta,
        links,
        vf,
    }
}

/// `max |a - b| / max(max |a|, floor)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    let diff = (a - b).amax();
    diff / a.amax().max(floor)
}

pub fn perturbed(theta: &ThetaVector, index: usize, h: f64) -> ThetaVector {
    let (p, r, q) = theta.dims();
    let mut v = theta.stacked();
    v[index] += h;
    ThetaVector::from_stacked(&v, p, r, q).unwrap()
}

pub const H: f64 = 1e-6;

pub fn transforms(inst: &Instance, c: usize, theta: &ThetaVector) -> (DVector<f64>, DVector<f64>) {
    let cluster = &inst.data.clusters()[c];
    let marg = evaluate_marginals(cluster, theta, &inst.links, &inst.vf).unwrap();
    let (_, s, z) = residual_transforms(cluster, &marg);
    (s, z)
}

/// Central differences of `s` and `z` in the parameters `offset..offset + k`.
pub fn numeric(inst: &Instance, c: usize, offset: usize, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (s0, z0) = transforms(inst, c, &inst.theta);
    let mut ds = DMatrix::zeros(s0.len(), k);
    let mut dz = DMatrix::zeros(z0.len(), k);
    for col in 0..k {
        let (sp, zp) = transforms(inst, c, &perturbed(&inst.theta, offset + col, H));
        let (sm, zm) = transforms(inst, c, &perturbed(&inst.theta, offset + col, -H));
        ds.set_column(col, &((sp - sm) / (2.0 * H)));
        dz.set_column(col, &((zp - zm) / (2.0 * H)));
    }
    (ds, dz)
}

/// `U` with derivative and working-covariance matrices frozen at `at`.
pub fn frozen_u(inst: &Instance, at: &ThetaVector, theta: &ThetaVector, ws: &WorkingStructure) -> DVector<f64> {
    let mut out = DVector::zeros(theta.len());
    for cluster in inst.data.clusters() {
        let fixed = cluster_quantities(cluster, at, &inst.links, &inst.vf, ws).unwrap();
        let moving = cluster_quantities(cluster, theta, &inst.links, &inst.vf, ws).unwrap();
        let mm = &moving.marginals;
        let g1 = fixed.d1.tr_mul(&fixed.v1.solve_vec(&moving.eps));
        let g2 = fixed.d2.tr_mul(&fixed.v2.solve_vec(&(&moving.s - &mm.phi)));
        let g3 = fixed.d3.tr_mul(&fixed.v3.solve_vec(&(&moving.z - &mm.rho)));
        let g = DVector::from_iterator(out.len(), g1.iter().chain(g2.iter()).chain(g3.iter()).copied());
        out += g;
    }
    out
}

pub fn numeric_slope(inst: &Instance, ws: &WorkingStructure) -> DMatrix<f64> {
    let k = inst.theta.len();
    let mut jac = DMatrix::zeros(k, k);
    for col in 0..k {
        let up = frozen_u(inst, &inst.theta, &perturbed(&inst.theta, col, H), ws);
        let down = frozen_u(inst, &inst.theta, &perturbed(&inst.theta, col, -H), ws);
        jac.set_column(col, &(-(up - down) / (2.0 * H)));
    }
    jac
}
