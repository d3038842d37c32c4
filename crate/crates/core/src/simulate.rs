//! Scenario data generators and the Monte-Carlo replicate engine.
//!
//! Every replicate draws from its own ChaCha stream: the generator is seeded with the
//! study seed and the stream is set to the replicate index, so results do not depend
//! on scheduling.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use crate::equations::correlation_matrix;
use crate::error::{Component, Error, Result};
use crate::fitter::{fit, FitOptions, FitResult};
use crate::math;
use crate::model::{
    pair_count, pair_indices, Cluster, ClusterDataset, Link, LinkSpec, ModelSpec, ThetaVector,
    VarianceFunction, WorkingStructure,
};
use crate::selection::{
    evaluate_candidates, CandidateSupport, ColumnMask, Needs, PenaltyScale, SearchSpace,
    SelectionOptions, Strategy,
};
use crate::variance::{block_diagnostics, sandwich, Histogram, RHO_HISTOGRAM_BINS};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Rejected correlation draws per cluster before giving up.
pub const MAX_RESAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    EstI,
    EstII,
    SelI,
    SelII,
    SelIII,
    /// Random compound-symmetric correlation covariates with correlations centred at zero.
    LpDesign,
    Custom,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::EstI,
        Scenario::EstII,
        Scenario::SelI,
        Scenario::SelII,
        Scenario::SelIII,
        Scenario::LpDesign,
        Scenario::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::EstI => "est-I",
            Scenario::EstII => "est-II",
            Scenario::SelI => "sel-I",
            Scenario::SelII => "sel-II",
            Scenario::SelIII => "sel-III",
            Scenario::LpDesign => "lp-design",
            Scenario::Custom => "custom",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Scenario::ALL
            .into_iter()
            .find(|s| s.name().eq_ignore_ascii_case(name))
    }

    pub fn is_selection(self) -> bool {
        matches!(self, Scenario::SelI | Scenario::SelII | Scenario::SelIII)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClusterSizeRule {
    Fixed(usize),
    /// `Binomial(trials, prob)`, redrawn until at least `min`.
    Binomial { trials: u64, prob: f64, min: usize },
}

impl ClusterSizeRule {
    fn draw<R: Rng>(&self, rng: &mut R) -> Result<usize> {
        match *self {
            ClusterSizeRule::Fixed(m) => Ok(m),
            ClusterSizeRule::Binomial { trials, prob, min } => {
                let dist = Binomial::new(trials, prob)
                    .map_err(|e| Error::Simulation(format!("cluster size distribution: {e}")))?;
                loop {
                    let m = dist.sample(rng) as usize;
                    if m >= min {
                        return Ok(m);
                    }
                }
            }
        }
    }

    fn max_size(&self) -> usize {
        match *self {
            ClusterSizeRule::Fixed(m) => m,
            ClusterSizeRule::Binomial { trials, .. } => trials as usize,
        }
    }
}

/// How the pair-level correlation covariates are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorrDesign {
    /// Column `l` is the indicator of lag `l + 1`.
    ToeplitzLags,
    /// `h ~ N3(0, CS(cs))`, rejected until `|h| <= g3(bound / (m - 1)) / |gamma|`.
    RandomCs { cs: f64, bound: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n_clusters: usize,
    pub replicates: usize,
    pub seed: u64,
    pub true_theta: ThetaVector,
    pub variance: VarianceFunction,
    pub links: LinkSpec,
    pub working: WorkingStructure,
    pub cluster_size: ClusterSizeRule,
    pub corr_design: CorrDesign,
    /// Compound-symmetry parameter of the unit covariates.
    pub covariate_cs: f64,
}

pub const DEFAULT_REPLICATES: usize = 200;
pub const DEFAULT_SEED: u64 = 42;

impl ScenarioConfig {
    pub fn preset(scenario: Scenario) -> Self {
        let est_theta = ThetaVector::from_slices(&[0.0, -1.0, 0.5], &[2.0, 1.0, -1.0], &[0.5, 0.25, 0.125]);
        let sel_mean_scale = ([1.0, -1.0, 0.0], [2.0, 1.0, 0.0]);
        let fisher = LinkSpec {
            mean: Link::Identity,
            scale: Link::Log,
            corr: Link::FisherZ,
        };
        let random_cs = CorrDesign::RandomCs { cs: 0.3, bound: 0.9 };
        let binomial = ClusterSizeRule::Binomial {
            trials: 10,
            prob: 0.7,
            min: 2,
        };
        let base = ScenarioConfig {
            scenario,
            n_clusters: 300,
            replicates: DEFAULT_REPLICATES,
            seed: DEFAULT_SEED,
            true_theta: est_theta,
            variance: VarianceFunction::ConstantOne,
            links: LinkSpec::default(),
            working: WorkingStructure::default(),
            cluster_size: ClusterSizeRule::Fixed(4),
            corr_design: CorrDesign::ToeplitzLags,
            covariate_cs: 0.5,
        };
        match scenario {
            Scenario::EstI | Scenario::Custom => base,
            Scenario::EstII => ScenarioConfig {
                variance: VarianceFunction::TanhShift,
                ..base
            },
            Scenario::SelI => ScenarioConfig {
                true_theta: ThetaVector::from_slices(&sel_mean_scale.0, &sel_mean_scale.1, &[0.2, -0.2, 0.0]),
                links: fisher,
                cluster_size: binomial,
                corr_design: random_cs,
                ..base
            },
            Scenario::SelII => ScenarioConfig {
                true_theta: ThetaVector::from_slices(&sel_mean_scale.0, &sel_mean_scale.1, &[0.5, 0.5, 0.0]),
                variance: VarianceFunction::TanhShift,
                ..base
            },
            Scenario::SelIII => ScenarioConfig {
                true_theta: ThetaVector::from_slices(&sel_mean_scale.0, &sel_mean_scale.1, &[0.5, 0.5, 0.0]),
                ..base
            },
            Scenario::LpDesign => ScenarioConfig {
                true_theta: ThetaVector::from_slices(&[0.0, -1.0, 0.5], &[2.0, 1.0, -1.0], &[0.1, -0.2, 0.15]),
                links: fisher,
                cluster_size: binomial,
                corr_design: random_cs,
                ..base
            },
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            links: self.links,
            variance: self.variance,
            working: self.working,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidSpec("replicates must be at least 1".into()));
        }
        if self.n_clusters == 0 {
            return Err(Error::InvalidSpec("n_clusters must be at least 1".into()));
        }
        if !(self.covariate_cs > -1.0 && self.covariate_cs < 1.0) {
            return Err(Error::InvalidSpec("covariate_cs must lie in (-1, 1)".into()));
        }
        let (p, r, q) = self.true_theta.dims();
        if p != 3 || r != 3 {
            return Err(Error::InvalidSpec(
                "generated mean and scale designs have three columns (intercept, x1, x2)".into(),
            ));
        }
        match self.corr_design {
            CorrDesign::ToeplitzLags => {
                let m = match self.cluster_size {
                    ClusterSizeRule::Fixed(m) => m,
                    ClusterSizeRule::Binomial { .. } => {
                        return Err(Error::InvalidSpec(
                            "lag-indicator correlation design needs a fixed cluster size".into(),
                        ))
                    }
                };
                if q + 1 != m {
                    return Err(Error::InvalidSpec(format!(
                        "cluster size {m} has {} lags but gamma has {q} entries",
                        m.saturating_sub(1)
                    )));
                }
            }
            CorrDesign::RandomCs { cs, bound } => {
                if q != 3 {
                    return Err(Error::InvalidSpec("random correlation design has three columns".into()));
                }
                if !(cs > -0.5 && cs < 1.0) || !(bound > 0.0 && bound < 1.0) {
                    return Err(Error::InvalidSpec("invalid random correlation design parameters".into()));
                }
                if self.true_theta.gamma.norm() == 0.0 {
                    return Err(Error::InvalidSpec("random correlation design needs a nonzero gamma".into()));
                }
            }
        }
        if let ClusterSizeRule::Fixed(m) = self.cluster_size {
            if m == 0 {
                return Err(Error::InvalidSpec("cluster size must be positive".into()));
            }
        }
        if self.cluster_size.max_size() == 0 {
            return Err(Error::InvalidSpec("cluster size must be positive".into()));
        }
        Ok(())
    }

    /// Column 0 is forced in every component except a random correlation design, which
    /// has no intercept.
    pub fn search_space(&self) -> Result<SearchSpace> {
        let (p, r, q) = self.true_theta.dims();
        let space = SearchSpace::new(p, r, q)?;
        match self.corr_design {
            CorrDesign::RandomCs { .. } => space.with_forced(Component::Correlation, &[]),
            CorrDesign::ToeplitzLags => Ok(space),
        }
    }

    /// Nonzero pattern of the truth, with forced columns added.
    pub fn true_support(&self) -> Result<CandidateSupport> {
        let space = self.search_space()?;
        let mask = |c: Component| -> Result<ColumnMask> {
            let v = self.true_theta.component(c);
            let mut idx: Vec<usize> = (0..v.len()).filter(|&i| v[i] != 0.0).collect();
            idx.extend(space.forced(c).indices());
            ColumnMask::from_indices(&idx, v.len())
        };
        Ok(CandidateSupport {
            mean: mask(Component::Mean)?,
            scale: mask(Component::Scale)?,
            corr: mask(Component::Correlation)?,
        })
    }

    fn rng(&self, replicate: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate as u64);
        rng
    }
}

fn cs_factor(dim: usize, cs: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { cs });
    Cholesky::new(m).map(|c| c.unpack()).unwrap_or_else(|| DMatrix::identity(dim, dim))
}

fn normal_vector<R: Rng>(rng: &mut R, factor: &DMatrix<f64>) -> DVector<f64> {
    let u = DVector::from_fn(factor.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    factor * u
}

/// Toeplitz lag-indicator rows for a cluster of size `m`.
pub fn lag_indicator_design(m: usize) -> DMatrix<f64> {
    let lags = m.saturating_sub(1);
    let mut h = DMatrix::zeros(pair_count(m), lags);
    for (l, (j, k)) in pair_indices(m).enumerate() {
        h[(l, k - j - 1)] = 1.0;
    }
    h
}

/// One generated cluster and the number of rejected correlation matrices behind it.
#[derive(Debug, Clone)]
pub struct GeneratedCluster {
    pub cluster: Cluster,
    pub resamples: usize,
}

fn random_cs_design<R: Rng>(
    rng: &mut R,
    cfg: &ScenarioConfig,
    m: usize,
    cs: f64,
    bound: f64,
) -> Result<DMatrix<f64>> {
    let factor = cs_factor(3, cs);
    let gamma_norm = cfg.true_theta.gamma.norm();
    let limit = if m > 1 {
        let b = bound / (m - 1) as f64;
        let f = |x: f64| cfg.links.corr.link(x).abs();
        f(-b).min(f(b)) / gamma_norm
    } else {
        f64::INFINITY
    };
    let pairs = pair_count(m);
    let mut h = DMatrix::zeros(pairs, 3);
    for l in 0..pairs {
        let row = loop {
            let v = normal_vector(rng, &factor);
            if v.norm() <= limit {
                break v;
            }
        };
        h.set_row(l, &row.transpose());
    }
    Ok(h)
}

/// Draws one cluster of the scenario.
pub fn generate_cluster<R: Rng>(rng: &mut R, cfg: &ScenarioConfig, id: u64) -> Result<GeneratedCluster> {
    let m = cfg.cluster_size.draw(rng)?;
    let x_factor = cs_factor(2, cfg.covariate_cs);
    let mut x = DMatrix::zeros(m, 3);
    for j in 0..m {
        let v = normal_vector(rng, &x_factor);
        x[(j, 0)] = 1.0;
        x[(j, 1)] = v[0];
        x[(j, 2)] = v[1];
    }
    let theta = &cfg.true_theta;
    let mu = (&x * &theta.beta).map(|e| cfg.links.mean.inverse(e));
    let phi = (&x * &theta.lambda).map(|e| cfg.links.scale.inverse(e));
    let sd = DVector::from_fn(m, |j, _| math::sqrt(phi[j] * cfg.variance.value(mu[j])));
    if sd.iter().any(|s| !s.is_finite() || !(*s > 0.0)) {
        return Err(Error::Simulation(format!("non-positive variance in generated cluster {id}")));
    }

    let mut resamples = 0;
    loop {
        let h = match cfg.corr_design {
            CorrDesign::ToeplitzLags => lag_indicator_design(m),
            CorrDesign::RandomCs { cs, bound } => random_cs_design(rng, cfg, m, cs, bound)?,
        };
        let rho = (&h * &theta.gamma).map(|e| cfg.links.corr.inverse(e));
        let r = correlation_matrix(m, &rho);
        let sigma = DMatrix::from_fn(m, m, |i, j| sd[i] * r[(i, j)] * sd[j]);
        let valid = rho.iter().all(|p| p.abs() < 1.0);
        if let Some(ch) = valid.then(|| Cholesky::new(sigma)).flatten() {
            let e = normal_vector(rng, &ch.unpack());
            let y = &mu + e;
            let cluster = Cluster::new(id, y, x.clone(), x, h)?;
            return Ok(GeneratedCluster { cluster, resamples });
        }
        resamples += 1;
        if resamples >= MAX_RESAMPLES || cfg.corr_design == CorrDesign::ToeplitzLags {
            return Err(Error::Simulation(format!(
                "correlation matrix of cluster {id} not positive definite after {resamples} draws"
            )));
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub data: ClusterDataset,
    pub resamples: usize,
}

/// The dataset of replicate `replicate`.
pub fn generate_dataset(cfg: &ScenarioConfig, replicate: usize) -> Result<GeneratedData> {
    cfg.validate()?;
    let mut rng = cfg.rng(replicate);
    let mut clusters = Vec::with_capacity(cfg.n_clusters);
    let mut resamples = 0;
    for id in 0..cfg.n_clusters as u64 {
        let g = generate_cluster(&mut rng, cfg, id)?;
        resamples += g.resamples;
        clusters.push(g.cluster);
    }
    Ok(GeneratedData {
        data: ClusterDataset::new(clusters)?,
        resamples,
    })
}

/// The comparator that regresses the variance directly: the same fit with `v` forced to one.
pub fn lp_constant_variance_fit(
    data: &ClusterDataset,
    links: &LinkSpec,
    ws: &WorkingStructure,
    opts: &FitOptions,
) -> Result<FitResult> {
    fit(data, links, &VarianceFunction::ConstantOne, ws, opts)
}

/// Per-parameter Monte-Carlo summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateTable {
    pub est_mean: DVector<f64>,
    pub ese: DVector<f64>,
    pub ase_yf: DVector<f64>,
    pub ase_lp: DVector<f64>,
    pub cp_yf: DVector<f64>,
    pub cp_lp: DVector<f64>,
}

/// Averages of the block diagnostics over replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticSummary {
    pub norm_b: f64,
    pub norm_d: f64,
    pub norm_e: f64,
    /// Monte-Carlo standard errors of the three norms.
    pub norm_b_se: f64,
    pub norm_d_se: f64,
    pub norm_e_se: f64,
    pub pair_mean_dz_dlambda: DVector<f64>,
    pub e_block_magnitude: f64,
    pub rho_mean: f64,
    pub rho_histogram: Histogram,
}

/// Correct-selection tallies for one strategy and penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionCount {
    pub strategy: Strategy,
    pub penalty: PenaltyScale,
    /// Replicates where the chosen mean, scale, correlation support matched the truth.
    pub correct: [usize; 3],
    pub joint_correct: usize,
    pub evaluated: usize,
}

impl SelectionCount {
    pub fn percent(&self, c: Component) -> f64 {
        percent(self.correct[c.index()], self.evaluated)
    }

    pub fn joint_percent(&self) -> f64 {
        percent(self.joint_correct, self.evaluated)
    }
}

fn percent(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSummary {
    pub scenario: Scenario,
    pub parameter_names: Vec<String>,
    pub truth: DVector<f64>,
    pub replicates: usize,
    pub converged: usize,
    pub convergence_rate: f64,
    pub data_resamples: usize,
    /// Estimation studies only.
    pub estimates: Option<EstimateTable>,
    /// The constant-variance comparator, when requested (LP bread).
    pub comparator: Option<EstimateTable>,
    pub comparator_converged: usize,
    pub diagnostics: Option<DiagnosticSummary>,
    /// Selection studies only.
    pub selection_counts: Vec<SelectionCount>,
}

pub fn parameter_names(theta: &ThetaVector) -> Vec<String> {
    let (p, r, q) = theta.dims();
    let mut out = Vec::with_capacity(p + r + q);
    out.extend((0..p).map(|i| format!("beta{i}")));
    out.extend((0..r).map(|i| format!("lambda{i}")));
    out.extend((0..q).map(|i| format!("gamma{i}")));
    out
}

#[derive(Debug, Clone, Default)]
pub struct EstimationOptions {
    pub fit: FitOptions,
    /// Also fit the constant-variance comparator on every replicate.
    pub comparator: bool,
    /// Also record slope-matrix block diagnostics.
    pub diagnostics: bool,
}

struct EstimateRecord {
    theta: DVector<f64>,
    se_yf: DVector<f64>,
    se_lp: DVector<f64>,
}

struct EstimationReplicate {
    main: Option<EstimateRecord>,
    comparator: Option<EstimateRecord>,
    diagnostics: Option<crate::variance::BlockDiagnostics>,
    resamples: usize,
}

fn fit_record(
    data: &ClusterDataset,
    links: &LinkSpec,
    vf: &VarianceFunction,
    ws: &WorkingStructure,
    opts: &FitOptions,
) -> Option<EstimateRecord> {
    let f = fit(data, links, vf, ws, opts).ok()?;
    if !f.converged {
        return None;
    }
    let sw = sandwich(data, &f.theta_hat, links, vf, ws).ok()?;
    Some(EstimateRecord {
        theta: f.theta_hat.stacked(),
        se_yf: sw.se_yf,
        se_lp: sw.se_lp,
    })
}

fn tabulate(records: &[&EstimateRecord], truth: &DVector<f64>) -> Option<EstimateTable> {
    let k = truth.len();
    let n = records.len();
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let mut est_mean = DVector::zeros(k);
    let mut ase_yf = DVector::zeros(k);
    let mut ase_lp = DVector::zeros(k);
    let mut hit_yf = DVector::zeros(k);
    let mut hit_lp = DVector::zeros(k);
    for r in records {
        est_mean += &r.theta;
        ase_yf += &r.se_yf;
        ase_lp += &r.se_lp;
        for i in 0..k {
            let err = (r.theta[i] - truth[i]).abs();
            if err <= Z_95 * r.se_yf[i] {
                hit_yf[i] += 1.0;
            }
            if err <= Z_95 * r.se_lp[i] {
                hit_lp[i] += 1.0;
            }
        }
    }
    est_mean /= nf;
    let mut ese = DVector::zeros(k);
    if n >= 2 {
        for r in records {
            let d = &r.theta - &est_mean;
            ese += d.component_mul(&d);
        }
        ese = (ese / (nf - 1.0)).map(math::sqrt);
    }
    Some(EstimateTable {
        est_mean,
        ese,
        ase_yf: ase_yf / nf,
        ase_lp: ase_lp / nf,
        cp_yf: hit_yf * (100.0 / nf),
        cp_lp: hit_lp * (100.0 / nf),
    })
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, math::sqrt(var / n))
}

fn summarize_diagnostics(diags: &[&crate::variance::BlockDiagnostics]) -> Option<DiagnosticSummary> {
    let first = diags.first()?;
    let n = diags.len() as f64;
    let col = |f: fn(&crate::variance::BlockDiagnostics) -> f64| -> Vec<f64> { diags.iter().map(|d| f(d)).collect() };
    let (norm_b, norm_b_se) = mean_and_se(&col(|d| d.norm_b));
    let (norm_d, norm_d_se) = mean_and_se(&col(|d| d.norm_d));
    let (norm_e, norm_e_se) = mean_and_se(&col(|d| d.norm_e));
    let mut pair_mean = DVector::zeros(first.pair_mean_dz_dlambda.len());
    let mut hist = Histogram::new(-1.0, 1.0, RHO_HISTOGRAM_BINS);
    let mut rho_mean = 0.0;
    for d in diags {
        pair_mean += &d.pair_mean_dz_dlambda;
        rho_mean += d.rho_mean;
        for (acc, c) in hist.counts.iter_mut().zip(&d.rho_histogram.counts) {
            *acc += c;
        }
    }
    pair_mean /= n;
    Some(DiagnosticSummary {
        norm_b,
        norm_d,
        norm_e,
        norm_b_se,
        norm_d_se,
        norm_e_se,
        e_block_magnitude: pair_mean.amax(),
        pair_mean_dz_dlambda: pair_mean,
        rho_mean: rho_mean / n,
        rho_histogram: hist,
    })
}

fn indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Generates, fits and summarizes `cfg.replicates` datasets.
pub fn run_estimation_study(cfg: &ScenarioConfig, opts: &EstimationOptions) -> Result<ReplicateSummary> {
    cfg.validate()?;
    let (links, vf, ws) = (cfg.links, cfg.variance, cfg.working);
    let outcomes = crate::par::map(&indices(cfg.replicates), |&rep| -> Result<EstimationReplicate> {
        let gen = generate_dataset(cfg, rep)?;
        let data = &gen.data;
        let main = fit_record(data, &links, &vf, &ws, &opts.fit);
        let diagnostics = match (&main, opts.diagnostics) {
            (Some(m), true) => {
                let (p, r, q) = data.dims();
                let theta = ThetaVector::from_stacked(&m.theta, p, r, q)?;
                block_diagnostics(data, &theta, &links, &vf, &ws).ok()
            }
            _ => None,
        };
        let comparator = if opts.comparator {
            lp_constant_variance_fit(data, &links, &ws, &opts.fit)
                .ok()
                .filter(|f| f.converged)
                .and_then(|f| {
                    let sw = sandwich(data, &f.theta_hat, &links, &VarianceFunction::ConstantOne, &ws).ok()?;
                    Some(EstimateRecord {
                        theta: f.theta_hat.stacked(),
                        // the comparator carries its own block-diagonal bread
                        se_yf: sw.se_lp.clone(),
                        se_lp: sw.se_lp,
                    })
                })
        } else {
            None
        };
        Ok(EstimationReplicate {
            main,
            comparator,
            diagnostics,
            resamples: gen.resamples,
        })
    });
    let outcomes: Vec<EstimationReplicate> = outcomes.into_iter().collect::<Result<_>>()?;

    let truth = cfg.true_theta.stacked();
    let mains: Vec<&EstimateRecord> = outcomes.iter().filter_map(|o| o.main.as_ref()).collect();
    let comps: Vec<&EstimateRecord> = outcomes.iter().filter_map(|o| o.comparator.as_ref()).collect();
    let diags: Vec<_> = outcomes.iter().filter_map(|o| o.diagnostics.as_ref()).collect();
    Ok(ReplicateSummary {
        scenario: cfg.scenario,
        parameter_names: parameter_names(&cfg.true_theta),
        truth: truth.clone(),
        replicates: cfg.replicates,
        converged: mains.len(),
        convergence_rate: mains.len() as f64 / cfg.replicates as f64,
        data_resamples: outcomes.iter().map(|o| o.resamples).sum(),
        estimates: tabulate(&mains, &truth),
        comparator: tabulate(&comps, &truth),
        comparator_converged: comps.len(),
        diagnostics: summarize_diagnostics(&diags),
        selection_counts: Vec::new(),
    })
}

struct SelectionReplicate {
    /// `None` when the full model failed; otherwise one chosen support per strategy x penalty.
    chosen: Option<Vec<CandidateSupport>>,
    resamples: usize,
}

/// Runs every requested strategy and penalty on each replicate and tallies correct choices.
pub fn run_selection_study(
    cfg: &ScenarioConfig,
    strategies: &[Strategy],
    penalties: &[PenaltyScale],
    fit_opts: &FitOptions,
) -> Result<ReplicateSummary> {
    cfg.validate()?;
    let truth_support = cfg.true_support()?;
    let cells: Vec<(Strategy, PenaltyScale)> = strategies
        .iter()
        .flat_map(|&s| penalties.iter().map(move |&p| (s, p)))
        .collect();
    let spec = cfg.model_spec();
    let sel_opts = SelectionOptions {
        fit: fit_opts.clone(),
        symmetrize: false,
        space: Some(cfg.search_space()?),
    };
    let needs = Needs::for_strategies(strategies);

    let outcomes: Vec<SelectionReplicate> = if cells.is_empty() {
        Vec::new()
    } else {
        crate::par::map(&indices(cfg.replicates), |&rep| -> Result<SelectionReplicate> {
            let gen = generate_dataset(cfg, rep)?;
            let chosen = evaluate_candidates(&gen.data, &spec, needs, &sel_opts)
                .ok()
                .and_then(|evals| {
                    cells
                        .iter()
                        .map(|&(s, p)| evals.choose(s, p).map(|c| c.chosen))
                        .collect::<Result<Vec<_>>>()
                        .ok()
                });
            Ok(SelectionReplicate {
                chosen,
                resamples: gen.resamples,
            })
        })
        .into_iter()
        .collect::<Result<_>>()?
    };

    let mut counts: Vec<SelectionCount> = cells
        .iter()
        .map(|&(strategy, penalty)| SelectionCount {
            strategy,
            penalty,
            correct: [0; 3],
            joint_correct: 0,
            evaluated: 0,
        })
        .collect();
    let mut converged = 0;
    for o in &outcomes {
        let Some(chosen) = &o.chosen else { continue };
        converged += 1;
        for (count, support) in counts.iter_mut().zip(chosen) {
            count.evaluated += 1;
            let mut all = true;
            for c in Component::ALL {
                let ok = support.mask(c) == truth_support.mask(c);
                count.correct[c.index()] += ok as usize;
                all &= ok;
            }
            count.joint_correct += all as usize;
        }
    }
    let attempted = if cells.is_empty() { 0 } else { cfg.replicates };
    Ok(ReplicateSummary {
        scenario: cfg.scenario,
        parameter_names: parameter_names(&cfg.true_theta),
        truth: cfg.true_theta.stacked(),
        replicates: attempted,
        converged,
        convergence_rate: if attempted == 0 { 0.0 } else { converged as f64 / attempted as f64 },
        data_resamples: outcomes.iter().map(|o| o.resamples).sum(),
        estimates: None,
        comparator: None,
        comparator_converged: 0,
        diagnostics: None,
        selection_counts: counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn est_one_truth_is_ar1() {
        let cfg = ScenarioConfig::preset(Scenario::EstI);
        let h = lag_indicator_design(4);
        let rho = (&h * &cfg.true_theta.gamma).map(|e| cfg.links.corr.inverse(e));
        let r = correlation_matrix(4, &rho);
        for j in 0..4 {
            for k in 0..4 {
                let lag = (j as i32 - k as i32).unsigned_abs() as i32;
                assert_relative_eq!(r[(j, k)], libm::pow(0.5, lag as f64), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn sel_two_truth_is_positive_definite() {
        let cfg = ScenarioConfig::preset(Scenario::SelII);
        let rho = lag_indicator_design(4) * &cfg.true_theta.gamma;
        let r = correlation_matrix(4, &rho);
        assert_eq!(r[(0, 3)], 0.0);
        assert_eq!(r[(0, 2)], 0.5);
        let min = r.symmetric_eigen().eigenvalues.min();
        assert!(min > 0.0, "{min}");
    }

    #[test]
    fn constant_scale_gives_unit_variance_times_e_squared() {
        let mut cfg = ScenarioConfig::preset(Scenario::EstI);
        cfg.true_theta = ThetaVector::from_slices(&[0.0, 0.0, 0.0], &[2.0, 0.0, 0.0], &[0.0, 0.0, 0.0]);
        let x = DVector::from_vec(alloc::vec![1.0, 0.0, 0.0]);
        let phi = cfg.links.scale.inverse(x.dot(&cfg.true_theta.lambda));
        assert_relative_eq!(phi * cfg.variance.value(0.3), libm::exp(2.0), epsilon = 1e-12);
    }

    #[test]
    fn lag_design_rows() {
        let h = lag_indicator_design(4);
        assert_eq!(h.nrows(), 6);
        let lags: Vec<usize> = (0..6).map(|l| (0..3).find(|&c| h[(l, c)] == 1.0).unwrap() + 1).collect();
        assert_eq!(lags, alloc::vec![1, 2, 3, 1, 2, 1]);
    }

    #[test]
    fn truth_supports() {
        let s = ScenarioConfig::preset(Scenario::SelI).true_support().unwrap();
        assert_eq!(s.mean.to_string(), "110");
        assert_eq!(s.corr.to_string(), "110");
        let s = ScenarioConfig::preset(Scenario::SelII).true_support().unwrap();
        assert_eq!((s.scale.to_string(), s.corr.to_string()), ("110".into(), "110".into()));
    }

    #[test]
    fn random_design_respects_norm_bound() {
        let cfg = ScenarioConfig::preset(Scenario::SelI);
        let mut rng = cfg.rng(0);
        for id in 0..50 {
            let g = generate_cluster(&mut rng, &cfg, id).unwrap();
            let m = g.cluster.size();
            assert!(m >= 2 && m <= 10);
            let limit = libm::atanh(0.9 / (m - 1) as f64) / cfg.true_theta.gamma.norm();
            for row in g.cluster.x_corr.row_iter() {
                assert!(row.norm() <= limit + 1e-12);
            }
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = ScenarioConfig::preset(Scenario::EstI);
        cfg.replicates = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::preset(Scenario::EstI);
        cfg.cluster_size = ClusterSizeRule::Fixed(5);
        assert!(cfg.validate().is_err());
        for s in Scenario::ALL {
            ScenarioConfig::preset(s).validate().unwrap();
        }
    }

    #[test]
    fn identical_replicates_have_zero_ese() {
        let rec = EstimateRecord {
            theta: DVector::from_vec(alloc::vec![1.0, 2.0]),
            se_yf: DVector::from_vec(alloc::vec![0.1, 0.1]),
            se_lp: DVector::from_vec(alloc::vec![0.2, 0.2]),
        };
        let truth = DVector::from_vec(alloc::vec![1.1, 3.0]);
        let t = tabulate(&[&rec, &rec], &truth).unwrap();
        assert_eq!(t.ese.as_slice(), &[0.0, 0.0]);
        assert_eq!(t.cp_yf.as_slice(), &[100.0, 0.0]);
        assert_eq!(t.cp_lp.as_slice(), &[100.0, 0.0]);
    }

    #[test]
    fn empty_method_set_runs_nothing() {
        let cfg = ScenarioConfig::preset(Scenario::SelII);
        let s = run_selection_study(&cfg, &[], &[PenaltyScale::LogN], &FitOptions::default()).unwrap();
        assert!(s.selection_counts.is_empty());
        assert_eq!(s.replicates, 0);
    }
}
