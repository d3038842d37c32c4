//! The three subcommands and their reports.

use geemvc_core::selection::{self, CandidateSupport, SearchSpace, SelectionOptions, SelectionResult};
use geemvc_core::simulate::{
    generate_dataset, run_estimation_study, run_selection_study, CorrDesign, DiagnosticSummary, EstimateTable,
    EstimationOptions, ReplicateSummary,
};
use geemvc_core::variance::{block_diagnostics, BlockDiagnostics, Histogram};
use geemvc_core::{fit, sandwich, Component, Error as CoreError, FitResult, ModelSpec, SandwichResult, ThetaVector};
use nalgebra::DVector;
use serde_json::{json, Map, Value};

use crate::config::{FitConfig, InputConfig, SelectConfig, SimulateConfig};
use crate::data::{self, Design};
use crate::error::{CliError, CliResult};
use crate::formula::INTERCEPT;
use crate::output::{header, json_num, json_nums, sig6, Report};

fn histogram_json(h: &Histogram) -> Value {
    json!({
        "edges": json_nums(h.bin_edges()),
        "counts": h.counts,
    })
}

fn component_labels(design: &Design, c: Component) -> &[String] {
    match c {
        Component::Mean => &design.mean,
        Component::Scale => &design.scale,
        Component::Correlation => &design.corr,
    }
}

/// One coefficient row: component, term, estimate and both standard errors.
struct Coefficient {
    component: Component,
    term: String,
    estimate: f64,
    se_yf: f64,
    se_lp: f64,
}

fn coefficients(labels: [&[String]; 3], theta: &ThetaVector, sw: Option<&SandwichResult>) -> Vec<Coefficient> {
    let est = theta.stacked();
    let mut out = Vec::with_capacity(est.len());
    let mut i = 0;
    for c in Component::ALL {
        for term in labels[c.index()] {
            out.push(Coefficient {
                component: c,
                term: term.clone(),
                estimate: est[i],
                se_yf: sw.map_or(f64::NAN, |s| s.se_yf[i]),
                se_lp: sw.map_or(f64::NAN, |s| s.se_lp[i]),
            });
            i += 1;
        }
    }
    out
}

fn coefficients_json(rows: &[Coefficient]) -> Value {
    Value::Array(
        rows.iter()
            .map(|r| {
                json!({
                    "component": r.component.name(),
                    "term": r.term,
                    "estimate": json_num(r.estimate),
                    "se_yf": json_num(r.se_yf),
                    "se_lp": json_num(r.se_lp),
                })
            })
            .collect(),
    )
}

fn spec_json(spec: &ModelSpec) -> Value {
    json!({
        "mean_link": spec.links.mean.name(),
        "scale_link": spec.links.scale.name(),
        "corr_link": spec.links.corr.name(),
        "variance": spec.variance.name(),
    })
}

pub struct FitReport {
    pub spec: ModelSpec,
    pub n_clusters: usize,
    pub n_units: usize,
    pub fit: FitResult,
    coefficients: Vec<Coefficient>,
    pub diagnostics: Option<BlockDiagnostics>,
}

impl FitReport {
    pub fn estimates(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.estimate).collect()
    }
}

impl Report for FitReport {
    fn json(&self) -> Value {
        let diagnostics = self.diagnostics.as_ref().map_or(Value::Null, |d| {
            json!({
                "norm_b": json_num(d.norm_b),
                "norm_d": json_num(d.norm_d),
                "norm_e": json_num(d.norm_e),
                "pair_mean_dz_dlambda": json_nums(d.pair_mean_dz_dlambda.iter().copied()),
                "e_block_magnitude": json_num(d.e_block_magnitude),
                "rho_mean": json_num(d.rho_mean),
                "rho_histogram": histogram_json(&d.rho_histogram),
            })
        });
        json!({
            "command": "fit",
            "model": spec_json(&self.spec),
            "n_clusters": self.n_clusters,
            "n_units": self.n_units,
            "converged": self.fit.converged,
            "iterations": self.fit.iterations,
            "u_norms": json_nums(self.fit.u_norms),
            "pd_repairs": self.fit.pd_repair_count,
            "clamped_at_estimate": self.fit.clamped_at_estimate,
            "coefficients": coefficients_json(&self.coefficients),
            "diagnostics": diagnostics,
        })
    }

    fn csv(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut rows: Vec<Vec<String>> = self
            .coefficients
            .iter()
            .map(|r| vec![r.component.name().into(), r.term.clone(), sig6(r.estimate), sig6(r.se_yf), sig6(r.se_lp)])
            .collect();
        if let Some(d) = &self.diagnostics {
            for (name, v) in [
                ("norm_b", d.norm_b),
                ("norm_d", d.norm_d),
                ("norm_e", d.norm_e),
                ("e_block_magnitude", d.e_block_magnitude),
                ("rho_mean", d.rho_mean),
            ] {
                rows.push(vec!["diagnostic".into(), name.into(), sig6(v), String::new(), String::new()]);
            }
        }
        (header(&["component", "term", "estimate", "se_yf", "se_lp"]), rows)
    }
}

fn fit_design(design: &Design, input: &InputConfig) -> CliResult<FitReport> {
    let spec = &input.spec;
    let data = &design.data;
    let f = fit(data, &spec.links, &spec.variance, &spec.working, &input.fit)?;
    let sw = sandwich(data, &f.theta_hat, &spec.links, &spec.variance, &spec.working)?;
    let diagnostics = block_diagnostics(data, &f.theta_hat, &spec.links, &spec.variance, &spec.working).ok();
    let labels = [design.mean.as_slice(), design.scale.as_slice(), design.corr.as_slice()];
    Ok(FitReport {
        spec: *spec,
        n_clusters: data.n_clusters(),
        n_units: data.n_units(),
        coefficients: coefficients(labels, &f.theta_hat, Some(&sw)),
        fit: f,
        diagnostics,
    })
}

/// Loads the data and fits the full model.
pub fn run_fit(cfg: &FitConfig) -> CliResult<FitReport> {
    let design = data::load(&cfg.input)?;
    fit_design(&design, &cfg.input)
}

/// Errors for a fit that stopped before converging, after its report is written.
pub fn check_converged(f: &FitResult) -> CliResult<()> {
    if f.converged {
        Ok(())
    } else {
        Err(CliError::Numeric(CoreError::NotConverged { iterations: f.iterations }))
    }
}

pub struct SelectReport {
    design: Design,
    pub result: SelectionResult,
    n_clusters: usize,
    refit: Vec<Coefficient>,
}

impl SelectReport {
    /// Active column labels of the chosen support.
    pub fn active(&self, c: Component) -> Vec<String> {
        let labels = component_labels(&self.design, c);
        self.result.chosen.mask(c).indices().into_iter().map(|i| labels[i].clone()).collect()
    }
}

fn support_json(s: &CandidateSupport) -> Map<String, Value> {
    let mut m = Map::new();
    for c in Component::ALL {
        m.insert(c.name().into(), Value::String(s.mask(c).to_string()));
    }
    m
}

impl Report for SelectReport {
    fn json(&self) -> Value {
        let mut chosen = Map::new();
        for c in Component::ALL {
            chosen.insert(c.name().into(), json!(self.active(c)));
        }
        let criteria: Vec<Value> = self
            .result
            .values
            .iter()
            .map(|v| {
                let mut m = Map::new();
                m.insert("component".into(), v.component.map_or(Value::Null, |c| c.name().into()));
                m.extend(support_json(&v.support));
                m.insert("loss".into(), json_num(v.loss));
                m.insert("penalty".into(), json_num(v.penalty));
                m.insert("total".into(), json_num(v.total));
                Value::Object(m)
            })
            .collect();
        let infeasible: Vec<Value> = self
            .result
            .infeasible
            .iter()
            .map(|inf| {
                let mut m = Map::new();
                m.insert("component".into(), inf.component.map_or(Value::Null, |c| c.name().into()));
                m.extend(support_json(&inf.support));
                m.insert("reason".into(), inf.reason.to_string().into());
                Value::Object(m)
            })
            .collect();
        json!({
            "command": "select",
            "criterion": self.result.strategy.name(),
            "penalty": self.result.penalty.name(),
            "n_clusters": self.n_clusters,
            "chosen": chosen,
            "refit": {
                "converged": self.result.refit.converged,
                "iterations": self.result.refit.iterations,
                "coefficients": coefficients_json(&self.refit),
            },
            "full_fit": {
                "converged": self.result.full_fit.converged,
                "iterations": self.result.full_fit.iterations,
            },
            "criteria": criteria,
            "infeasible": infeasible,
        })
    }

    fn csv(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut rows = Vec::new();
        for c in Component::ALL {
            let mask = self.result.chosen.mask(c);
            let mut fitted = self.refit.iter().filter(|r| r.component == c);
            for (i, term) in component_labels(&self.design, c).iter().enumerate() {
                let active = mask.contains(i);
                let estimate = if active { fitted.next().map_or(f64::NAN, |r| r.estimate) } else { 0.0 };
                rows.push(vec![c.name().into(), term.clone(), (active as u8).to_string(), sig6(estimate)]);
            }
        }
        (header(&["component", "term", "active", "estimate"]), rows)
    }
}

fn search_space(design: &Design, force_corr: Option<&[String]>) -> CliResult<SearchSpace> {
    let (p, r, q) = design.data.dims();
    let mut space = SearchSpace::new(p, r, q)?;
    for c in Component::ALL {
        let labels = component_labels(design, c);
        let forced: Vec<usize> = match (c, force_corr) {
            (Component::Correlation, Some(names)) => names
                .iter()
                .map(|n| {
                    labels.iter().position(|l| l == n).ok_or_else(|| {
                        CliError::Config(format!("force-corr: `{n}` is not a correlation column ({})", labels.join(", ")))
                    })
                })
                .collect::<CliResult<_>>()?,
            _ => labels.iter().position(|l| l == INTERCEPT).into_iter().collect(),
        };
        space = space.with_forced(c, &forced)?;
    }
    Ok(space)
}

/// Loads the data, runs one selection strategy and refits on the winner.
pub fn run_select(cfg: &SelectConfig) -> CliResult<SelectReport> {
    let design = data::load(&cfg.input)?;
    let spec = &cfg.input.spec;
    let opts = SelectionOptions {
        fit: cfg.input.fit.clone(),
        symmetrize: cfg.symmetrize,
        space: Some(search_space(&design, cfg.force_corr.as_deref())?),
    };
    let result = selection::select(&design.data, spec, cfg.strategy, cfg.penalty, &opts)?;
    let reduced = result.chosen.select(&design.data)?;
    let sw = sandwich(&reduced, &result.refit.theta_hat, &spec.links, &spec.variance, &spec.working).ok();
    let active: [Vec<String>; 3] = Component::ALL.map(|c| {
        let labels = component_labels(&design, c);
        result.chosen.mask(c).indices().into_iter().map(|i| labels[i].clone()).collect()
    });
    let refit = coefficients([&active[0], &active[1], &active[2]], &result.refit.theta_hat, sw.as_ref());
    Ok(SelectReport {
        n_clusters: design.data.n_clusters(),
        design,
        result,
        refit,
    })
}

pub struct SimulateReport {
    pub summary: ReplicateSummary,
    seed: u64,
    n_clusters: usize,
}

fn table_json(names: &[String], truth: &DVector<f64>, t: &EstimateTable) -> Value {
    Value::Array(
        names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                json!({
                    "parameter": name,
                    "truth": json_num(truth[i]),
                    "est": json_num(t.est_mean[i]),
                    "ese": json_num(t.ese[i]),
                    "ase_yf": json_num(t.ase_yf[i]),
                    "cp_yf": json_num(t.cp_yf[i]),
                    "ase_lp": json_num(t.ase_lp[i]),
                    "cp_lp": json_num(t.cp_lp[i]),
                })
            })
            .collect(),
    )
}

fn diagnostics_json(d: &DiagnosticSummary) -> Value {
    json!({
        "norm_b": json_num(d.norm_b),
        "norm_d": json_num(d.norm_d),
        "norm_e": json_num(d.norm_e),
        "norm_b_se": json_num(d.norm_b_se),
        "norm_d_se": json_num(d.norm_d_se),
        "norm_e_se": json_num(d.norm_e_se),
        "pair_mean_dz_dlambda": json_nums(d.pair_mean_dz_dlambda.iter().copied()),
        "e_block_magnitude": json_num(d.e_block_magnitude),
        "rho_mean": json_num(d.rho_mean),
        "rho_histogram": histogram_json(&d.rho_histogram),
    })
}

impl Report for SimulateReport {
    fn json(&self) -> Value {
        let s = &self.summary;
        let selection: Vec<Value> = s
            .selection_counts
            .iter()
            .map(|c| {
                json!({
                    "criterion": c.strategy.name(),
                    "penalty": c.penalty.name(),
                    "mean": json_num(c.percent(Component::Mean)),
                    "scale": json_num(c.percent(Component::Scale)),
                    "corr": json_num(c.percent(Component::Correlation)),
                    "joint": json_num(c.joint_percent()),
                    "evaluated": c.evaluated,
                })
            })
            .collect();
        let table = |t: &Option<EstimateTable>| t.as_ref().map_or(Value::Null, |t| table_json(&s.parameter_names, &s.truth, t));
        json!({
            "command": "simulate",
            "scenario": s.scenario.name(),
            "seed": self.seed,
            "n_clusters": self.n_clusters,
            "replicates": s.replicates,
            "converged": s.converged,
            "convergence_rate": json_num(s.convergence_rate),
            "data_resamples": s.data_resamples,
            "estimates": table(&s.estimates),
            "comparator": table(&s.comparator),
            "comparator_converged": s.comparator_converged,
            "diagnostics": s.diagnostics.as_ref().map_or(Value::Null, diagnostics_json),
            "selection": selection,
        })
    }

    fn csv(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let s = &self.summary;
        if s.scenario.is_selection() {
            let rows = s
                .selection_counts
                .iter()
                .map(|c| {
                    vec![
                        c.strategy.name().into(),
                        c.penalty.name().into(),
                        sig6(c.percent(Component::Mean)),
                        sig6(c.percent(Component::Scale)),
                        sig6(c.percent(Component::Correlation)),
                        sig6(c.joint_percent()),
                        c.evaluated.to_string(),
                    ]
                })
                .collect();
            return (header(&["criterion", "penalty", "mean", "scale", "corr", "joint", "evaluated"]), rows);
        }
        let mut rows = Vec::new();
        for (label, table) in [("model", &s.estimates), ("comparator", &s.comparator)] {
            let Some(t) = table else { continue };
            for (i, name) in s.parameter_names.iter().enumerate() {
                rows.push(vec![
                    label.into(),
                    name.clone(),
                    sig6(s.truth[i]),
                    sig6(t.est_mean[i]),
                    sig6(t.ese[i]),
                    sig6(t.ase_yf[i]),
                    sig6(t.cp_yf[i]),
                    sig6(t.ase_lp[i]),
                    sig6(t.cp_lp[i]),
                ]);
            }
        }
        (header(&["fit", "parameter", "truth", "est", "ese", "ase_yf", "cp_yf", "ase_lp", "cp_lp"]), rows)
    }
}

/// Pair-column labels of a generated scenario.
pub fn corr_labels(cfg: &geemvc_core::ScenarioConfig) -> Vec<String> {
    let q = cfg.true_theta.gamma.len();
    match cfg.corr_design {
        CorrDesign::ToeplitzLags => (1..=q).map(|l| format!("lag{l}")).collect(),
        CorrDesign::RandomCs { .. } => (1..=q).map(|l| format!("h{l}")).collect(),
    }
}

/// Runs the scenario study, writing replicate 0's data first when asked.
pub fn run_simulate(cfg: &SimulateConfig) -> CliResult<SimulateReport> {
    let sc = &cfg.scenario;
    if let Some(dir) = &cfg.emit_data {
        let data = generate_dataset(sc, 0)?.data;
        data::write_dataset(dir, &data, &["x1".into(), "x2".into()], &corr_labels(sc))?;
    }
    let summary = if sc.scenario.is_selection() {
        run_selection_study(sc, &cfg.strategies, &cfg.penalties, &cfg.fit)?
    } else {
        let opts = EstimationOptions {
            fit: cfg.fit.clone(),
            comparator: true,
            diagnostics: true,
        };
        run_estimation_study(sc, &opts)?
    };
    Ok(SimulateReport {
        summary,
        seed: sc.seed,
        n_clusters: sc.n_clusters,
    })
}
