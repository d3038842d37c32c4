//! Command-line and config-file options, merged and validated into a [`RunConfig`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use geemvc_core::selection::{PenaltyScale, Strategy};
use geemvc_core::simulate::ScenarioConfig;
use geemvc_core::{
    FitOptions, Link, LinkSpec, ModelSpec, Scenario, V3Mode, VarianceFunction, WorkingCorrelation,
    WorkingStructure,
};
use serde::Deserialize;

use crate::error::{CliError, CliResult};
use crate::formula::{self, Formula};

#[derive(Debug, Parser)]
#[command(name = "geemvc", version, about = "Joint mean-scale-correlation estimating equations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to unit-level data and report both sandwich standard errors.
    Fit(Settings),
    /// Run a scenario study.
    Simulate(Settings),
    /// Select mean, scale and correlation supports.
    Select(Settings),
}

/// Every option; keys of the TOML config file mirror the long flags.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// TOML config file; flags override its keys.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Unit-level CSV with cluster_id, unit_index, the response and covariates.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pair-level CSV keyed by cluster_id, j, k.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Built-in pair design: toeplitz-lags or intercept-only.
    #[arg(long)]
    pub pair_generator: Option<String>,
    /// Mean formula, e.g. `y ~ x1 + x2` (intercept added).
    #[arg(long, allow_hyphen_values = true)]
    pub mean: Option<String>,
    /// Scale formula, e.g. `~ z1` (intercept added).
    #[arg(long, allow_hyphen_values = true)]
    pub scale: Option<String>,
    /// Correlation formula over pair columns, e.g. `~ lag1 + lag2` (no intercept unless `1`).
    #[arg(long, allow_hyphen_values = true)]
    pub corr: Option<String>,
    #[arg(long)]
    pub mean_link: Option<String>,
    #[arg(long)]
    pub scale_link: Option<String>,
    #[arg(long)]
    pub corr_link: Option<String>,
    /// constant or tanh-shift.
    #[arg(long)]
    pub variance: Option<String>,
    /// Working correlation inside V2: independence, exchangeable:<a> or ar1:<a>.
    #[arg(long)]
    pub r2: Option<String>,
    /// Working correlation inside V3.
    #[arg(long)]
    pub r3: Option<String>,
    /// delta-scaled or identity.
    #[arg(long)]
    pub v3_mode: Option<String>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,

    /// lic-joint, lic-marginal, qic-yf or qic-lp.
    #[arg(long)]
    pub criterion: Option<String>,
    /// bic (log n) or aic (2).
    #[arg(long)]
    pub penalty: Option<String>,
    /// Use the symmetric part of the slope matrix in the LIC quadratic form.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub symmetrize: Option<bool>,
    /// Correlation columns always kept; defaults to the intercept when present.
    #[arg(long, value_delimiter = ',')]
    pub force_corr: Option<Vec<String>>,

    /// est-I, est-II, sel-I, sel-II, sel-III or lp-design.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_clusters: Option<usize>,
    /// Criteria run by selection studies (default: all).
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<String>>,
    /// Penalties run by selection studies (default: bic,aic).
    #[arg(long, value_delimiter = ',')]
    pub penalties: Option<Vec<String>>,
    /// Directory receiving units.csv and pairs.csv of replicate 0.
    #[arg(long)]
    pub emit_data: Option<PathBuf>,

    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// csv or json; inferred from the output extension, else json.
    #[arg(long)]
    pub format: Option<String>,
}

macro_rules! settings_fields {
    ($m:ident) => {
        $m!(
            data, pairs, pair_generator, mean, scale, corr, mean_link, scale_link, corr_link, variance, r2, r3,
            v3_mode, max_iter, tol, criterion, penalty, symmetrize, force_corr, scenario, replicates, seed,
            n_clusters, strategies, penalties, emit_data, out, format
        )
    };
}

impl Settings {
    /// Fields set in `over` replace those in `self`.
    pub fn merge(self, over: Settings) -> Settings {
        macro_rules! merged {
            ($($f:ident),*) => {
                Settings { config: over.config.or(self.config), $($f: over.$f.or(self.$f)),* }
            };
        }
        settings_fields!(merged)
    }

    /// Names of the options that are set, in kebab case.
    fn present(&self) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! collect {
            ($($f:ident),*) => {
                $(if self.$f.is_some() { out.push(stringify!($f).replace('_', "-")); })*
            };
        }
        settings_fields!(collect);
        out
    }

    pub fn from_toml(path: &Path) -> CliResult<Settings> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.to_string().trim_end())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub path: Option<PathBuf>,
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairSource {
    File(PathBuf),
    ToeplitzLags,
    InterceptOnly,
}

/// Data location, formulas and model options shared by `fit` and `select`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputConfig {
    pub data: PathBuf,
    pub pairs: PairSource,
    pub mean: Formula,
    pub scale: Formula,
    /// `None` selects a default from the pair source.
    pub corr: Option<Formula>,
    pub spec: ModelSpec,
    pub fit: FitOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub input: InputConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectConfig {
    pub input: InputConfig,
    pub strategy: Strategy,
    pub penalty: PenaltyScale,
    pub symmetrize: bool,
    pub force_corr: Option<Vec<String>>,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateConfig {
    pub scenario: ScenarioConfig,
    pub strategies: Vec<Strategy>,
    pub penalties: Vec<PenaltyScale>,
    pub fit: FitOptions,
    pub emit_data: Option<PathBuf>,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunConfig {
    Fit(FitConfig),
    Simulate(SimulateConfig),
    Select(SelectConfig),
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn field<T>(key: &str, value: &str, parsed: Option<T>, expected: &str) -> CliResult<T> {
    parsed.ok_or_else(|| config_err(format!("{key}: unknown value `{value}` (expected {expected})")))
}

fn parse_link(key: &str, value: Option<&String>, default: Link) -> CliResult<Link> {
    match value {
        None => Ok(default),
        Some(v) => field(key, v, Link::from_name(v), "identity, log or fisher-z"),
    }
}

fn parse_working(key: &str, value: Option<&String>) -> CliResult<WorkingCorrelation> {
    let Some(v) = value else {
        return Ok(WorkingCorrelation::Independence);
    };
    let bad = || config_err(format!("{key}: unknown value `{v}` (expected independence, exchangeable:<a> or ar1:<a>)"));
    if v == "independence" {
        return Ok(WorkingCorrelation::Independence);
    }
    let (kind, param) = v.split_once(':').ok_or_else(bad)?;
    let a: f64 = param.trim().parse().map_err(|_| bad())?;
    match kind {
        "exchangeable" => Ok(WorkingCorrelation::Exchangeable(a)),
        "ar1" => Ok(WorkingCorrelation::Ar1(a)),
        _ => Err(bad()),
    }
}

fn parse_formula(key: &str, text: &str, default_intercept: bool) -> CliResult<Formula> {
    formula::parse(text, default_intercept).map_err(|e| config_err(format!("{key}: {e}")))
}

fn fit_options(s: &Settings) -> CliResult<FitOptions> {
    let mut opts = FitOptions::default();
    if let Some(m) = s.max_iter {
        if m == 0 {
            return Err(config_err("max-iter: must be at least 1"));
        }
        opts.max_iter = m;
    }
    if let Some(t) = s.tol {
        if !(t > 0.0) {
            return Err(config_err("tol: must be positive"));
        }
        opts.tol = t;
    }
    Ok(opts)
}

fn output(s: &Settings) -> CliResult<OutputConfig> {
    let format = match s.format.as_deref() {
        Some("csv") => Format::Csv,
        Some("json") => Format::Json,
        Some(other) => return Err(config_err(format!("format: unknown value `{other}` (expected csv or json)"))),
        None => match s.out.as_ref().and_then(|p| p.extension()).and_then(|e| e.to_str()) {
            Some("csv") => Format::Csv,
            _ => Format::Json,
        },
    };
    Ok(OutputConfig {
        path: s.out.clone(),
        format,
    })
}

fn input(s: &Settings) -> CliResult<InputConfig> {
    let data = s.data.clone().ok_or_else(|| config_err("data path required (--data)"))?;
    let pairs = match (&s.pairs, s.pair_generator.as_deref()) {
        (Some(_), Some(_)) => return Err(config_err("conflicting options: pairs and pair-generator")),
        (Some(p), None) => PairSource::File(p.clone()),
        (None, Some("toeplitz-lags")) => PairSource::ToeplitzLags,
        (None, Some("intercept-only") | None) => PairSource::InterceptOnly,
        (None, Some(other)) => {
            return Err(config_err(format!(
                "pair-generator: unknown value `{other}` (expected toeplitz-lags or intercept-only)"
            )))
        }
    };
    let mean = parse_formula("mean", s.mean.as_deref().ok_or_else(|| config_err("mean formula required (--mean)"))?, true)?;
    let scale = parse_formula("scale", s.scale.as_deref().unwrap_or("~ 1"), true)?;
    let corr = s.corr.as_deref().map(|t| parse_formula("corr", t, false)).transpose()?;
    for (key, f) in [("scale", Some(&scale)), ("corr", corr.as_ref())] {
        if let Some(r) = f.and_then(|f| f.response.as_ref()) {
            return Err(config_err(format!("{key}: unexpected response `{r}` on the left of `~`")));
        }
    }
    let defaults = LinkSpec::default();
    let links = LinkSpec::new(
        parse_link("mean-link", s.mean_link.as_ref(), defaults.mean)?,
        parse_link("scale-link", s.scale_link.as_ref(), defaults.scale)?,
        parse_link("corr-link", s.corr_link.as_ref(), defaults.corr)?,
    )?;
    let variance = match s.variance.as_deref() {
        None => VarianceFunction::ConstantOne,
        Some(v) => field("variance", v, VarianceFunction::from_name(v), "constant or tanh-shift")?,
    };
    let v3_mode = match s.v3_mode.as_deref() {
        None | Some("delta-scaled") => V3Mode::DeltaScaled,
        Some("identity") => V3Mode::PlainIdentity,
        Some(other) => return Err(config_err(format!("v3-mode: unknown value `{other}` (expected delta-scaled or identity)"))),
    };
    let working = WorkingStructure::new(
        parse_working("r2", s.r2.as_ref())?,
        parse_working("r3", s.r3.as_ref())?,
        v3_mode,
    )?;
    Ok(InputConfig {
        data,
        pairs,
        mean,
        scale,
        corr,
        spec: ModelSpec {
            links,
            variance,
            working,
        },
        fit: fit_options(s)?,
    })
}

fn reject_unused(command: &str, s: &Settings, allowed: &[&str]) -> CliResult<()> {
    match s.present().into_iter().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(config_err(format!("option `{k}` does not apply to `{command}`"))),
        None => Ok(()),
    }
}

const MODEL_KEYS: [&str; 17] = [
    "data", "pairs", "pair-generator", "mean", "scale", "corr", "mean-link", "scale-link", "corr-link", "variance",
    "r2", "r3", "v3-mode", "max-iter", "tol", "out", "format",
];

fn strategy(value: &str) -> CliResult<Strategy> {
    field("criterion", value, Strategy::from_name(value), "lic-joint, lic-marginal, qic-yf or qic-lp")
}

fn penalty(value: &str) -> CliResult<PenaltyScale> {
    field("penalty", value, PenaltyScale::from_name(value), "bic or aic")
}

/// Merges the optional config file under the flags and validates the result.
pub fn parse_config(command: Command) -> CliResult<RunConfig> {
    let (name, flags) = match &command {
        Command::Fit(s) => ("fit", s),
        Command::Simulate(s) => ("simulate", s),
        Command::Select(s) => ("select", s),
    };
    let settings = match &flags.config {
        Some(path) => Settings::from_toml(path)?.merge(flags.clone()),
        None => flags.clone(),
    };
    resolve(name, &settings)
}

/// Validates merged settings for one command.
pub fn resolve(command: &str, s: &Settings) -> CliResult<RunConfig> {
    match command {
        "fit" => {
            reject_unused(command, s, &MODEL_KEYS)?;
            Ok(RunConfig::Fit(FitConfig {
                input: input(s)?,
                output: output(s)?,
            }))
        }
        "select" => {
            let mut allowed = MODEL_KEYS.to_vec();
            allowed.extend(["criterion", "penalty", "symmetrize", "force-corr"]);
            reject_unused(command, s, &allowed)?;
            Ok(RunConfig::Select(SelectConfig {
                input: input(s)?,
                strategy: strategy(s.criterion.as_deref().unwrap_or("lic-joint"))?,
                penalty: penalty(s.penalty.as_deref().unwrap_or("bic"))?,
                symmetrize: s.symmetrize.unwrap_or(false),
                force_corr: s.force_corr.clone(),
                output: output(s)?,
            }))
        }
        "simulate" => {
            reject_unused(
                command,
                s,
                &[
                    "scenario", "replicates", "seed", "n-clusters", "strategies", "penalties", "emit-data",
                    "max-iter", "tol", "out", "format",
                ],
            )?;
            let name = s.scenario.as_deref().ok_or_else(|| config_err("scenario required (--scenario)"))?;
            let scenario = match Scenario::from_name(name) {
                Some(sc) if sc != Scenario::Custom => sc,
                _ => {
                    return Err(config_err(format!(
                        "scenario: unknown value `{name}` (expected est-I, est-II, sel-I, sel-II, sel-III or lp-design)"
                    )))
                }
            };
            let mut cfg = ScenarioConfig::preset(scenario);
            if let Some(r) = s.replicates {
                cfg.replicates = r;
            }
            if let Some(seed) = s.seed {
                cfg.seed = seed;
            }
            if let Some(n) = s.n_clusters {
                cfg.n_clusters = n;
            }
            cfg.validate()?;
            let strategies = match &s.strategies {
                None => Strategy::ALL.to_vec(),
                Some(v) => v.iter().map(|x| strategy(x)).collect::<CliResult<_>>()?,
            };
            let penalties = match &s.penalties {
                None => PenaltyScale::ALL.to_vec(),
                Some(v) => v.iter().map(|x| penalty(x)).collect::<CliResult<_>>()?,
            };
            Ok(RunConfig::Simulate(SimulateConfig {
                scenario: cfg,
                strategies,
                penalties,
                fit: fit_options(s)?,
                emit_data: s.emit_data.clone(),
                output: output(s)?,
            }))
        }
        other => Err(config_err(format!("unknown command `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> CliResult<RunConfig> {
        let cli = Cli::try_parse_from(std::iter::once("geemvc").chain(args.iter().copied())).unwrap();
        parse_config(cli.command)
    }

    #[test]
    fn fit_formulas_set_dimensions() {
        let cfg = parse(&[
            "fit", "--data", "d.csv", "--pairs", "p.csv", "--mean", "y~x1+x2", "--scale", "~z1", "--corr", "~lag1+lag2",
        ])
        .unwrap();
        let RunConfig::Fit(f) = cfg else { panic!() };
        assert_eq!(f.input.mean.width(), 3);
        assert_eq!(f.input.scale.width(), 2);
        assert_eq!(f.input.corr.unwrap().width(), 2);
        assert_eq!(f.input.pairs, PairSource::File("p.csv".into()));
    }

    #[test]
    fn simulate_uses_scenario_defaults() {
        let cfg = parse(&["simulate", "--scenario", "est-I", "--replicates", "200", "--seed", "42"]).unwrap();
        let RunConfig::Simulate(s) = cfg else { panic!() };
        assert_eq!(s.scenario, ScenarioConfig::preset(Scenario::EstI));
    }

    #[test]
    fn missing_data_path() {
        let err = parse(&["fit", "--mean", "y~x"]).unwrap_err();
        assert!(err.to_string().contains("data path required"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn conflicting_and_unused_options() {
        let err = parse(&["fit", "--data", "d", "--mean", "y~x", "--pairs", "p", "--pair-generator", "toeplitz-lags"]);
        assert!(err.unwrap_err().to_string().contains("conflicting"));
        let err = parse(&["fit", "--data", "d", "--mean", "y~x", "--seed", "3"]).unwrap_err();
        assert!(err.to_string().contains("`seed`"));
        let err = parse(&["select", "--data", "d", "--mean", "y~x", "--criterion", "cic"]).unwrap_err();
        assert!(err.to_string().contains("criterion"));
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "scenario = \"sel-II\"\nreplicates = 7\nseed = 5\n").unwrap();
        let cfg = parse(&["simulate", "--config", path.to_str().unwrap(), "--seed", "9"]).unwrap();
        let RunConfig::Simulate(s) = cfg else { panic!() };
        assert_eq!(s.scenario.scenario, Scenario::SelII);
        assert_eq!(s.scenario.replicates, 7);
        assert_eq!(s.scenario.seed, 9);
    }

    #[test]
    fn config_file_errors_carry_a_locus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "scenario = \"est-I\"\nreplicats = 3\n").unwrap();
        let err = parse(&["simulate", "--config", path.to_str().unwrap()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("replicats") && msg.contains("line 2"), "{msg}");
    }
}
