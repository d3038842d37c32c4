//! Long-format unit CSV and pair CSV input, plus dataset export.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use geemvc_core::model::{pair_indices, Cluster, ClusterDataset};
use nalgebra::{DMatrix, DVector};

use crate::config::{InputConfig, PairSource};
use crate::error::{CliError, CliResult};
use crate::formula::Formula;

pub const CLUSTER_ID: &str = "cluster_id";
pub const UNIT_INDEX: &str = "unit_index";
/// Response column when the mean formula has no left-hand side.
pub const DEFAULT_RESPONSE: &str = "response";

/// A dataset with the labels of its design columns.
#[derive(Debug, Clone)]
pub struct Design {
    pub data: ClusterDataset,
    pub response: String,
    pub mean: Vec<String>,
    pub scale: Vec<String>,
    pub corr: Vec<String>,
}

struct Table {
    path: String,
    headers: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    fn read(path: &Path) -> CliResult<Table> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::io(path, e))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::io(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| match e.kind() {
                csv::ErrorKind::Io(_) => CliError::io(path, &e),
                _ => CliError::Config(format!("{}: {e}", path.display())),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec.iter().map(str::to_string).collect()));
        }
        Ok(Table {
            path: path.display().to_string(),
            headers,
            rows,
        })
    }

    fn column(&self, name: &str) -> CliResult<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Config(format!(
                "{}: unknown column `{name}` (columns: {})",
                self.path,
                self.headers.join(", ")
            ))
        })
    }

    fn parse<T: std::str::FromStr>(&self, line: u64, row: &[String], col: usize) -> CliResult<T> {
        row[col].parse().map_err(|_| {
            CliError::Config(format!(
                "{}:{line}: column `{}`: cannot parse `{}`",
                self.path, self.headers[col], row[col]
            ))
        })
    }

    fn value(&self, line: u64, row: &[String], col: usize) -> CliResult<f64> {
        let v: f64 = self.parse(line, row, col)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::Config(format!(
                "{}:{line}: column `{}`: non-finite value",
                self.path, self.headers[col]
            )))
        }
    }
}

struct Unit {
    index: i64,
    y: f64,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

fn design_row(values: &[f64], intercept: bool) -> Vec<f64> {
    let mut row = Vec::with_capacity(values.len() + 1);
    if intercept {
        row.push(1.0);
    }
    row.extend_from_slice(values);
    row
}

fn matrix(rows: &[Vec<f64>], cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
}

type PairKey = (u64, i64, i64);

/// Pair-level covariates by `(cluster_id, j, k)` with `j < k`.
struct PairTable {
    path: String,
    rows: HashMap<PairKey, Vec<f64>>,
}

fn read_pairs(path: &Path, formula: Option<&Formula>) -> CliResult<(PairTable, Formula)> {
    let table = Table::read(path)?;
    let keys = [table.column(CLUSTER_ID)?, table.column("j")?, table.column("k")?];
    let formula = match formula {
        Some(f) => f.clone(),
        None => Formula {
            response: None,
            intercept: false,
            terms: table
                .headers
                .iter()
                .enumerate()
                .filter(|(i, _)| !keys.contains(i))
                .map(|(_, h)| h.clone())
                .collect(),
        },
    };
    let cols: Vec<usize> = formula.terms.iter().map(|t| table.column(t)).collect::<CliResult<_>>()?;
    let mut rows = HashMap::new();
    for (line, row) in &table.rows {
        let id: u64 = table.parse(*line, row, keys[0])?;
        let (a, b): (i64, i64) = (table.parse(*line, row, keys[1])?, table.parse(*line, row, keys[2])?);
        if a == b {
            return Err(CliError::Config(format!("{}:{line}: pair with j = k = {a}", table.path)));
        }
        let values = cols.iter().map(|&c| table.value(*line, row, c)).collect::<CliResult<Vec<_>>>()?;
        if rows.insert((id, a.min(b), a.max(b)), values).is_some() {
            return Err(CliError::Config(format!(
                "{}:{line}: duplicate pair ({a}, {b}) in cluster {id}",
                table.path
            )));
        }
    }
    Ok((
        PairTable {
            path: table.path,
            rows,
        },
        formula,
    ))
}

/// Reads the unit and pair inputs and builds the three design matrices.
pub fn load(input: &InputConfig) -> CliResult<Design> {
    let table = Table::read(&input.data)?;
    let response = input.mean.response.clone().unwrap_or_else(|| DEFAULT_RESPONSE.to_string());
    let id_col = table.column(CLUSTER_ID)?;
    let unit_col = table.column(UNIT_INDEX)?;
    let y_col = table.column(&response)?;
    let mean_cols: Vec<usize> = input.mean.terms.iter().map(|t| table.column(t)).collect::<CliResult<_>>()?;
    let scale_cols: Vec<usize> = input.scale.terms.iter().map(|t| table.column(t)).collect::<CliResult<_>>()?;

    let mut clusters: BTreeMap<u64, Vec<Unit>> = BTreeMap::new();
    for (line, row) in &table.rows {
        let line = *line;
        let id: u64 = table.parse(line, row, id_col)?;
        let index: i64 = table.parse(line, row, unit_col)?;
        let read = |cols: &[usize]| cols.iter().map(|&c| table.value(line, row, c)).collect::<CliResult<Vec<f64>>>();
        let unit = Unit {
            index,
            y: table.value(line, row, y_col)?,
            mean: read(&mean_cols)?,
            scale: read(&scale_cols)?,
        };
        let units = clusters.entry(id).or_default();
        if units.iter().any(|u| u.index == index) {
            return Err(CliError::Config(format!(
                "{}:{line}: duplicate unit_index {index} in cluster {id}",
                table.path
            )));
        }
        units.push(unit);
    }
    if clusters.is_empty() {
        return Err(CliError::Config(format!("{}: no data rows", table.path)));
    }
    for units in clusters.values_mut() {
        units.sort_by_key(|u| u.index);
    }

    let max_m = clusters.values().map(Vec::len).max().unwrap_or(0);
    let lag_labels: Vec<String> = (1..max_m).map(|l| format!("lag{l}")).collect();
    let (pairs, corr) = match &input.pairs {
        PairSource::File(path) => {
            let (t, f) = read_pairs(path, input.corr.as_ref())?;
            (Some(t), f)
        }
        PairSource::ToeplitzLags => {
            let f = input.corr.clone().unwrap_or(Formula {
                response: None,
                intercept: false,
                terms: lag_labels.clone(),
            });
            if let Some(t) = f.terms.iter().find(|t| !lag_labels.contains(t)) {
                return Err(CliError::Config(format!(
                    "corr: unknown column `{t}` (toeplitz-lags provides {})",
                    lag_labels.join(", ")
                )));
            }
            (None, f)
        }
        PairSource::InterceptOnly => {
            let f = input.corr.clone().unwrap_or(Formula {
                response: None,
                intercept: true,
                terms: Vec::new(),
            });
            if let Some(t) = f.terms.first() {
                return Err(CliError::Config(format!(
                    "corr: unknown column `{t}` (intercept-only provides no pair columns)"
                )));
            }
            (None, f)
        }
    };

    let mut used = 0usize;
    let mut built = Vec::with_capacity(clusters.len());
    for (&id, units) in &clusters {
        let m = units.len();
        let y = DVector::from_iterator(m, units.iter().map(|u| u.y));
        let x_mean = matrix(&units.iter().map(|u| design_row(&u.mean, input.mean.intercept)).collect::<Vec<_>>(), input.mean.width());
        let x_scale = matrix(&units.iter().map(|u| design_row(&u.scale, input.scale.intercept)).collect::<Vec<_>>(), input.scale.width());
        let mut corr_rows = Vec::new();
        for (a, b) in pair_indices(m) {
            let (j, k) = (units[a].index, units[b].index);
            let values: Vec<f64> = match &pairs {
                Some(t) => {
                    used += 1;
                    t.rows.get(&(id, j, k)).cloned().ok_or_else(|| {
                        CliError::Config(format!("{}: cluster {id} has no row for units ({j}, {k})", t.path))
                    })?
                }
                None => corr
                    .terms
                    .iter()
                    .map(|t| if *t == format!("lag{}", b - a) { 1.0 } else { 0.0 })
                    .collect(),
            };
            corr_rows.push(design_row(&values, corr.intercept));
        }
        let x_corr = matrix(&corr_rows, corr.width());
        built.push(Cluster::new(id, y, x_mean, x_scale, x_corr)?);
    }
    if let Some(t) = &pairs {
        if used != t.rows.len() {
            return Err(CliError::Config(format!(
                "{}: {} rows do not match any pair of units in the data",
                t.path,
                t.rows.len() - used
            )));
        }
    }
    Ok(Design {
        data: ClusterDataset::new(built)?,
        response,
        mean: input.mean.labels(),
        scale: input.scale.labels(),
        corr: corr.labels(),
    })
}

/// Writes `units.csv` (response, then mean covariates without the intercept) and `pairs.csv`.
///
/// Values are printed in shortest round-trip form, so reading the files back reproduces the
/// dataset exactly. Column 0 of the mean and scale designs must be the intercept, and the
/// scale covariates must equal the mean covariates.
pub fn write_dataset(dir: &Path, data: &ClusterDataset, covariates: &[String], corr: &[String]) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let units_path = dir.join("units.csv");
    let mut w = csv::Writer::from_path(&units_path).map_err(|e| CliError::io(&units_path, e))?;
    let mut header = vec![CLUSTER_ID.to_string(), UNIT_INDEX.to_string(), DEFAULT_RESPONSE.to_string()];
    header.extend(covariates.iter().cloned());
    w.write_record(&header).map_err(|e| CliError::io(&units_path, e))?;
    for c in data.clusters() {
        for j in 0..c.size() {
            let mut rec = vec![c.id.to_string(), (j + 1).to_string(), c.y[j].to_string()];
            rec.extend((1..c.x_mean.ncols()).map(|col| c.x_mean[(j, col)].to_string()));
            w.write_record(&rec).map_err(|e| CliError::io(&units_path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&units_path, e))?;

    let pairs_path = dir.join("pairs.csv");
    let mut w = csv::Writer::from_path(&pairs_path).map_err(|e| CliError::io(&pairs_path, e))?;
    let mut header = vec![CLUSTER_ID.to_string(), "j".to_string(), "k".to_string()];
    header.extend(corr.iter().cloned());
    w.write_record(&header).map_err(|e| CliError::io(&pairs_path, e))?;
    for c in data.clusters() {
        for (row, (j, k)) in pair_indices(c.size()).enumerate() {
            let mut rec = vec![c.id.to_string(), (j + 1).to_string(), (k + 1).to_string()];
            rec.extend((0..c.x_corr.ncols()).map(|col| c.x_corr[(row, col)].to_string()));
            w.write_record(&rec).map_err(|e| CliError::io(&pairs_path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&pairs_path, e))
}
