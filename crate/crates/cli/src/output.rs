//! Number formatting and result writers.

use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::config::{Format, OutputConfig};
use crate::error::{CliError, CliResult};

/// A JSON number with 17 significant digits; `null` when not finite.
pub fn json_num(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    serde_json::from_str(&format!("{x:.16e}")).unwrap_or(Value::Null)
}

pub fn json_nums(xs: impl IntoIterator<Item = f64>) -> Value {
    Value::Array(xs.into_iter().map(json_num).collect())
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Six significant digits in the style of C's `%g`.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap_or((&sci, "0"));
    let exp: i32 = exp.parse().unwrap_or(0);
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_fraction(mantissa), exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    }
}

/// A rendered result in one of the two formats.
pub enum Rendered {
    Json(Value),
    Csv { header: Vec<String>, rows: Vec<Vec<String>> },
}

impl Rendered {
    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        match self {
            Rendered::Json(v) => {
                let mut out = serde_json::to_vec_pretty(v).map_err(|e| CliError::Io(e.to_string()))?;
                out.push(b'\n');
                Ok(out)
            }
            Rendered::Csv { header, rows } => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(header).map_err(|e| CliError::Io(e.to_string()))?;
                for r in rows {
                    w.write_record(r).map_err(|e| CliError::Io(e.to_string()))?;
                }
                w.into_inner().map_err(|e| CliError::Io(e.to_string()))
            }
        }
    }
}

/// Something that can be rendered as JSON or as a CSV table.
pub trait Report {
    fn json(&self) -> Value;
    fn csv(&self) -> (Vec<String>, Vec<Vec<String>>);

    fn render(&self, format: Format) -> Rendered {
        match format {
            Format::Json => Rendered::Json(self.json()),
            Format::Csv => {
                let (header, rows) = self.csv();
                Rendered::Csv { header, rows }
            }
        }
    }
}

pub fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Writes the report to the configured file, or to standard output.
pub fn emit(report: &dyn Report, out: &OutputConfig) -> CliResult<()> {
    let bytes = report.render(out.format).to_bytes()?;
    match &out.path {
        Some(path) => write_file(path, &bytes),
        None => std::io::stdout().write_all(&bytes).map_err(|e| CliError::Io(format!("stdout: {e}"))),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
