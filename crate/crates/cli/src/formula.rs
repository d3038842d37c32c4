//! Minimal model formulas: `response ~ a + b`, `~ a + b - 1`, `~ 1`.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    /// Left-hand side, when given.
    pub response: Option<String>,
    pub intercept: bool,
    pub terms: Vec<String>,
}

impl Formula {
    /// Column count including the intercept.
    pub fn width(&self) -> usize {
        self.terms.len() + self.intercept as usize
    }

    /// Term labels in design-column order.
    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.width());
        if self.intercept {
            out.push(INTERCEPT.to_string());
        }
        out.extend(self.terms.iter().cloned());
        out
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(r) = &self.response {
            write!(f, "{r} ")?;
        }
        f.write_str("~ ")?;
        let mut parts: Vec<&str> = self.terms.iter().map(String::as_str).collect();
        if self.intercept {
            parts.insert(0, "1");
        } else {
            parts.push("0");
        }
        f.write_str(&parts.join(" + "))
    }
}

/// Label of the constant column.
pub const INTERCEPT: &str = "intercept";

fn valid_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Parses a formula; `default_intercept` applies when neither `1` nor `0`/`-1` appears.
pub fn parse(text: &str, default_intercept: bool) -> Result<Formula, String> {
    let (lhs, rhs) = text
        .split_once('~')
        .ok_or_else(|| format!("formula `{text}` has no `~`"))?;
    let lhs = lhs.trim();
    let response = if lhs.is_empty() {
        None
    } else if valid_name(lhs) {
        Some(lhs.to_string())
    } else {
        return Err(format!("invalid response name `{lhs}` in `{text}`"));
    };

    let mut intercept = None;
    let mut terms: Vec<String> = Vec::new();
    let spaced = rhs.replace('-', "+-");
    let leading_minus = rhs.trim_start().starts_with('-');
    for (i, raw) in spaced.split('+').enumerate() {
        let term: String = raw.chars().filter(|c| !c.is_whitespace()).collect();
        match term.as_str() {
            "" if i == 0 && leading_minus => continue,
            "" => return Err(format!("empty term in `{text}`")),
            "1" => intercept = Some(true),
            "0" | "-1" => intercept = Some(false),
            t if valid_name(t) => {
                if terms.iter().any(|x| x == t) {
                    return Err(format!("term `{t}` repeated in `{text}`"));
                }
                if t == INTERCEPT {
                    return Err(format!("`{INTERCEPT}` is reserved; use `1` in `{text}`"));
                }
                terms.push(t.to_string());
            }
            t => return Err(format!("invalid term `{t}` in `{text}`")),
        }
    }
    let f = Formula {
        response,
        intercept: intercept.unwrap_or(default_intercept),
        terms,
    };
    if f.width() == 0 {
        return Err(format!("formula `{text}` has no columns"));
    }
    Ok(f)
}
