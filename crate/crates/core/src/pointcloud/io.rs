//! The `dfc-xyz` text format.
//!
//! ```text
//! # dfc-xyz D=<feature count> labeled=<0|1>
//! x y z f_1 ... f_D [label]
//! ```
//!
//! Values are whitespace separated; further lines starting with `#` are
//! comments and blank lines are ignored. Writers print 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

const MAGIC: &str = "dfc-xyz";

pub fn load_xyz<S: Scalar>(path: impl AsRef<Path>) -> Result<PointCloud<S>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_xyz(&text, &path.display().to_string())
}

/// Parses `dfc-xyz` text; `origin` names the source in error messages.
pub fn parse_xyz<S: Scalar>(text: &str, origin: &str) -> Result<PointCloud<S>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hline, header) = lines
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| err(1, "missing header".into()))?;
    let (dim, labeled) = parse_header(header).map_err(|m| err(hline, m))?;

    let ncols = 3 + dim + usize::from(labeled);
    let mut positions = Vec::new();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != ncols {
            return Err(err(
                lineno,
                format!("expected {ncols} columns, found {}", toks.len()),
            ));
        }
        let mut vals = [0.0f64; 3];
        for (slot, tok) in vals.iter_mut().zip(&toks[..3]) {
            *slot = parse_value(tok).map_err(|m| err(lineno, m))?;
        }
        positions.push(vals.map(S::lit));
        for tok in &toks[3..3 + dim] {
            feats.push(S::lit(parse_value(tok).map_err(|m| err(lineno, m))?));
        }
        if labeled {
            let tok = toks[ncols - 1];
            let label = tok
                .parse::<usize>()
                .map_err(|_| err(lineno, format!("invalid label `{tok}`")))?;
            labels.push(label);
        }
    }
    let m = positions.len();
    if m == 0 {
        return Err(err(hline, "no data lines".into()));
    }
    let features = Matrix::from_vec(m, dim, feats)?;
    PointCloud::new(positions, features, labeled.then_some(labels))
}

fn parse_header(line: &str) -> std::result::Result<(usize, bool), String> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some("#") || toks.next() != Some(MAGIC) {
        return Err(format!("malformed header `{line}`"));
    }
    let mut dim = None;
    let mut labeled = None;
    for tok in toks {
        match tok.split_once('=') {
            Some(("D", v)) => dim = v.parse::<usize>().ok(),
            Some(("labeled", "0")) => labeled = Some(false),
            Some(("labeled", "1")) => labeled = Some(true),
            _ => return Err(format!("unexpected header field `{tok}`")),
        }
    }
    match (dim, labeled) {
        (Some(d), Some(l)) => Ok((d, l)),
        _ => Err(format!("header must declare D=<int> and labeled=<0|1>: `{line}`")),
    }
}

fn parse_value(tok: &str) -> std::result::Result<f64, String> {
    let v: f64 = tok
        .parse()
        .map_err(|_| format!("non-numeric token `{tok}`"))?;
    if !v.is_finite() {
        return Err(format!("non-finite value `{tok}`"));
    }
    Ok(v)
}

/// Renders a cloud as `dfc-xyz` text.
pub fn write_xyz<S: Scalar>(cloud: &PointCloud<S>) -> String {
    let d = cloud.feature_dim();
    let labels = cloud.labels();
    let mut out = String::new();
    let _ = writeln!(out, "# {MAGIC} D={d} labeled={}", u8::from(labels.is_some()));
    for (i, p) in cloud.positions().iter().enumerate() {
        let mut first = true;
        for v in p.iter().chain(cloud.features().row(i)) {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{:.16e}", v.as_f64());
        }
        if let Some(l) = labels {
            let _ = write!(out, " {}", l[i]);
        }
        out.push('\n');
    }
    out
}

pub fn save_xyz<S: Scalar>(cloud: &PointCloud<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_xyz(cloud)).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
