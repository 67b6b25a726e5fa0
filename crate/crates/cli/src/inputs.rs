//! Parsing of terminal-function specs and point files.

use std::path::Path;

use hjb_core::ocp::{SensorLayout, TerminalCondition, TerminalFn};
use hjb_core::{Error, Result};

/// A terminal condition on `sensors` from an expression such as
/// `0.57*|x|^2`, or from a file of sensor values (comma or whitespace
/// separated, `#` starts a comment).
pub fn terminal(spec: &str, sensors: &SensorLayout) -> Result<TerminalCondition> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        let values: Vec<f64> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(|l| l.split(|c: char| c == ',' || c.is_whitespace()))
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("`{s}` in {} is not a number", path.display())))
            })
            .collect::<Result<_>>()?;
        return TerminalCondition::from_sensor_values(values, sensors.clone());
    }
    TerminalCondition::new(TerminalFn::parse(spec)?, sensors.clone())
}

/// Rows `(t, x)` of a CSV with header `t,x1,...,xd`. An empty file yields
/// no rows.
pub fn points(path: &Path, dim: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(e.to_string()))?;
    let (mut ts, mut xs) = (Vec::new(), Vec::new());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() != dim + 1 {
            return Err(Error::ShapeMismatch(format!(
                "row {} of {} has {} columns, expected t and {dim} coordinates",
                i + 1,
                path.display(),
                rec.len()
            )));
        }
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("row {} of {}: `{s}` is not a number", i + 1, path.display())))
            })
            .collect::<Result<_>>()?;
        ts.push(vals[0]);
        xs.push(vals[1..].to_vec());
    }
    Ok((ts, xs))
}

pub fn point_header(dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("x{i}")).collect()
}
