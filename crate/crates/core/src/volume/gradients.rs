//! FSL-style plain-text gradient tables.
//!
//! `bvecs` holds three whitespace-separated rows (x, y, z) of `G` columns;
//! `bvals` holds a single row of `G` values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::{Error, Result, Vec3};

fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::format(format!("bad number {t:?}"))))
                .collect()
        })
        .collect()
}

pub fn parse_bvals(text: &str) -> Result<Vec<f64>> {
    let rows = parse_rows(text)?;
    match rows.as_slice() {
        [row] => Ok(row.clone()),
        _ => Err(Error::format(format!("bvals must be a single row, found {} rows", rows.len()))),
    }
}

/// Parses bvecs; vectors with non-zero norm are renormalised.
pub fn parse_bvecs(text: &str) -> Result<Vec<Vec3>> {
    let rows = parse_rows(text)?;
    if rows.len() != 3 || rows[0].len() != rows[1].len() || rows[1].len() != rows[2].len() {
        return Err(Error::format("bvecs must have 3 rows of equal length"));
    }
    Ok((0..rows[0].len())
        .map(|i| {
            let v = Vec3::new(rows[0][i], rows[1][i], rows[2][i]);
            let n = v.norm();
            if n > 1e-8 { v / n } else { Vec3::zeros() }
        })
        .collect())
}

pub fn read_bvals(path: &Path) -> Result<Vec<f64>> {
    parse_bvals(&fs::read_to_string(path)?)
}

pub fn read_bvecs(path: &Path) -> Result<Vec<Vec3>> {
    parse_bvecs(&fs::read_to_string(path)?)
}

pub fn format_bvals(bvals: &[f64]) -> String {
    let mut s = bvals.iter().map(|b| format!("{b}")).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

pub fn format_bvecs(bvecs: &[Vec3]) -> String {
    let mut s = String::new();
    for axis in 0..3 {
        let row: Vec<String> = bvecs.iter().map(|v| format!("{:.17}", v[axis])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn write_bvals(bvals: &[f64], path: &Path) -> Result<()> {
    Ok(fs::write(path, format_bvals(bvals))?)
}

pub fn write_bvecs(bvecs: &[Vec3], path: &Path) -> Result<()> {
    Ok(fs::write(path, format_bvecs(bvecs))?)
}
