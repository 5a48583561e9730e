//! JSON representation of problems and solutions.
//!
//! Floats are written in scientific notation with 17 significant digits, so
//! every finite f64 round-trips exactly and repeated runs produce identical
//! bytes.

use std::io::{self, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::core::{ProblemInstance, SolutionSet};
use crate::error::{Result, SedjocoError};

/// Renders a float with 17 significant digits, the shortest width that is
/// lossless for every f64.
pub fn format_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

struct SciFormatter;

impl serde_json::ser::Formatter for SciFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        if !value.is_finite() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "non-finite float cannot be written as JSON",
            ));
        }
        write!(writer, "{:.16e}", value)
    }
}

/// Serializes any value to JSON with the 17-digit float convention.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFormatter);
    value.serialize(&mut ser)?;
    String::from_utf8(buf)
        .map_err(|e| SedjocoError::InvalidInput(format!("serialized JSON is not UTF-8: {}", e)))
}

#[derive(Serialize, Deserialize)]
struct ProblemJson {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    t: Option<usize>,
    /// Nested as targets[k][m1][m2][row][col].
    targets: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
}

#[derive(Serialize, Deserialize)]
struct SolutionJson {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "M")]
    m: usize,
    /// Nested as B[m][row][col].
    #[serde(rename = "B")]
    b: Vec<Vec<Vec<f64>>>,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(SedjocoError::DimensionMismatch(format!(
            "{}: expected {} rows, got {}",
            what,
            nrows,
            rows.len()
        )));
    }
    let mut out = DMatrix::zeros(nrows, ncols);
    for (r, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(SedjocoError::DimensionMismatch(format!(
                "{}: row {} has {} entries, expected {}",
                what,
                r,
                row.len(),
                ncols
            )));
        }
        for (c, &x) in row.iter().enumerate() {
            out[(r, c)] = x;
        }
    }
    Ok(out)
}

pub fn problem_to_json(p: &ProblemInstance) -> Result<String> {
    let dims = p.dims();
    let targets = (0..dims.k)
        .map(|k| {
            (0..dims.m)
                .map(|m1| {
                    (0..dims.m)
                        .map(|m2| matrix_to_rows(p.target(k, m1, m2)))
                        .collect()
                })
                .collect()
        })
        .collect();
    to_json_string(&ProblemJson {
        k: dims.k,
        m: dims.m,
        t: dims.t,
        targets,
    })
}

pub fn problem_from_json(text: &str) -> Result<ProblemInstance> {
    let doc: ProblemJson = serde_json::from_str(text)?;
    if doc.targets.len() != doc.k {
        return Err(SedjocoError::DimensionMismatch(format!(
            "targets: expected {} source entries, got {}",
            doc.k,
            doc.targets.len()
        )));
    }
    let mut mats = Vec::with_capacity(doc.k * doc.m * doc.m);
    for (k, per_source) in doc.targets.iter().enumerate() {
        if per_source.len() != doc.m {
            return Err(SedjocoError::DimensionMismatch(format!(
                "targets[{}]: expected {} row-set entries, got {}",
                k,
                doc.m,
                per_source.len()
            )));
        }
        for (m1, per_m1) in per_source.iter().enumerate() {
            if per_m1.len() != doc.m {
                return Err(SedjocoError::DimensionMismatch(format!(
                    "targets[{}][{}]: expected {} entries, got {}",
                    k,
                    m1,
                    doc.m,
                    per_m1.len()
                )));
            }
            for (m2, rows) in per_m1.iter().enumerate() {
                let what = format!("targets[{}][{}][{}]", k, m1, m2);
                mats.push(rows_to_matrix(rows, doc.k, doc.k, &what)?);
            }
        }
    }
    let p = ProblemInstance::new(doc.k, doc.m, mats)?;
    Ok(match doc.t {
        Some(t) => p.with_sample_count(t),
        None => p,
    })
}

pub fn solution_to_json(s: &SolutionSet) -> Result<String> {
    let dims = s.dims();
    let b = (0..dims.m).map(|m| matrix_to_rows(s.b(m))).collect();
    to_json_string(&SolutionJson {
        k: dims.k,
        m: dims.m,
        b,
    })
}

pub fn solution_from_json(text: &str) -> Result<SolutionSet> {
    let doc: SolutionJson = serde_json::from_str(text)?;
    if doc.b.len() != doc.m {
        return Err(SedjocoError::DimensionMismatch(format!(
            "B: expected {} matrices, got {}",
            doc.m,
            doc.b.len()
        )));
    }
    let mats = doc
        .b
        .iter()
        .enumerate()
        .map(|(m, rows)| rows_to_matrix(rows, doc.k, doc.k, &format!("B[{}]", m)))
        .collect::<Result<Vec<_>>>()?;
    SolutionSet::new(doc.k, doc.m, mats)
}
