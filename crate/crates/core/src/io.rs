//! Plain-text matrix files: a header line `m n`, then `m` lines of `n`
//! whitespace-separated decimals. Vectors are stored as `p x 1` matrices.
//! Values are written with 17 significant digits so they re-parse to the
//! same `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

pub fn format_matrix(x: &DenseMatrix) -> String {
    let mut out = format!("{} {}\n", x.nrows(), x.ncols());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{:.16e}", x[(i, j)]);
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix(text: &str) -> Result<DenseMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(parse_err(hl + 1, "header must be 'm n'"));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>().ok().filter(|&d| d > 0).ok_or_else(|| parse_err(hl + 1, format!("bad dimension '{s}'")))
    };
    let (m, n) = (parse_dim(dims[0])?, parse_dim(dims[1])?);
    let mut x = DenseMatrix::zeros(m, n);
    for i in 0..m {
        let (ln, line) = lines.next().ok_or_else(|| parse_err(hl + 2 + i, format!("expected {m} rows, found {i}")))?;
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != n {
            return Err(parse_err(ln + 1, format!("expected {n} values, found {}", vals.len())));
        }
        for (j, v) in vals.iter().enumerate() {
            let f: f64 = v.parse().map_err(|_| parse_err(ln + 1, format!("bad number '{v}'")))?;
            if !f.is_finite() {
                return Err(parse_err(ln + 1, format!("non-finite value '{v}'")));
            }
            x[(i, j)] = f;
        }
    }
    if let Some((ln, _)) = lines.next() {
        return Err(parse_err(ln + 1, "trailing data after matrix"));
    }
    Ok(x)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    parse_matrix(&fs::read_to_string(path)?)
}

pub fn write_matrix(path: impl AsRef<Path>, x: &DenseMatrix) -> Result<()> {
    fs::write(path, format_matrix(x))?;
    Ok(())
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<DVector<f64>> {
    let x = read_matrix(path)?;
    if x.ncols() != 1 {
        return Err(parse_err(1, format!("vector file must have one column, found {}", x.ncols())));
    }
    Ok(x.column(0).into_owned())
}

pub fn write_vector(path: impl AsRef<Path>, v: &DVector<f64>) -> Result<()> {
    write_matrix(path, &DenseMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}
