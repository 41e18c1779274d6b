//! CSV and JSON plumbing.
//!
//! Arrays are stored as headerless, comma-separated CSV with LF line
//! endings; numbers are written with Rust's shortest round-trip formatting
//! so that reading back reproduces every bit. Vectors are one value per line.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::convex::RealVec;
use crate::error::{Error, Result};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Parses headerless CSV text into rows of numbers.
pub fn parse_rows(text: &str, origin: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(origin, e.to_string()))?;
        if record.iter().all(|s| s.is_empty()) {
            continue;
        }
        let row = record
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| parse_err(origin, format!("line {}: not a number: {s:?}", line + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let rows = parse_rows(&text, path)?;
    let Some(first) = rows.first() else {
        return Err(parse_err(path, "empty matrix"));
    };
    let n = first.len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(parse_err(path, format!("row {} has {} entries, expected {n}", i + 1, r.len())));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

/// Reads a vector stored either one value per line or as a single row.
pub fn read_vector(path: &Path) -> Result<RealVec> {
    let m = read_matrix(path)?;
    if m.ncols() == 1 || m.nrows() == 1 {
        Ok(RealVec::from_iterator(m.len(), m.iter().copied()))
    } else {
        Err(parse_err(path, format!("expected a vector, got {}x{}", m.nrows(), m.ncols())))
    }
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn vector_to_csv(v: &RealVec) -> String {
    v.iter().map(|x| format!("{x}\n")).collect()
}

/// Formats rows of numbers as CSV.
pub fn rows_to_csv<R: AsRef<[f64]>>(rows: &[R]) -> String {
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r.as_ref().iter().map(|x| x.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    let mut file = File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Serializes a vector as a plain JSON array.
pub mod vec_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::convex::RealVec;

    pub fn serialize<S: Serializer>(v: &RealVec, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RealVec, D::Error> {
        Vec::<f64>::deserialize(d).map(RealVec::from_vec)
    }
}

/// Same as [`vec_serde`] for a list of vectors.
pub mod vecs_serde {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::convex::RealVec;

    pub fn serialize<S: Serializer>(vs: &[RealVec], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(vs.len()))?;
        for v in vs {
            seq.serialize_element(v.as_slice())?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<RealVec>, D::Error> {
        Vec::<Vec<f64>>::deserialize(d).map(|vs| vs.into_iter().map(RealVec::from_vec).collect())
    }
}
