//! JSON matrix format shared by checkpoints and adapter bundles.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// `{"rows": r, "cols": c, "data": [row-major entries]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Matrix> for MatrixData {
    fn from(m: &Matrix) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: linalg::to_row_major(m),
        }
    }
}

impl MatrixData {
    pub fn to_matrix(&self) -> Result<Matrix> {
        linalg::from_row_major(self.rows, self.cols, &self.data)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_json(path, &MatrixData::from(m))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    read_json::<MatrixData>(path)?.to_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_json_round_trip_is_bit_exact() {
        let m = Matrix::from_fn(3, 2, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0) * 1e-7 + 1.0 / 3.0);
        let text = serde_json::to_string(&MatrixData::from(&m)).unwrap();
        let back: MatrixData = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_matrix().unwrap(), m);
    }

    #[test]
    fn malformed_matrix_is_rejected() {
        let bad = MatrixData {
            rows: 2,
            cols: 2,
            data: vec![1.0, 2.0, 3.0],
        };
        assert!(bad.to_matrix().is_err());
    }
}
