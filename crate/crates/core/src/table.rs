use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Dense row-major `contexts x responses` matrix of reals.
///
/// Used directly as the gradient type and wrapped by reward tables and
/// policies.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Gradient with respect to every logit of a policy.
pub type GradientTable = Table;

impl Table {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Table {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if n_rows == 0 || n_cols == 0 {
            return Err(LabError::Shape("table must be at least 1x1".into()));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != n_cols) {
            return Err(LabError::Shape(format!(
                "row {bad} has {} entries, expected {n_cols}",
                rows[bad].len()
            )));
        }
        Ok(Table {
            rows: n_rows,
            cols: n_cols,
            data: rows.concat(),
        })
    }

    pub fn num_rows(&self) -> usize {
        self.rows
    }

    pub fn num_cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn ensure_same_shape(&self, other: &Table) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LabError::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self += scale * other`. Shapes must agree.
    pub fn add_scaled(&mut self, other: &Table, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |self - other|` over all entries.
    pub fn max_abs_diff(&self, other: &Table) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// On-disk matrix form shared by policies and reward tables.
#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct MatrixFile {
    pub num_contexts: usize,
    pub num_responses: usize,
    #[serde(alias = "values")]
    pub logits: Vec<Vec<f64>>,
}

impl MatrixFile {
    pub fn from_table(t: &Table) -> Self {
        MatrixFile {
            num_contexts: t.num_rows(),
            num_responses: t.num_cols(),
            logits: t.to_rows(),
        }
    }

    pub fn into_table(self) -> Result<Table> {
        let t = Table::from_rows(&self.logits)?;
        if t.shape() != (self.num_contexts, self.num_responses) {
            return Err(LabError::Shape(format!(
                "declared {}x{} but matrix is {}x{}",
                self.num_contexts,
                self.num_responses,
                t.num_rows(),
                t.num_cols()
            )));
        }
        Ok(t)
    }
}
