use std::path::Path;

use crate::error::{LabError, Result};
use crate::math::sigmoid;
use crate::policy::read_matrix_json;
use crate::table::Table;

/// Point-wise reward `r(x, y)`. Only within-context differences are
/// identifiable from comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    values: Table,
}

impl RewardTable {
    pub fn zeros(num_contexts: usize, num_responses: usize) -> Self {
        RewardTable {
            values: Table::zeros(num_contexts, num_responses),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::from_table(Table::from_rows(rows)?)
    }

    pub fn from_table(values: Table) -> Result<Self> {
        if !values.all_finite() {
            return Err(LabError::Config("reward entries must be finite".into()));
        }
        Ok(RewardTable { values })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values.get(x, y)
    }

    pub fn table(&self) -> &Table {
        &self.values
    }

    pub fn table_mut(&mut self) -> &mut Table {
        &mut self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Bradley-Terry probability that `a` beats `b` in context `x`.
    pub fn bt_probability(&self, x: usize, a: usize, b: usize) -> f64 {
        sigmoid(self.get(x, a) - self.get(x, b))
    }

    /// Largest disagreement of within-context differences `r(x,a) - r(x,b)`
    /// over all contexts and response pairs.
    pub fn max_difference_error(&self, other: &RewardTable) -> f64 {
        let (c, v) = self.shape();
        let mut worst: f64 = 0.0;
        for x in 0..c {
            for a in 0..v {
                for b in (a + 1)..v {
                    let d1 = self.get(x, a) - self.get(x, b);
                    let d2 = other.get(x, a) - other.get(x, b);
                    worst = worst.max((d1 - d2).abs());
                }
            }
        }
        worst
    }

    /// Writes `{"num_contexts", "num_responses", "values"}`.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let doc = serde_json::json!({
            "num_contexts": self.values.num_rows(),
            "num_responses": self.values.num_cols(),
            "values": self.values.to_rows(),
        });
        let mut text = doc.to_string();
        text.push('\n');
        std::fs::write(path, text).map_err(|e| LabError::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Self::from_table(read_matrix_json(path)?)
    }
}
