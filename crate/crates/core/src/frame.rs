//! Minimal column-major table of named numeric vectors.

use crate::error::{Error, Result};

/// Named numeric columns of equal length. The workhorse table behind model
/// fitting and prediction; ordering of columns is preserved everywhere.
#[derive(Debug, Clone, Default)]
pub struct Frame {
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
    n_rows: usize,
}

impl Frame {
    pub fn new() -> Self {
        Frame::default()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.has_column(&name) {
            return Err(Error::data(format!("duplicate column `{name}`")));
        }
        if self.names.is_empty() {
            self.n_rows = values.len();
        } else if values.len() != self.n_rows {
            return Err(Error::data(format!(
                "column `{}` has {} rows, expected {}",
                name,
                values.len(),
                self.n_rows
            )));
        }
        self.names.push(name);
        self.cols.push(values);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.cols[i].as_slice())
    }

    pub fn try_column(&self, name: &str) -> Result<&[f64]> {
        self.column(name)
            .ok_or_else(|| Error::data(format!("missing column `{name}`")))
    }

    /// Replace an existing column's values, keeping its position.
    pub fn set_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.n_rows {
            return Err(Error::data(format!(
                "replacement for `{}` has {} rows, expected {}",
                name,
                values.len(),
                self.n_rows
            )));
        }
        match self.names.iter().position(|n| n == name) {
            Some(i) => {
                self.cols[i] = values;
                Ok(())
            }
            None => Err(Error::data(format!("missing column `{name}`"))),
        }
    }

    /// New frame containing the given rows (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Frame {
        let cols = self
            .cols
            .iter()
            .map(|c| rows.iter().map(|&r| c[r]).collect())
            .collect();
        Frame {
            names: self.names.clone(),
            cols,
            n_rows: rows.len(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.cols.iter().map(|c| c.as_slice()))
    }
}
