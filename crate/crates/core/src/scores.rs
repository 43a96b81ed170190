//! Per-proposal class score matrices.

use crate::{Error, Result};

/// Dense rows-by-classes score matrix. Each row holds the scores of one
/// proposal over `C` foreground columns plus a trailing background column;
/// `class_order` names the category id behind each foreground column.
///
/// Rows produced by a softmax head sum to 1; rows produced by score
/// combination generally do not, and nothing here re-normalizes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    class_order: Vec<u32>,
    num_rows: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn zeros(num_rows: usize, class_order: Vec<u32>) -> ScoreMatrix {
        let cols = class_order.len() + 1;
        ScoreMatrix {
            class_order,
            num_rows,
            data: vec![0.0; num_rows * cols],
        }
    }

    pub fn from_rows(class_order: Vec<u32>, rows: Vec<Vec<f64>>) -> Result<ScoreMatrix> {
        let cols = class_order.len() + 1;
        let mut m = ScoreMatrix {
            class_order,
            num_rows: rows.len(),
            data: Vec::with_capacity(rows.len() * cols),
        };
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} entries, expected {cols} (foreground classes plus background)",
                    row.len()
                )));
            }
            m.data.extend_from_slice(row);
        }
        Ok(m)
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    /// Foreground column count; the background column sits at this index.
    pub fn num_foreground(&self) -> usize {
        self.class_order.len()
    }

    pub fn num_cols(&self) -> usize {
        self.class_order.len() + 1
    }

    pub fn background_col(&self) -> usize {
        self.class_order.len()
    }

    pub fn class_order(&self) -> &[u32] {
        &self.class_order
    }

    /// Foreground column holding scores for a category id.
    pub fn col_of(&self, category_id: u32) -> Option<usize> {
        self.class_order.iter().position(|&c| c == category_id)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.num_cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.num_cols();
        self.data[row * cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.num_cols();
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let cols = self.num_cols();
        &mut self.data[row * cols..(row + 1) * cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.num_cols())
    }

    pub fn column_mean(&self, col: usize) -> f64 {
        if self.num_rows == 0 {
            return 0.0;
        }
        let cols = self.num_cols();
        let sum: f64 = (0..self.num_rows).map(|r| self.data[r * cols + col]).sum();
        sum / self.num_rows as f64
    }

    /// True when the two matrices can be combined entry-wise: same shape and
    /// same column meaning.
    pub fn same_layout(&self, other: &ScoreMatrix) -> bool {
        self.num_rows == other.num_rows && self.class_order == other.class_order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_accessors() {
        let m = ScoreMatrix::from_rows(vec![4, 7], vec![vec![0.1, 0.2, 0.7], vec![0.5, 0.25, 0.25]])
            .unwrap();
        assert_eq!(m.num_rows(), 2);
        assert_eq!(m.num_foreground(), 2);
        assert_eq!(m.background_col(), 2);
        assert_eq!(m.col_of(7), Some(1));
        assert_eq!(m.col_of(5), None);
        assert_eq!(m.get(1, 0), 0.5);
        assert_eq!(m.row(0), &[0.1, 0.2, 0.7]);
        assert!((m.column_mean(2) - 0.475).abs() < 1e-15);
    }

    #[test]
    fn from_rows_rejects_ragged_input() {
        let err = ScoreMatrix::from_rows(vec![0, 1], vec![vec![0.1, 0.9]]).unwrap_err();
        assert!(err.to_string().contains("row 0"), "{err}");
    }
}
