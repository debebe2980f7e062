use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix. Synaptic weights are stored
/// `n_input × n_neuron`, so column `j` holds all inputs to neuron `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, w) in sums.iter_mut().zip(self.row(i)) {
                *s += w;
            }
        }
        sums
    }

    pub fn ensure_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows {
            return Err(Error::Dimension {
                expected: rows,
                got: self.rows,
            });
        }
        if self.cols != cols {
            return Err(Error::Dimension {
                expected: cols,
                got: self.cols,
            });
        }
        Ok(())
    }
}

/// Element access used by the plasticity rules. Implemented by [`Matrix`];
/// tests wrap it to record which entries a rule touches.
pub trait SynapseMatrix {
    fn n_input(&self) -> usize;
    fn n_neuron(&self) -> usize;
    fn weight(&self, i: usize, j: usize) -> f64;
    fn set_weight(&mut self, i: usize, j: usize, w: f64);
}

impl SynapseMatrix for Matrix {
    fn n_input(&self) -> usize {
        self.rows
    }

    fn n_neuron(&self) -> usize {
        self.cols
    }

    fn weight(&self, i: usize, j: usize) -> f64 {
        self.get(i, j)
    }

    fn set_weight(&mut self, i: usize, j: usize, w: f64) {
        self.set(i, j, w);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_row_major() {
        let m = Matrix::from_fn(2, 3, |i, j| (i * 10 + j) as f64);
        assert_eq!(m.as_slice(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(m.column(1), vec![1.0, 11.0]);
        assert_eq!(m.column_sums(), vec![10.0, 12.0, 14.0]);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
