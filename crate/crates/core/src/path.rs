use serde::{Deserialize, Serialize};

/// Values of an `R^dim`-valued path at the points of a time grid, stored
/// point-major (`data[j * dim + i]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPath {
    dim: usize,
    data: Vec<f64>,
}

impl GridPath {
    pub fn zeros(dim: usize, len: usize) -> Self {
        GridPath { dim, data: vec![0.0; dim * len] }
    }

    pub fn constant(value: &[f64], len: usize) -> Self {
        let mut data = Vec::with_capacity(value.len() * len);
        for _ in 0..len {
            data.extend_from_slice(value);
        }
        GridPath { dim: value.len(), data }
    }

    pub fn from_fn(dim: usize, len: usize, mut f: impl FnMut(usize, &mut [f64])) -> Self {
        let mut p = Self::zeros(dim, len);
        for j in 0..len {
            f(j, p.at_mut(j));
        }
        p
    }

    pub fn from_vec(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim), "data length must be a multiple of dim");
        GridPath { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn at_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.dim..(j + 1) * self.dim]
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

    /// The path stopped at index `j`: entries after `j` replaced by entry `j`.
    pub fn stopped(&self, j: usize) -> GridPath {
        let mut out = self.clone();
        let v = self.at(j).to_vec();
        for k in j + 1..self.len() {
            out.at_mut(k).copy_from_slice(&v);
        }
        out
    }

    pub fn scaled(&self, c: f64) -> GridPath {
        GridPath { dim: self.dim, data: self.data.iter().map(|x| c * x).collect() }
    }

    /// Euclidean norm of the increment between indices `s` and `t`.
    pub fn increment_norm(&self, s: usize, t: usize) -> f64 {
        self.at(t).iter().zip(self.at(s)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        (0..self.len()).map(|j| norm2(self.at(j))).fold(0.0, f64::max)
    }
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
