use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// `H + 1` planning states of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    states: Array2<f64>,
}

impl Trajectory {
    pub fn new(states: Array2<f64>) -> Result<Self, DiffusionError> {
        if states.nrows() == 0 || states.ncols() == 0 {
            return Err(DiffusionError::ShapeMismatch("empty trajectory".into()));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::ShapeMismatch("non-finite state".into()));
        }
        Ok(Self {
            states: states.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self {
            states: Array2::zeros((horizon + 1, dim)),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DiffusionError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DiffusionError::ShapeMismatch("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_flat(rows.len().saturating_sub(1), dim, flat)
    }

    pub fn from_flat(horizon: usize, dim: usize, flat: Vec<f64>) -> Result<Self, DiffusionError> {
        let states = Array2::from_shape_vec((horizon + 1, dim), flat)
            .map_err(|e| DiffusionError::ShapeMismatch(e.to_string()))?;
        Self::new(states)
    }

    /// Wraps an array without the finiteness check.
    pub(crate) fn from_array_unchecked(states: Array2<f64>) -> Self {
        Self {
            states: states.as_standard_layout().into_owned(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.states.nrows() - 1
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        let row: ArrayView1<'_, f64> = self.states.row(k);
        row.to_slice().expect("standard layout")
    }

    pub fn state_mut(&mut self, k: usize) -> &mut [f64] {
        self.states
            .row_mut(k)
            .into_slice()
            .expect("standard layout")
    }

    pub fn states(&self) -> &Array2<f64> {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut Array2<f64> {
        &mut self.states
    }

    pub fn as_flat(&self) -> &[f64] {
        self.states.as_slice().expect("standard layout")
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        self.states.as_slice_mut().expect("standard layout")
    }

    pub fn into_array(self) -> Array2<f64> {
        self.states
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(|v| v.is_finite())
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|k| self.state(k).to_vec()).collect()
    }

    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.as_flat()
            .iter()
            .zip(other.as_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
