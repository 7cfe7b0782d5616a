//! Dense feature-by-timestep storage for one encounter's trajectory.

use serde::{Deserialize, Serialize};

/// A `n_features x n_timesteps` matrix stored time-major, so the feature
/// vector of a single timestep is contiguous.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grid<T: Copy> {
    n_features: usize,
    n_timesteps: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(n_features: usize, n_timesteps: usize, fill: T) -> Self {
        Grid {
            n_features,
            n_timesteps,
            data: vec![fill; n_features * n_timesteps],
        }
    }

    /// Build from time-major data (`data[t * n_features + f]`).
    pub fn from_time_major(n_features: usize, n_timesteps: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n_features * n_timesteps);
        Grid {
            n_features,
            n_timesteps,
            data,
        }
    }

    #[inline]
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn n_timesteps(&self) -> usize {
        self.n_timesteps
    }

    #[inline]
    pub fn get(&self, feature: usize, t: usize) -> T {
        self.data[t * self.n_features + feature]
    }

    #[inline]
    pub fn set(&mut self, feature: usize, t: usize, value: T) {
        self.data[t * self.n_features + feature] = value;
    }

    /// All features at one timestep, contiguous.
    #[inline]
    pub fn step(&self, t: usize) -> &[T] {
        &self.data[t * self.n_features..(t + 1) * self.n_features]
    }

    pub fn step_mut(&mut self, t: usize) -> &mut [T] {
        &mut self.data[t * self.n_features..(t + 1) * self.n_features]
    }

    /// One feature across time, as an owned vector.
    pub fn feature_series(&self, feature: usize) -> Vec<T> {
        (0..self.n_timesteps).map(|t| self.get(feature, t)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.data.iter().copied()
    }

    /// Keep only timesteps `[start, end)`.
    pub fn slice_timesteps(&self, start: usize, end: usize) -> Grid<T> {
        assert!(start <= end && end <= self.n_timesteps);
        Grid {
            n_features: self.n_features,
            n_timesteps: end - start,
            data: self.data[start * self.n_features..end * self.n_features].to_vec(),
        }
    }

    /// Prepend `count` copies of the first timestep's feature vector.
    pub fn prepend_first(&self, count: usize) -> Grid<T> {
        assert!(self.n_timesteps >= 1);
        let mut data = Vec::with_capacity((self.n_timesteps + count) * self.n_features);
        for _ in 0..count {
            data.extend_from_slice(self.step(0));
        }
        data.extend_from_slice(&self.data);
        Grid {
            n_features: self.n_features,
            n_timesteps: self.n_timesteps + count,
            data,
        }
    }
}

/// A one-feature series, handy in tests.
pub fn grid_1d(values: &[f64]) -> Grid<f64> {
    Grid::from_time_major(1, values.len(), values.to_vec())
}

// Bit-level equality so that NaN-marked missing cells compare equal.
impl PartialEq for Grid<f64> {
    fn eq(&self, other: &Self) -> bool {
        self.n_features == other.n_features
            && self.n_timesteps == other.n_timesteps
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl PartialEq for Grid<bool> {
    fn eq(&self, other: &Self) -> bool {
        self.n_features == other.n_features
            && self.n_timesteps == other.n_timesteps
            && self.data == other.data
    }
}
