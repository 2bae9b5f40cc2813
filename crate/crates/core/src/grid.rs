//! Feature grids: rectangular fields of per-cell feature vectors.

use serde::Serialize;

use crate::{Error, Result};

/// Which encoder produced a grid. The momentum grid never receives gradients;
/// keeping the provenance on the value makes that auditable in traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Provenance {
    Regular,
    Momentum,
}

/// A rectangular grid of feature vectors: `rows x cols` cells of `channels`
/// values each, stored row-major with the channel axis innermost.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl FeatureGrid {
    pub fn new(
        rows: usize,
        cols: usize,
        channels: usize,
        values: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        if values.len() != rows * cols * channels {
            return Err(Error::ShapeMismatch {
                context: "feature grid",
                expected: format!("{} values", rows * cols * channels),
                got: format!("{}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "feature grid value".into(),
            });
        }
        Ok(Self {
            rows,
            cols,
            channels,
            values,
            provenance,
        })
    }

    pub fn zeros(rows: usize, cols: usize, channels: usize, provenance: Provenance) -> Self {
        Self {
            rows,
            cols,
            channels,
            values: vec![0.0; rows * cols * channels],
            provenance,
        }
    }

    /// Number of cells.
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Feature vector of the flat cell index `i` (row-major).
    pub fn cell(&self, i: usize) -> &[f64] {
        let c = self.channels;
        &self.values[i * c..(i + 1) * c]
    }

    pub fn cell_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.values[i * c..(i + 1) * c]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.channels)
    }
}

/// Euclidean norm of a vector.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity with the zero-vector convention: if either argument has
/// zero norm the similarity is 0 (and so is its gradient).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}
