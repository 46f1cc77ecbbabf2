use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PosMode {
    /// Sinusoidal for spatial grids, zeros for `1 x 1` (vector) data.
    #[default]
    Auto,
    Sinusoidal,
    Zeros,
}

/// Per-location conditioning vectors for a level's `H x W` grid, stored
/// row-major as `[H * W, dim]`.
#[derive(Debug, Clone)]
pub struct PositionalEmbedding<T> {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Resolved mode; never `Auto`.
    pub mode: PosMode,
    table: Tensor<T>,
}

impl<T: Scalar> PositionalEmbedding<T> {
    pub fn new(height: usize, width: usize, dim: usize, mode: PosMode) -> Result<Self> {
        let mode = match mode {
            PosMode::Auto if height * width <= 1 => PosMode::Zeros,
            PosMode::Auto => PosMode::Sinusoidal,
            m => m,
        };
        let table = match mode {
            PosMode::Zeros | PosMode::Auto => Tensor::zeros(height * width, dim),
            PosMode::Sinusoidal => sinusoidal_2d(height, width, dim)?,
        };
        Ok(Self {
            height,
            width,
            dim,
            mode,
            table,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.mode == PosMode::Zeros || self.dim == 0
    }

    pub fn table(&self) -> &Tensor<T> {
        &self.table
    }

    /// Embedding rows for a batch of flattened location indices.
    pub fn gather(&self, locations: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(locations.len() * self.dim);
        for &l in locations {
            data.extend_from_slice(self.table.row(l));
        }
        Tensor::from_rows(locations.len(), self.dim, data)
    }
}

/// 2-D sine/cosine encoding: the first half of the channels encodes the
/// column, the second half the row, alternating sin/cos at geometrically
/// spaced frequencies.
fn sinusoidal_2d<T: Scalar>(height: usize, width: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 4 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal positional embedding needs pos_dim divisible by 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| (-(10000f64.ln()) * (2 * i) as f64 / half as f64).exp())
        .collect();
    Ok(Tensor::from_fn(height * width, dim, |loc, ch| {
        let (row, col) = ((loc / width) as f64, (loc % width) as f64);
        let (pos, ch) = if ch < half { (col, ch) } else { (row, ch - half) };
        let angle = pos * freqs[ch / 2];
        T::of(if ch % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}
