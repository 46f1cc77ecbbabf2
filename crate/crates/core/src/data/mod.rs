//! Feature datasets: in-memory representation, the HGF1 binary format and a
//! synthetic multi-class generator.

mod hgf1;
mod synth;

pub use hgf1::{decode_features, encode_features, read_features, write_features, HGF1_MAGIC, HGF1_VERSION};
pub use synth::{generate_synthetic, AnomalyRecipe, SynthSpec, SyntheticTask};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Feature maps of one pyramid level: `N x H x W x d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureLevel {
    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    /// Feature vector of one location of one sample.
    pub fn vector(&self, sample: usize, location: usize) -> &[f32] {
        let start = (sample * self.locations() + location) * self.dim;
        &self.values[start..start + self.dim]
    }
}

/// Binary ground-truth masks, `N x H x W`, nonzero = anomalous pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMasks {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl PixelMasks {
    pub fn mask(&self, sample: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[sample * n..(sample + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub classes: usize,
    pub levels: Vec<FeatureLevel>,
    pub labels: Vec<usize>,
    pub anomaly_flags: Option<Vec<bool>>,
    pub masks: Option<PixelMasks>,
}

impl FeatureDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_anomalous(&self, sample: usize) -> bool {
        self.anomaly_flags.as_ref().is_some_and(|f| f[sample])
    }

    /// Checks sizes, label range and flag/mask lengths.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.levels.is_empty() {
            return Err(Error::Invalid("dataset has no feature levels".into()));
        }
        for (k, lvl) in self.levels.iter().enumerate() {
            let expected = n * lvl.locations() * lvl.dim;
            if lvl.values.len() != expected || lvl.dim == 0 || lvl.locations() == 0 {
                return Err(Error::Invalid(format!(
                    "level {k}: {} values for N={n}, {}x{}x{}",
                    lvl.values.len(),
                    lvl.height,
                    lvl.width,
                    lvl.dim
                )));
            }
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Index {
                what: "class label",
                index: y,
                size: self.classes,
            });
        }
        if self.anomaly_flags.as_ref().is_some_and(|f| f.len() != n) {
            return Err(Error::Invalid("anomaly flag count differs from sample count".into()));
        }
        if let Some(m) = &self.masks {
            if m.data.len() != n * m.height * m.width {
                return Err(Error::Invalid("mask size differs from sample count".into()));
            }
        }
        Ok(())
    }

    /// Additional checks for a training set: normal-only and every class
    /// represented.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        if self.anomaly_flags.as_ref().is_some_and(|f| f.iter().any(|&a| a)) {
            return Err(Error::Invalid("training set contains anomalous samples".into()));
        }
        let mut counts = vec![0usize; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        if let Some(y) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Invalid(format!("class {y} has no training samples")));
        }
        Ok(())
    }

    /// Gathers all locations of `samples` at `level` as a `[B * H * W, d]`
    /// tensor, together with the flattened location index and the owning
    /// sample's label for every row.
    pub fn gather<T: Scalar>(&self, level: usize, samples: &[usize]) -> (Tensor<T>, Vec<usize>, Vec<usize>) {
        let lvl = &self.levels[level];
        let per = lvl.locations();
        let rows = samples.len() * per;
        let mut data = Vec::with_capacity(rows * lvl.dim);
        let mut locs = Vec::with_capacity(rows);
        let mut labels = Vec::with_capacity(rows);
        for &s in samples {
            let block = &lvl.values[s * per * lvl.dim..(s + 1) * per * lvl.dim];
            data.extend(block.iter().map(|&v| T::of(v as f64)));
            locs.extend(0..per);
            labels.extend(std::iter::repeat_n(self.labels[s], per));
        }
        (Tensor::from_rows(rows, lvl.dim, data), locs, labels)
    }
}
