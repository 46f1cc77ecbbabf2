//! Synthetic multi-class feature data with analytically known density.
//!
//! Every class is an isotropic Gaussian mixture: class anchors are drawn
//! around the origin with standard deviation `class_spread`, and each class
//! places `modes_per_class` modes at `mode_offset` from its anchor in random
//! directions. Anomalies are produced by a recipe and then rejected unless
//! their true log-density under the pooled normal mixture is below the
//! `density_quantile` of the normal training samples.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::logsumexp_f64;

use super::{FeatureDataset, FeatureLevel, PixelMasks};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyRecipe {
    /// Normal sample displaced by `anomaly_offset` in a uniform direction.
    Offset,
    /// Midpoint between two class anchors, jittered by `mode_scale`.
    BetweenCenters,
    /// A mode of the class sampled with `inflation` times its scale.
    ScaleInflation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub modes_per_class: usize,
    pub mode_offset: f64,
    pub mode_scale: f64,
    pub class_spread: f64,
    pub anomaly: AnomalyRecipe,
    pub anomaly_offset: f64,
    pub inflation: f64,
    pub train_per_class: usize,
    pub test_normal_per_class: usize,
    pub test_anomaly_per_class: usize,
    /// Rejection threshold for anomalies, as a quantile of normal
    /// log-densities.
    pub density_quantile: f64,
    pub grid_height: usize,
    pub grid_width: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 8,
            modes_per_class: 3,
            mode_offset: 4.0,
            mode_scale: 0.5,
            class_spread: 3.0,
            anomaly: AnomalyRecipe::Offset,
            anomaly_offset: 3.0,
            inflation: 3.0,
            train_per_class: 2000,
            test_normal_per_class: 500,
            test_anomaly_per_class: 500,
            density_quantile: 0.01,
            grid_height: 1,
            grid_width: 1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("synthetic spec: {msg}")));
        if self.classes == 0 || self.dim == 0 || self.modes_per_class == 0 {
            return bad("classes, dim and modes_per_class must be >= 1");
        }
        if self.mode_scale <= 0.0 || !self.mode_scale.is_finite() {
            return bad("mode_scale must be positive");
        }
        if self.mode_offset < 0.0 || self.class_spread < 0.0 || self.anomaly_offset < 0.0 {
            return bad("offsets and spread must be non-negative");
        }
        if !(0.0..1.0).contains(&self.density_quantile) {
            return bad("density_quantile must be in [0, 1)");
        }
        if self.train_per_class == 0 {
            return bad("train_per_class must be >= 1");
        }
        if self.grid_height == 0 || self.grid_width == 0 {
            return bad("grid dims must be >= 1");
        }
        if self.anomaly == AnomalyRecipe::BetweenCenters && self.classes < 2 && self.test_anomaly_per_class > 0 {
            return bad("between-centers anomalies need at least two classes");
        }
        Ok(())
    }
}

/// Generated data plus the generative parameters needed to evaluate true
/// densities.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: SynthSpec,
    pub train: FeatureDataset,
    pub test: FeatureDataset,
    pub anchors: Vec<Vec<f64>>,
    /// `modes[y][j]`
    pub modes: Vec<Vec<Vec<f64>>>,
    /// Anomalies were accepted only below this true log-density.
    pub density_threshold: f64,
}

impl SyntheticTask {
    /// Log-density of `x` under the pooled, equally weighted normal mixture.
    pub fn true_log_density(&self, x: &[f64]) -> f64 {
        log_density(&self.modes, self.spec.mode_scale, x)
    }
}

fn log_density(modes: &[Vec<Vec<f64>>], scale: f64, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let count = modes.iter().map(|m| m.len()).sum::<usize>() as f64;
    let norm = -0.5 * d * (2.0 * PI * scale * scale).ln() - count.ln();
    let terms: Vec<f64> = modes
        .iter()
        .flatten()
        .map(|m| {
            let sq: f64 = m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            -0.5 * sq / (scale * scale)
        })
        .collect();
    logsumexp_f64(&terms) + norm
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn axpy(base: &[f64], scale: f64, dir: &[f64]) -> Vec<f64> {
    base.iter().zip(dir).map(|(b, d)| b + scale * d).collect()
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    anchors: Vec<Vec<f64>>,
    modes: Vec<Vec<Vec<f64>>>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn normal(&mut self, class: usize) -> Vec<f64> {
        let j = self.rng.random_range(0..self.spec.modes_per_class);
        let noise = gaussian(&mut self.rng, self.spec.dim);
        axpy(&self.modes[class][j], self.spec.mode_scale, &noise)
    }

    fn anomaly(&mut self, class: usize, threshold: f64) -> Result<Vec<f64>> {
        const MAX_TRIES: usize = 10_000;
        let s = self.spec;
        for _ in 0..MAX_TRIES {
            let candidate = match s.anomaly {
                AnomalyRecipe::Offset => {
                    let base = self.normal(class);
                    let dir = unit(&mut self.rng, s.dim);
                    axpy(&base, s.anomaly_offset, &dir)
                }
                AnomalyRecipe::BetweenCenters => {
                    let mut other = self.rng.random_range(0..s.classes - 1);
                    if other >= class {
                        other += 1;
                    }
                    let mid: Vec<f64> = self.anchors[class]
                        .iter()
                        .zip(&self.anchors[other])
                        .map(|(a, b)| 0.5 * (a + b))
                        .collect();
                    let noise = gaussian(&mut self.rng, s.dim);
                    axpy(&mid, s.mode_scale, &noise)
                }
                AnomalyRecipe::ScaleInflation => {
                    let j = self.rng.random_range(0..s.modes_per_class);
                    let noise = gaussian(&mut self.rng, s.dim);
                    axpy(&self.modes[class][j], s.mode_scale * s.inflation, &noise)
                }
            };
            if log_density(&self.modes, s.mode_scale, &candidate) < threshold {
                return Ok(candidate);
            }
        }
        Err(Error::Config(format!(
            "synthetic spec: could not place an anomaly for class {class} below the \
             {} density quantile after {MAX_TRIES} tries",
            s.density_quantile
        )))
    }
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() - 1) as f64 * q).floor() as usize;
    v[idx]
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let anchors: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| gaussian(&mut rng, d).into_iter().map(|v| v * spec.class_spread).collect())
        .collect();
    let modes: Vec<Vec<Vec<f64>>> = anchors
        .iter()
        .map(|a| {
            (0..spec.modes_per_class)
                .map(|_| axpy(a, spec.mode_offset, &unit(&mut rng, d)))
                .collect()
        })
        .collect();
    let mut gen = Generator {
        spec,
        anchors,
        modes,
        rng,
    };
    let locs = spec.grid_height * spec.grid_width;

    // training set: normals only
    let mut train_vals = Vec::with_capacity(spec.classes * spec.train_per_class * locs * d);
    let mut train_labels = Vec::new();
    let mut train_logdens = Vec::new();
    for y in 0..spec.classes {
        for _ in 0..spec.train_per_class {
            for _ in 0..locs {
                let x = gen.normal(y);
                train_logdens.push(log_density(&gen.modes, spec.mode_scale, &x));
                train_vals.extend(x.iter().map(|&v| v as f32));
            }
            train_labels.push(y);
        }
    }
    let threshold = quantile(&train_logdens, spec.density_quantile);

    // test set: held-out normals then anomalies, per class
    let grid = locs > 1;
    let mut test_vals = Vec::new();
    let mut test_labels = Vec::new();
    let mut flags = Vec::new();
    let mut mask_data = Vec::new();
    for y in 0..spec.classes {
        for _ in 0..spec.test_normal_per_class {
            for _ in 0..locs {
                test_vals.extend(gen.normal(y).iter().map(|&v| v as f32));
            }
            test_labels.push(y);
            flags.push(false);
            if grid {
                mask_data.extend(std::iter::repeat_n(0u8, locs));
            }
        }
        for _ in 0..spec.test_anomaly_per_class {
            let mask = if grid {
                patch_mask(&mut gen.rng, spec.grid_height, spec.grid_width)
            } else {
                vec![1u8]
            };
            for &m in &mask {
                let x = if m == 1 { gen.anomaly(y, threshold)? } else { gen.normal(y) };
                test_vals.extend(x.iter().map(|&v| v as f32));
            }
            if grid {
                mask_data.extend(mask);
            }
            test_labels.push(y);
            flags.push(true);
        }
    }

    let level = |values| FeatureLevel {
        height: spec.grid_height,
        width: spec.grid_width,
        dim: d,
        values,
    };
    let train = FeatureDataset {
        classes: spec.classes,
        levels: vec![level(train_vals)],
        labels: train_labels,
        anomaly_flags: None,
        masks: None,
    };
    let test = FeatureDataset {
        classes: spec.classes,
        levels: vec![level(test_vals)],
        labels: test_labels,
        anomaly_flags: Some(flags),
        masks: grid.then(|| PixelMasks {
            height: spec.grid_height,
            width: spec.grid_width,
            data: mask_data,
        }),
    };
    Ok(SyntheticTask {
        spec: spec.clone(),
        train,
        test,
        anchors: gen.anchors,
        modes: gen.modes,
        density_threshold: threshold,
    })
}

/// Random axis-aligned rectangle covering roughly a quarter of each side.
fn patch_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<u8> {
    let ph = (h / 4).max(1);
    let pw = (w / 4).max(1);
    let r0 = rng.random_range(0..=h - ph);
    let c0 = rng.random_range(0..=w - pw);
    let mut m = vec![0u8; h * w];
    for r in r0..r0 + ph {
        for c in c0..c0 + pw {
            m[r * w + c] = 1;
        }
    }
    m
}
