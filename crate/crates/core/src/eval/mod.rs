//! AUROC, log-likelihood histograms and the variant comparison experiment.

mod experiment;

pub use experiment::{
    compare_variants, homogeneous_mapping_experiment, image_auroc, run_variant, CompareReport, VariantResult,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PixelMasks;
use crate::error::{Error, Result};
use crate::scoring::ScoreMap;

/// Area under the ROC curve: the probability that a random anomalous score
/// exceeds a random normal one, ties counting one half. Rank-sum form with
/// average ranks for ties.
pub fn auroc(scores: &[f64], anomalous: &[bool]) -> Result<f64> {
    if scores.len() != anomalous.len() {
        return Err(Error::shape("auroc", format!("{} scores, {} labels", scores.len(), anomalous.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auroc" });
    }
    let n_pos = anomalous.iter().filter(|&&a| a).count();
    let n_neg = anomalous.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(format!(
            "AUROC needs both classes, got {n_pos} anomalous and {n_neg} normal"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (doubled) average ranks of the anomalous samples
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j, doubled average = i + 1 + j
        let doubled = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| anomalous[k]).count() as u128;
        rank_sum2 += doubled * pos_in_group;
        i = j;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

/// Pixel-level AUROC over all map entries against the masks. When there are
/// more than `max_pixels` entries a uniform seeded subsample is used.
pub fn pixel_auroc(maps: &[ScoreMap], masks: &PixelMasks, max_pixels: Option<usize>, seed: u64) -> Result<f64> {
    let cells = masks.height * masks.width;
    if maps.len() * cells != masks.data.len() {
        return Err(Error::shape("pixel_auroc", "maps and masks disagree in count"));
    }
    if let Some(m) = maps.iter().find(|m| (m.height, m.width) != (masks.height, masks.width)) {
        return Err(Error::shape(
            "pixel_auroc",
            format!("map {}x{} vs mask {}x{}", m.height, m.width, masks.height, masks.width),
        ));
    }
    let total = masks.data.len();
    let value = |idx: usize| maps[idx / cells].s[idx % cells];
    let (scores, labels): (Vec<f64>, Vec<bool>) = match max_pixels {
        Some(limit) if total > limit => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, total, limit).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| (value(i), masks.data[i] != 0)).unzip()
        }
        _ => (0..total).map(|i| (value(i), masks.data[i] != 0)).unzip(),
    };
    auroc(&scores, &labels)
}

/// Two histograms over shared edges. Bins are half-open `[lo, hi)` except the
/// last, which also includes the maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
}

impl Histogram {
    pub fn bin_of(&self, v: f64) -> usize {
        let bins = self.normal.len();
        self.edges.partition_point(|&e| e <= v).saturating_sub(1).min(bins - 1)
    }

    /// Histogram intersection of the two normalized histograms, in `[0, 1]`.
    /// Zero when one side is empty.
    pub fn overlap(&self) -> f64 {
        let nn: usize = self.normal.iter().sum();
        let na: usize = self.anomalous.iter().sum();
        if nn == 0 || na == 0 {
            return 0.0;
        }
        self.normal
            .iter()
            .zip(&self.anomalous)
            .map(|(&a, &b)| (a as f64 / nn as f64).min(b as f64 / na as f64))
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,normal,anomalous\n");
        for i in 0..self.normal.len() {
            s.push_str(&format!(
                "{:.9e},{:.9e},{},{}\n",
                self.edges[i],
                self.edges[i + 1],
                self.normal[i],
                self.anomalous[i]
            ));
        }
        s
    }
}

pub fn histogram_export(values: &[f64], anomalous: &[bool], bins: usize) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::Invalid("histogram of an empty set".into()));
    }
    if bins < 2 {
        return Err(Error::Invalid(format!("histogram needs at least 2 bins, got {bins}")));
    }
    if values.len() != anomalous.len() {
        return Err(Error::shape("histogram_export", "values and labels differ in length"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "histogram_export" });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    edges[bins] = hi;
    let mut h = Histogram {
        edges,
        normal: vec![0; bins],
        anomalous: vec![0; bins],
    };
    for (&v, &a) in values.iter().zip(anomalous) {
        let b = h.bin_of(v);
        if a {
            h.anomalous[b] += 1;
        } else {
            h.normal[b] += 1;
        }
    }
    Ok(h)
}
