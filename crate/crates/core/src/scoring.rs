//! Anomaly maps from per-location statistics.
//!
//! Per level, the log-likelihoods over the whole evaluation set are mapped
//! to `P ∈ [0, 1]` (larger = more normal), and `1 - P` is upsampled to the
//! target grid and averaged over levels to give the likelihood map `S_l`.
//! The negative-entropy statistic goes through the same steps to give `S_e`.
//! The combined map is their elementwise product.
//!
//! `1 - P` is computed directly as `-expm1(v - max)` so values close to the
//! maximum keep their relative precision instead of rounding to zero.

use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::trainer::TrainedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `exp(v - max v)`.
    #[default]
    ExpShift,
    /// `(v - min) / (max - min)`.
    MinMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EntropySign {
    /// Use the negative entropy as is: larger means more normal.
    #[default]
    AsIs,
    Negated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    /// `S_l * S_e`.
    #[default]
    Both,
    Logp,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ImageScore {
    #[default]
    Max,
    /// Mean of the top `top_fraction` of map entries.
    TopMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub normalization: Normalization,
    pub entropy_sign: EntropySign,
    pub criterion: Criterion,
    pub image_score: ImageScore,
    pub top_fraction: f64,
    /// Assign each image to its nearest main center instead of using labels.
    pub infer_class: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            normalization: Normalization::ExpShift,
            entropy_sign: EntropySign::AsIs,
            criterion: Criterion::Both,
            image_score: ImageScore::Max,
            top_fraction: 0.01,
            infer_class: false,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "scoring top_fraction must be in (0, 1], got {}",
                self.top_fraction
            )));
        }
        Ok(())
    }
}

/// Normalized values `P ∈ [0, 1]` for one level over the evaluation set.
/// All-equal input maps to all ones.
pub fn normalize_level(values: &[f64], scheme: Normalization) -> Result<Vec<f64>> {
    Ok(complement_level(values, scheme)?.into_iter().map(|q| 1.0 - q).collect())
}

/// `1 - P` from [`normalize_level`], computed without cancellation.
pub fn complement_level(values: &[f64], scheme: Normalization) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Invalid("cannot normalize an empty evaluation set".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "normalize_level" });
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        log::warn!("all {} statistics are equal; normalized map is constant", values.len());
        return Ok(vec![0.0; values.len()]);
    }
    Ok(match scheme {
        Normalization::ExpShift => values.iter().map(|&v| -(v - max).exp_m1()).collect(),
        Normalization::MinMax => values.iter().map(|&v| (max - v) / (max - min)).collect(),
    })
}

/// Bilinear resize of a row-major `h x w` map with the align-corners
/// convention: corner samples map onto corner samples.
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "bilinear_upsample: source size");
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_in == 1 || n_out == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (x.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, h, out_h);
        for c in 0..out_w {
            let (c0, c1, fc) = coord(c, w, out_w);
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bot = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub s_l: Vec<f64>,
    pub s_e: Vec<f64>,
    /// The map selected by the criterion (`s_l * s_e` by default).
    pub s: Vec<f64>,
    pub image_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub maps: Vec<ScoreMap>,
    /// Per image: the lowest location log-likelihood, averaged over levels.
    pub image_logp: Vec<f64>,
}

fn image_score(s: &[f64], cfg: &ScoreConfig) -> f64 {
    match cfg.image_score {
        ImageScore::Max => s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ImageScore::TopMean => {
            let mut v = s.to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            let n = ((v.len() as f64 * cfg.top_fraction).ceil() as usize).clamp(1, v.len());
            v[..n].iter().sum::<f64>() / n as f64
        }
    }
}

/// Score maps for every image of `data` at the mask resolution (or the
/// first level's grid when there are no masks).
pub fn score_maps<T: Scalar>(model: &TrainedModel<T>, data: &FeatureDataset, cfg: &ScoreConfig) -> Result<ScoreSet> {
    cfg.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let (out_h, out_w) = match &data.masks {
        Some(m) => (m.height, m.width),
        None => (data.levels[0].height, data.levels[0].width),
    };
    let cells = out_h * out_w;
    let levels = model.levels.len();
    let mut s_l = vec![0.0; n * cells];
    let mut s_e = vec![0.0; n * cells];
    let mut image_logp = vec![0.0; n];
    // With a single class the entropy is identically zero; the entropy map
    // then carries no information and is set to ones so that `S` ranks like
    // the likelihood map instead of collapsing to zero.
    let mut entropy_informative = false;

    for k in 0..levels {
        let stats = model.level_stats(data, k, cfg.infer_class)?;
        let (h, w) = (model.levels[k].height, model.levels[k].width);
        let per = h * w;
        let logp: Vec<f64> = stats.iter().map(|s| s.logp).collect();
        let nh: Vec<f64> = stats
            .iter()
            .map(|s| match cfg.entropy_sign {
                EntropySign::AsIs => s.neg_entropy,
                EntropySign::Negated => -s.neg_entropy,
            })
            .collect();
        let ql = complement_level(&logp, cfg.normalization)?;
        let varies = nh.iter().any(|&v| v != nh[0]);
        entropy_informative |= varies;
        // constant entropy is expected with one class; skip the warning path
        let qe = if varies {
            complement_level(&nh, cfg.normalization)?
        } else {
            vec![0.0; nh.len()]
        };
        for i in 0..n {
            let span = i * per..(i + 1) * per;
            let up_l = bilinear_upsample(&ql[span.clone()], h, w, out_h, out_w);
            let up_e = bilinear_upsample(&qe[span.clone()], h, w, out_h, out_w);
            let dst = i * cells..(i + 1) * cells;
            s_l[dst.clone()].iter_mut().zip(up_l).for_each(|(a, b)| *a += b / levels as f64);
            s_e[dst].iter_mut().zip(up_e).for_each(|(a, b)| *a += b / levels as f64);
            let lo = logp[span].iter().copied().fold(f64::INFINITY, f64::min);
            image_logp[i] += lo / levels as f64;
        }
    }

    if !entropy_informative {
        s_e.iter_mut().for_each(|v| *v = 1.0);
    }

    let maps = (0..n)
        .map(|i| {
            let l = s_l[i * cells..(i + 1) * cells].to_vec();
            let e = s_e[i * cells..(i + 1) * cells].to_vec();
            let s: Vec<f64> = match cfg.criterion {
                Criterion::Both => l.iter().zip(&e).map(|(a, b)| a * b).collect(),
                Criterion::Logp => l.clone(),
                Criterion::Entropy => e.clone(),
            };
            let image_score = image_score(&s, cfg);
            ScoreMap {
                height: out_h,
                width: out_w,
                s_l: l,
                s_e: e,
                s,
                image_score,
            }
        })
        .collect();
    Ok(ScoreSet { maps, image_logp })
}
