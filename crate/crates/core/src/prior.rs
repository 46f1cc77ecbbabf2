//! Hierarchical Gaussian-mixture latent prior.
//!
//! Each class `y` owns a main center `mu[y]` and class-weight logit
//! `psi[y]`; inside a class, `M` sub-centers sit at `mu[y] + delta[y][i]`
//! with their own logits `psi_intra[y][i]`. Sub-center 0 has its offset
//! pinned at zero, so it coincides with the main center. Covariances are the
//! identity throughout.
//!
//! The four training terms are:
//!
//! * `l_g`  - mixture negative log-likelihood over all class centers,
//! * `l_mi` - classification-style term pulling `z` to its own class center
//!   and away from the others,
//! * `l_e`  - entropy of the class posterior built from distances alone,
//! * `l_in` - per-class mixture NLL over the sub-centers, with the main
//!   center detached so only offsets, intra logits and the flow learn from it.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Axis, Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Only `λ1·l_g + λ2·l_mi` drives the update.
    Warmup,
    /// All four terms.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalPrior<T> {
    pub classes: usize,
    pub intra: usize,
    pub dim: usize,
    /// `[Y, d]`
    pub mu: Tensor<T>,
    /// `[1, Y]`
    pub psi: Tensor<T>,
    /// `[Y, M * d]`; columns `[0, d)` are always zero.
    pub delta: Tensor<T>,
    /// `[Y, M]`
    pub psi_intra: Tensor<T>,
    /// Add the class log-weights to the entropy logits.
    pub entropy_uses_weights: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundPrior {
    pub mu: Var,
    pub psi: Var,
    pub delta: Var,
    pub psi_intra: Var,
}

/// Graph handles shared by the loss terms for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LatentBatch {
    pub z: Var,
    pub logdet: Var,
    /// `[B, Y]` constant one-hot labels.
    pub onehot: Var,
    /// `[B, Y]` squared distances to the main centers.
    pub sq_dist: Var,
    /// `[1, Y]` class log-weights `c_y`.
    pub class_logw: Var,
}

/// Scalar loss values for one batch plus the graph node of the total.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub l_g: f64,
    pub l_mi: f64,
    pub l_e: f64,
    pub l_in: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total_var: Var,
}

impl<T: Scalar> HierarchicalPrior<T> {
    /// `mu[y] = y + r` with `r ~ N(0, I)`; all logits and offsets zero.
    pub fn init(classes: usize, intra: usize, dim: usize, seed: u64) -> Result<Self> {
        if classes == 0 || intra == 0 || dim == 0 {
            return Err(Error::Invalid(format!(
                "prior needs Y, M, d >= 1 (got {classes}, {intra}, {dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = Tensor::from_fn(classes, dim, |y, _| {
            let r: f64 = StandardNormal.sample(&mut rng);
            T::of(y as f64 + r)
        });
        Ok(Self {
            classes,
            intra,
            dim,
            mu,
            psi: Tensor::zeros(1, classes),
            delta: Tensor::zeros(classes, intra * dim),
            psi_intra: Tensor::zeros(classes, intra),
            entropy_uses_weights: false,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundPrior {
        BoundPrior {
            mu: g.param(self.mu.clone()),
            psi: g.param(self.psi.clone()),
            delta: g.param(self.delta.clone()),
            psi_intra: g.param(self.psi_intra.clone()),
        }
    }

    /// Resets the pinned sub-center offsets to exactly zero.
    pub fn enforce_pinned_offset(&mut self) {
        let w = self.intra * self.dim;
        for y in 0..self.classes {
            self.delta.data_mut()[y * w..y * w + self.dim]
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }

    /// `c_y = logsoftmax(psi)` as plain values.
    pub fn class_log_weights(&self) -> Vec<f64> {
        log_softmax_f64(&self.psi.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>())
    }

    /// `c_i^y = logsoftmax_i(psi_intra[y])`.
    pub fn intra_log_weights(&self, class: usize) -> Vec<f64> {
        log_softmax_f64(&self.psi_intra.row(class).iter().map(|v| v.as_f64()).collect::<Vec<_>>())
    }

    /// Sub-center `i` of class `y`: `mu[y] + delta[y][i]`.
    pub fn sub_center(&self, class: usize, i: usize) -> Vec<f64> {
        let off = &self.delta.row(class)[i * self.dim..(i + 1) * self.dim];
        self.mu
            .row(class)
            .iter()
            .zip(off)
            .map(|(m, o)| m.as_f64() + o.as_f64())
            .collect()
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&y| y >= self.classes) {
            Some(&y) => Err(Error::Index {
                what: "class label",
                index: y,
                size: self.classes,
            }),
            None => Ok(()),
        }
    }

    /// Builds the per-batch shared nodes. `z` is `[B, d]`, `logdet` `[B, 1]`.
    pub fn prepare(
        &self,
        g: &mut Graph<T>,
        bp: &BoundPrior,
        z: Var,
        logdet: Var,
        labels: &[usize],
    ) -> Result<LatentBatch> {
        self.check_labels(labels)?;
        let (rows, cols) = (g.value(z).rows(), g.value(z).cols());
        if cols != self.dim || rows != labels.len() || g.value(logdet).rows() != rows {
            return Err(Error::shape(
                "prior",
                format!(
                    "z [{rows}x{cols}], {} labels, logdet rows {}; prior dim {}",
                    labels.len(),
                    g.value(logdet).rows(),
                    self.dim
                ),
            ));
        }
        let onehot = g.constant(Tensor::one_hot(labels, self.classes)?);
        let sq_dist = self.sq_dist_to_rows(g, z, bp.mu, self.classes)?;
        let class_logw = g.log_softmax(bp.psi, Axis::Cols)?;
        Ok(LatentBatch {
            z,
            logdet,
            onehot,
            sq_dist,
            class_logw,
        })
    }

    /// `[B, n]` squared distances from each row of `z` to each row of `centers`.
    fn sq_dist_to_rows(&self, g: &mut Graph<T>, z: Var, centers: Var, n: usize) -> Result<Var> {
        let mut cols = Vec::with_capacity(n);
        for y in 0..n {
            let mut sel = Tensor::zeros(1, n);
            sel.set(0, y, T::one());
            let sel = g.constant(sel);
            let row = g.matmul(sel, centers)?;
            let diff = g.sub(z, row)?;
            let sq = g.square(diff)?;
            cols.push(g.sum(sq, Axis::Cols)?);
        }
        g.concat(&cols)
    }

    fn half_log_2pi_d(&self) -> T {
        T::of(0.5 * self.dim as f64 * (2.0 * PI).ln())
    }

    /// Mixture NLL over all class centers (labels unused).
    pub fn loss_g(&self, g: &mut Graph<T>, b: &LatentBatch) -> Result<Var> {
        let logits = self.weighted_logits(g, b)?;
        let lse = g.logsumexp(logits, Axis::Cols)?;
        let konst = g.scalar(self.half_log_2pi_d());
        let per = g.sub(konst, lse)?;
        let per = g.sub(per, b.logdet)?;
        g.mean_all(per)
    }

    /// `-(logsoftmax_y(logits) - c_y)` averaged over the batch.
    pub fn loss_mi(&self, g: &mut Graph<T>, b: &LatentBatch) -> Result<Var> {
        let logits = self.weighted_logits(g, b)?;
        let ls = g.log_softmax(logits, Axis::Cols)?;
        let picked = g.mul(ls, b.onehot)?;
        let picked = g.sum(picked, Axis::Cols)?;
        let c_label = g.mul(b.onehot, b.class_logw)?;
        let c_label = g.sum(c_label, Axis::Cols)?;
        let per = g.sub(c_label, picked)?;
        g.mean_all(per)
    }

    /// Entropy of the class posterior built from `-‖z - mu_y‖²/2`.
    pub fn loss_entropy(&self, g: &mut Graph<T>, b: &LatentBatch) -> Result<Var> {
        let mut logits = g.scale(b.sq_dist, T::of(-0.5))?;
        if self.entropy_uses_weights {
            logits = g.add(logits, b.class_logw)?;
        }
        let ls = g.log_softmax(logits, Axis::Cols)?;
        let p = g.exp(ls)?;
        let plogp = g.mul(p, ls)?;
        let s = g.sum(plogp, Axis::Cols)?;
        let per = g.neg(s)?;
        g.mean_all(per)
    }

    /// Per-class sub-center mixture NLL with the main center detached.
    /// Omits the `d/2·ln 2π` constant.
    pub fn loss_intra(&self, g: &mut Graph<T>, bp: &BoundPrior, b: &LatentBatch) -> Result<Var> {
        let d = self.dim;
        let main_sg = g.stop_gradient(bp.mu);
        let main = g.matmul(b.onehot, main_sg)?;
        let centered = g.sub(b.z, main)?;
        let mut cols = Vec::with_capacity(self.intra);
        for i in 0..self.intra {
            let diff = if i == 0 {
                centered
            } else {
                let off = g.split(bp.delta, i * d, d)?;
                let off = g.matmul(b.onehot, off)?;
                g.sub(centered, off)?
            };
            let sq = g.square(diff)?;
            cols.push(g.sum(sq, Axis::Cols)?);
        }
        let dist = g.concat(&cols)?;
        let logw = g.log_softmax(bp.psi_intra, Axis::Cols)?;
        let logw = g.matmul(b.onehot, logw)?;
        let logits = g.scale(dist, T::of(-0.5))?;
        let logits = g.add(logits, logw)?;
        let lse = g.logsumexp(logits, Axis::Cols)?;
        let per = g.neg(lse)?;
        let per = g.sub(per, b.logdet)?;
        g.mean_all(per)
    }

    fn weighted_logits(&self, g: &mut Graph<T>, b: &LatentBatch) -> Result<Var> {
        let logits = g.scale(b.sq_dist, T::of(-0.5))?;
        g.add(logits, b.class_logw)
    }

    /// All four terms; `total` follows the stage gating.
    #[allow(clippy::too_many_arguments)]
    pub fn total_loss(
        &self,
        g: &mut Graph<T>,
        bp: &BoundPrior,
        b: &LatentBatch,
        lambda1: f64,
        lambda2: f64,
        stage: Stage,
    ) -> Result<LossBundle> {
        let lg = self.loss_g(g, b)?;
        let lmi = self.loss_mi(g, b)?;
        let le = self.loss_entropy(g, b)?;
        let lin = self.loss_intra(g, bp, b)?;
        let wg = g.scale(lg, T::of(lambda1))?;
        let wmi = g.scale(lmi, T::of(lambda2))?;
        let mut total = g.add(wg, wmi)?;
        if stage == Stage::Full {
            total = g.add(total, le)?;
            total = g.add(total, lin)?;
        }
        let val = |v: Var| g.value(v).item().as_f64();
        Ok(LossBundle {
            l_g: val(lg),
            l_mi: val(lmi),
            l_e: val(le),
            l_in: val(lin),
            total: val(total),
            lambda1,
            lambda2,
            total_var: total,
        })
    }

    /// Nearest main center, for label-free scoring.
    pub fn infer_label(&self, z: &[T]) -> usize {
        (0..self.classes)
            .map(|y| (y, sq_dist(z, self.mu.row(y))))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(y, _)| y)
            .unwrap_or(0)
    }

    /// Per-sample `(intra-class log-likelihood, inter-class negative entropy)`
    /// evaluated in 64-bit. `logdet` is the flow log-determinant per row.
    pub fn sample_stats(&self, z: &Tensor<T>, logdet: &[T], labels: &[usize]) -> Result<Vec<SampleStats>> {
        self.check_labels(labels)?;
        if z.cols() != self.dim || z.rows() != labels.len() || logdet.len() != labels.len() {
            return Err(Error::shape("sample_stats", "z, logdet and labels disagree"));
        }
        let konst = 0.5 * self.dim as f64 * (2.0 * PI).ln();
        let class_w = self.class_log_weights();
        let intra_w: Vec<Vec<f64>> = (0..self.classes).map(|y| self.intra_log_weights(y)).collect();
        let centers: Vec<Vec<Vec<f64>>> = (0..self.classes)
            .map(|y| (0..self.intra).map(|i| self.sub_center(y, i)).collect())
            .collect();

        let mut out = Vec::with_capacity(labels.len());
        for (r, &y) in labels.iter().enumerate() {
            let zr = z.row(r);
            let intra: Vec<f64> = centers[y]
                .iter()
                .zip(&intra_w[y])
                .map(|(c, w)| -0.5 * sq_dist_f64(zr, c) + w)
                .collect();
            let logp = logsumexp_f64(&intra) + logdet[r].as_f64() - konst;

            let mut logits: Vec<f64> = (0..self.classes).map(|k| -0.5 * sq_dist(zr, self.mu.row(k))).collect();
            if self.entropy_uses_weights {
                logits.iter_mut().zip(&class_w).for_each(|(l, c)| *l += c);
            }
            let ls = log_softmax_f64(&logits);
            let neg_entropy: f64 = ls.iter().map(|&l| l.exp() * l).sum();
            if !logp.is_finite() || !neg_entropy.is_finite() {
                return Err(Error::NonFinite { op: "sample_stats" });
            }
            out.push(SampleStats { logp, neg_entropy });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStats {
    pub logp: f64,
    /// `Σ_y p_y log p_y`, always ≤ 0.
    pub neg_entropy: f64,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum()
}

fn sq_dist_f64<T: Scalar>(a: &[T], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y).powi(2)).sum()
}

pub(crate) fn logsumexp_f64(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn log_softmax_f64(v: &[f64]) -> Vec<f64> {
    let l = logsumexp_f64(v);
    v.iter().map(|x| x - l).collect()
}
