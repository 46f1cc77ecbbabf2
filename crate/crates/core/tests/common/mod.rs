//! Checks shared by the topic test files and the acceptance gate. Each
//! returns the measured error so callers decide how to report it.
#![allow(dead_code)]

use std::f64::consts::PI;

use hgad_core::flow::{FlowConfig, FlowModel, PermMode};
use hgad_core::numerics::{grad_check, Axis, Graph, Scalar, Tensor, Var};
use hgad_core::prior::{BoundPrior, HierarchicalPrior, Stage};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(r: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| T::of(r.random_range(lo..hi)))
}

pub fn flow_config(blocks: usize, hidden: usize, pos_dim: usize) -> FlowConfig {
    FlowConfig {
        blocks,
        hidden: Some(hidden),
        pos_dim,
        ..FlowConfig::default()
    }
}

/// Max |x - inverse(forward(x))| over `n` inputs in [-3, 3]^dim through a
/// 12-block flow with positional conditioning.
pub fn invertibility_error<T: Scalar>(dim: usize, n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let cfg = flow_config(12, 2 * dim.max(16), 8);
    let flow = FlowModel::<T>::new(0, dim, &cfg, seed).expect("flow");
    let x: Tensor<T> = uniform(&mut r, n, dim, -3.0, 3.0);
    let pos: Tensor<T> = uniform(&mut r, n, 8, -1.0, 1.0);
    let (z, _) = flow.forward_tensor(&x, Some(&pos)).expect("forward");
    let back = flow.inverse(&z, Some(&pos)).expect("inverse");
    back.max_abs_diff(&x).as_f64()
}

/// `ln|det J|` of `f` at `x` from a central-difference Jacobian.
pub fn numerical_log_abs_det(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> f64 {
    let d = x.len();
    let mut jac = DMatrix::<f64>::zeros(d, d);
    let mut xp = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + h;
        let plus = f(&xp);
        xp[j] = x[j] - h;
        let minus = f(&xp);
        xp[j] = x[j];
        for i in 0..d {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

/// Replaces every subnet weight with `U(-0.5, 0.5)`, well away from the
/// near-identity init.
pub fn randomize_subnets<T: Scalar>(flow: &mut FlowModel<T>, r: &mut impl Rng) {
    for t in flow.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = T::of(r.random_range(-0.5..0.5)));
    }
}

/// Max |analytic logdet - numerical ln|det J|| over `models` random flows.
/// Models alternate permutation modes and use a non-unit block scale on odd
/// indices so every logdet contribution is exercised.
pub fn logdet_error(dim: usize, models: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for m in 0..models {
        let mut r = rng(seed ^ (m as u64 * 7919));
        let mut cfg = flow_config(4, 12, 3);
        cfg.perm = if m % 2 == 0 { PermMode::Hard } else { PermMode::Orthogonal };
        cfg.scale = if m % 2 == 1 { 0.9 } else { 1.0 };
        let mut flow = FlowModel::<f64>::new(0, dim, &cfg, seed + m as u64).expect("flow");
        randomize_subnets(&mut flow, &mut r);
        let pos: Tensor<f64> = uniform(&mut r, 1, 3, -1.0, 1.0);
        let x: Vec<f64> = (0..dim).map(|_| r.random_range(-2.0..2.0)).collect();
        let run = |v: &[f64]| flow.forward_tensor(&Tensor::from_rows(1, dim, v.to_vec()), Some(&pos)).expect("forward");
        let (_, ld) = run(&x);
        let numeric = numerical_log_abs_det(|v| run(v).0.into_data(), &x, 1e-5);
        worst = worst.max((ld[0] - numeric).abs());
    }
    worst
}

/// Small flow + prior with every parameter group randomised, for gradient
/// and oracle checks.
pub struct Toy {
    pub flow: FlowModel<f64>,
    pub prior: HierarchicalPrior<f64>,
    pub x: Tensor<f64>,
    pub pos: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl Toy {
    pub fn new(classes: usize, intra: usize, dim: usize, batch: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let mut flow = FlowModel::<f64>::new(0, dim, &flow_config(2, 6, 2), seed).expect("flow");
        randomize_subnets(&mut flow, &mut r);
        let mut prior = HierarchicalPrior::<f64>::init(classes, intra, dim, seed).expect("prior");
        prior.psi = uniform(&mut r, 1, classes, -1.0, 1.0);
        prior.delta = uniform(&mut r, classes, intra * dim, -1.0, 1.0);
        prior.psi_intra = uniform(&mut r, classes, intra, -1.0, 1.0);
        prior.enforce_pinned_offset();
        Self {
            flow,
            prior,
            x: uniform(&mut r, batch, dim, -2.0, 2.0),
            pos: uniform(&mut r, batch, 2, -1.0, 1.0),
            labels: (0..batch).map(|i| i % classes).collect(),
        }
    }

    /// Flow params followed by `mu, psi, delta, psi_intra`.
    pub fn params(&self) -> Vec<Tensor<f64>> {
        let mut p: Vec<Tensor<f64>> = self.flow.params().into_iter().cloned().collect();
        let pr = &self.prior;
        p.extend([pr.mu.clone(), pr.psi.clone(), pr.delta.clone(), pr.psi_intra.clone()]);
        p
    }

    pub fn names(&self) -> Vec<String> {
        let mut n: Vec<String> = (0..self.flow.blocks.len())
            .flat_map(|b| ["w1x", "w1p", "b1", "w2", "b2"].map(|s| format!("block{b}.{s}")))
            .collect();
        n.extend(["mu", "psi", "delta", "psi_intra"].map(String::from));
        n
    }

    /// Builds the named loss on `g` from the parameter handles in
    /// [`Self::params`] order. With one extra trailing handle, that handle is
    /// the detached copy of `mu` seen by `l_in`, so finite differences treat
    /// the stop-gradient as a constant; the total is then summed by hand.
    pub fn loss(&self, g: &mut Graph<f64>, p: &[Var], which: LossKind) -> hgad_core::Result<Var> {
        let detached = (p.len() - 4) % 5 == 1;
        let nf = p.len() - 4 - detached as usize;
        let bf = self.flow.bind_params(g, &p[..nf])?;
        let bp = BoundPrior {
            mu: p[nf],
            psi: p[nf + 1],
            delta: p[nf + 2],
            psi_intra: p[nf + 3],
        };
        let bp_in = if detached { BoundPrior { mu: p[nf + 4], ..bp } } else { bp };
        let x = g.constant(self.x.clone());
        let pos = g.constant(self.pos.clone());
        let (z, logdet) = self.flow.forward(g, &bf, x, Some(pos))?;
        let b = self.prior.prepare(g, &bp, z, logdet, &self.labels)?;
        let pr = &self.prior;
        match which {
            LossKind::G => pr.loss_g(g, &b),
            LossKind::Mi => pr.loss_mi(g, &b),
            LossKind::E => pr.loss_entropy(g, &b),
            LossKind::In => pr.loss_intra(g, &bp_in, &b),
            LossKind::Total if !detached => Ok(pr.total_loss(g, &bp, &b, 1.0, LAMBDA2, Stage::Full)?.total_var),
            LossKind::Total => {
                let lg = pr.loss_g(g, &b)?;
                let lmi = pr.loss_mi(g, &b)?;
                let lmi = g.scale(lmi, LAMBDA2)?;
                let le = pr.loss_entropy(g, &b)?;
                let lin = pr.loss_intra(g, &bp_in, &b)?;
                let t = g.add(lg, lmi)?;
                let t = g.add(t, le)?;
                g.add(t, lin)
            }
        }
    }

    /// Latents and per-row logdet as plain values.
    pub fn latents(&self) -> (Tensor<f64>, Vec<f64>) {
        self.flow.forward_tensor(&self.x, Some(&self.pos)).expect("forward")
    }
}

pub const LAMBDA2: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    G,
    Mi,
    E,
    In,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::G, LossKind::Mi, LossKind::E, LossKind::In, LossKind::Total];
}

pub struct GradientSuite {
    /// `(loss, parameter group, max relative error)`
    pub rows: Vec<(LossKind, String, f64)>,
    /// Largest |d l_in / d mu| entry; must be exactly zero.
    pub intra_mu_grad: f64,
    /// Largest gap between gradients of the library total and the
    /// hand-summed total.
    pub total_path_gap: f64,
}

impl GradientSuite {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.2).fold(0.0, f64::max)
    }
}

fn analytic_grads(toy: &Toy, params: &[Tensor<f64>], kind: LossKind) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = toy.loss(&mut g, &vars, kind).expect("loss");
    let grads = g.backward(out).expect("backward");
    vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect()
}

/// Finite-difference check (h = 1e-4, 64-bit) of every loss term against
/// every parameter group on `instances` random Y=3, M=3, d=4 batches.
pub fn gradient_suite(instances: usize, seed: u64) -> GradientSuite {
    let mut rows = Vec::new();
    let mut intra_mu_grad: f64 = 0.0;
    let mut total_path_gap: f64 = 0.0;
    for inst in 0..instances {
        let toy = Toy::new(3, 3, 4, 6, seed + inst as u64);
        let base = toy.params();
        let mut with_detached = base.clone();
        with_detached.push(toy.prior.mu.clone());
        let names = toy.names();
        for kind in LossKind::ALL {
            let report =
                grad_check(|g, p| toy.loss(g, p, kind), &with_detached, 1e-4, 1e-4).expect("grad check");
            // the trailing detached copy has no gradient by definition
            for (i, name) in names.iter().enumerate() {
                let worst = report.for_param(i).map(|e| e.rel_err).fold(0.0, f64::max);
                rows.push((kind, name.clone(), worst));
            }
        }
        let lib = analytic_grads(&toy, &base, LossKind::Total);
        let manual = analytic_grads(&toy, &with_detached, LossKind::Total);
        for (a, b) in lib.iter().zip(&manual) {
            total_path_gap = total_path_gap.max(a.max_abs_diff(b));
        }
        let mu = &analytic_grads(&toy, &base, LossKind::In)[base.len() - 4];
        intra_mu_grad = mu.data().iter().fold(intra_mu_grad, |a, v| a.max(v.abs()));
    }
    GradientSuite {
        rows,
        intra_mu_grad,
        total_path_gap,
    }
}

pub fn half_log_2pi(dim: usize) -> f64 {
    0.5 * dim as f64 * (2.0 * PI).ln()
}

/// Isotropic unit Gaussian density, evaluated directly.
pub fn gauss(z: &[f64], mean: &[f64]) -> f64 {
    let sq: f64 = z.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
    (2.0 * PI).powf(-(z.len() as f64) / 2.0) * (-0.5 * sq).exp()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Evaluates one loss term as a plain value on a toy problem.
pub fn loss_value(toy: &Toy, kind: LossKind) -> f64 {
    let params = toy.params();
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = toy.loss(&mut g, &vars, kind).expect("loss");
    g.value(out).item()
}

/// Mutual-information loss in its general form: per sample,
/// `log p(y) - log[p(y) N(z; mu_y, I) / sum_y' p(y') N(z; mu_y', I)]`,
/// using raw densities (no log-domain shortcuts).
pub fn mi_general_form(toy: &Toy) -> f64 {
    let (z, _) = toy.latents();
    let pr = &toy.prior;
    let py = softmax(pr.psi.data());
    let mut total = 0.0;
    for (r, &y) in toy.labels.iter().enumerate() {
        let dens: Vec<f64> = (0..pr.classes).map(|k| py[k] * gauss(z.row(r), pr.mu.row(k))).collect();
        let posterior = dens[y] / dens.iter().sum::<f64>();
        total += py[y].ln() - posterior.ln();
    }
    total / toy.labels.len() as f64
}

/// `l_g` from the raw mixture density.
pub fn lg_naive(toy: &Toy) -> f64 {
    let (z, ld) = toy.latents();
    let pr = &toy.prior;
    let py = softmax(pr.psi.data());
    let n = toy.labels.len();
    (0..n)
        .map(|r| {
            let p: f64 = (0..pr.classes).map(|k| py[k] * gauss(z.row(r), pr.mu.row(k))).sum();
            -p.ln() - ld[r]
        })
        .sum::<f64>()
        / n as f64
}

/// Log of the label's sub-center mixture density at each row, raw form.
pub fn intra_log_density_naive(toy: &Toy, z: &Tensor<f64>) -> Vec<f64> {
    let pr = &toy.prior;
    toy.labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let w = softmax(pr.psi_intra.row(y));
            (0..pr.intra).map(|i| w[i] * gauss(z.row(r), &pr.sub_center(y, i))).sum::<f64>().ln()
        })
        .collect()
}

/// `l_in` (which omits the `d/2 ln 2pi` constant) from raw densities.
pub fn lin_naive(toy: &Toy) -> f64 {
    let (z, ld) = toy.latents();
    let logs = intra_log_density_naive(toy, &z);
    let c = half_log_2pi(toy.prior.dim);
    logs.iter().zip(&ld).map(|(l, d)| -(l + c) - d).sum::<f64>() / logs.len() as f64
}

/// Exact AUROC by comparing every anomalous/normal pair, ties half.
pub fn auroc_pairs(scores: &[f64], anomalous: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u128, 0u128);
    for (i, &a) in anomalous.iter().enumerate() {
        if !a {
            continue;
        }
        for (j, &b) in anomalous.iter().enumerate() {
            if b {
                continue;
            }
            pairs += 1;
            twice += match scores[i].partial_cmp(&scores[j]).expect("finite") {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// Random scores drawn from a small integer grid so ties are common.
pub fn tied_instance(r: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..8) as f64 * 0.5).collect();
        let flags: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        if flags.iter().any(|&f| f) && flags.iter().any(|&f| !f) {
            return (scores, flags);
        }
    }
}

/// The four loss terms with every center `distance` from the samples.
/// Panics if any parameter gradient is non-finite.
pub fn far_center_losses<T: Scalar>(distance: f64, seed: u64) -> [f64; 4] {
    let (classes, intra, dim, batch) = (3, 2, 4, 5);
    let mut prior = HierarchicalPrior::<T>::init(classes, intra, dim, seed).expect("prior");
    // centers along distinct axes at `distance`, samples near the origin
    prior.mu = Tensor::from_fn(classes, dim, |y, c| T::of(if c == y { distance } else { 0.0 }));
    let mut r = rng(seed);
    let z: Tensor<T> = uniform(&mut r, batch, dim, -0.5, 0.5);
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let mut g = Graph::<T>::new();
    let bp = prior.bind(&mut g);
    let zv = g.constant(z);
    let ld = g.constant(Tensor::zeros(batch, 1));
    let b = prior.prepare(&mut g, &bp, zv, ld, &labels).expect("prepare");
    let l = prior.total_loss(&mut g, &bp, &b, 1.0, 100.0, Stage::Full).expect("losses");
    let grads = g.backward(l.total_var).expect("backward");
    for v in [bp.mu, bp.psi, bp.delta, bp.psi_intra] {
        assert!(grads.get_or_zeros(&g, v).is_finite(), "non-finite gradient at distance {distance}");
    }
    [l.l_g, l.l_mi, l.l_e, l.l_in]
}

/// Per-row `logsumexp` as plain values.
pub fn row_logsumexp<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    hgad_core::numerics::logsumexp(x, Axis::Cols)
        .expect("lse")
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect()
}
